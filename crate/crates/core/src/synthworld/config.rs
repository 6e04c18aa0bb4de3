use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every knob of the generative model. A world is regenerated from this
/// document alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_modalities: usize,
    pub essence_dim: usize,
    pub style_dim: usize,
    pub raw_dim: usize,
    pub perceptor_dim: usize,
    pub samples_per_modality: usize,
    /// Norm of the fake-class essence mean shift.
    pub fake_mean_shift: f64,
    /// Standard-deviation multiplier of fake essence.
    pub fake_variance_inflation: f64,
    /// Label-dependent style shift in the training modalities.
    pub style_leak_train: f64,
    /// Label-dependent style shift in the held-out modality.
    pub style_leak_test: f64,
    pub semantic_essence_gain: f64,
    pub semantic_style_gain: f64,
    pub observation_noise: f64,
    /// Aligned worlds share one (label, essence) draw per index across modalities.
    pub aligned: bool,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_modalities: 3,
            essence_dim: 8,
            style_dim: 24,
            raw_dim: 96,
            perceptor_dim: 64,
            samples_per_modality: 3000,
            fake_mean_shift: 1.0,
            fake_variance_inflation: 1.5,
            style_leak_train: 0.8,
            style_leak_test: -0.8,
            semantic_essence_gain: 0.5,
            semantic_style_gain: 2.0,
            observation_noise: 0.1,
            aligned: true,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// The null-signal variant: labels carry no information about features.
    pub fn null_signal(mut self) -> Self {
        self.fake_mean_shift = 0.0;
        self.fake_variance_inflation = 1.0;
        self.style_leak_train = 0.0;
        self.style_leak_test = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_modalities == 0
            || self.essence_dim == 0
            || self.style_dim == 0
            || self.raw_dim == 0
            || self.perceptor_dim == 0
        {
            return fail("all dimensions and the modality count must be positive".into());
        }
        if self.essence_dim + self.style_dim > self.raw_dim {
            return fail(format!(
                "essence_dim + style_dim ({}) exceeds raw_dim ({})",
                self.essence_dim + self.style_dim,
                self.raw_dim
            ));
        }
        if self.essence_dim > self.perceptor_dim {
            return fail(format!(
                "essence_dim ({}) exceeds perceptor_dim ({})",
                self.essence_dim, self.perceptor_dim
            ));
        }
        if self.samples_per_modality < 10 {
            return fail("samples_per_modality must be at least 10".into());
        }
        let reals = [
            ("fake_mean_shift", self.fake_mean_shift),
            ("fake_variance_inflation", self.fake_variance_inflation),
            ("style_leak_train", self.style_leak_train),
            ("style_leak_test", self.style_leak_test),
            ("semantic_essence_gain", self.semantic_essence_gain),
            ("semantic_style_gain", self.semantic_style_gain),
            ("observation_noise", self.observation_noise),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !v.is_finite()) {
            return fail(format!("{name} must be finite"));
        }
        if self.fake_variance_inflation < 1.0 {
            return fail("fake_variance_inflation must be at least 1".into());
        }
        if self.observation_noise < 0.0 {
            return fail("observation_noise must be non-negative".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::Config(e.into_inner().to_string())
            } else {
                Error::Config(format!("{path}: {}", e.into_inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults_and_overrides_apply() {
        assert_eq!(WorldConfig::from_json("{}").unwrap(), WorldConfig::default());
        let cfg = WorldConfig::from_json(r#"{"essence_dim": 4}"#).unwrap();
        assert_eq!(cfg.essence_dim, 4);
        assert_eq!(cfg.style_dim, 24);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_named() {
        let err = WorldConfig::from_json(r#"{"essence_dmi": 8}"#).unwrap_err().to_string();
        assert!(err.contains("essence_dmi"), "{err}");
        let err = WorldConfig::from_json(r#"{"aligned": 3}"#).unwrap_err().to_string();
        assert!(err.contains("aligned") && err.contains("invalid type"), "{err}");
    }

    #[test]
    fn invariants_are_checked() {
        let bad = WorldConfig {
            raw_dim: 20,
            ..WorldConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = WorldConfig {
            fake_variance_inflation: 0.5,
            ..WorldConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = WorldConfig {
            essence_dim: 80,
            raw_dim: 200,
            ..WorldConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = WorldConfig {
            seed: 42,
            aligned: false,
            ..WorldConfig::default()
        };
        assert_eq!(WorldConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
