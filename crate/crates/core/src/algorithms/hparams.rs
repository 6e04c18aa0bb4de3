use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "MML")]
    Mml,
    #[serde(rename = "DG")]
    Dg,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Mml => "MML",
            Family::Dg => "DG",
        }
    }
}

/// Every algorithm with a hyperparameter space. Only those for which
/// [`Algorithm::is_implemented`] holds can be trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Concat,
    Ogm,
    Dlmg,
    Erm,
    Irm,
    Mixup,
    SagNet,
    IbErm,
    Cdann,
    CondCad,
    Eqrm,
    ErmPlusPlus,
    Urm,
}

impl Algorithm {
    pub const IMPLEMENTED: [Algorithm; 10] = [
        Algorithm::Concat,
        Algorithm::Ogm,
        Algorithm::Erm,
        Algorithm::Irm,
        Algorithm::Mixup,
        Algorithm::IbErm,
        Algorithm::Eqrm,
        Algorithm::ErmPlusPlus,
        Algorithm::Urm,
        Algorithm::Cdann,
    ];

    pub const ALL: [Algorithm; 13] = [
        Algorithm::Concat,
        Algorithm::Ogm,
        Algorithm::Dlmg,
        Algorithm::Erm,
        Algorithm::Irm,
        Algorithm::Mixup,
        Algorithm::SagNet,
        Algorithm::IbErm,
        Algorithm::Cdann,
        Algorithm::CondCad,
        Algorithm::Eqrm,
        Algorithm::ErmPlusPlus,
        Algorithm::Urm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Concat => "concat",
            Algorithm::Ogm => "ogm",
            Algorithm::Dlmg => "dlmg",
            Algorithm::Erm => "erm",
            Algorithm::Irm => "irm",
            Algorithm::Mixup => "mixup",
            Algorithm::SagNet => "sagnet",
            Algorithm::IbErm => "ib_erm",
            Algorithm::Cdann => "cdann",
            Algorithm::CondCad => "condcad",
            Algorithm::Eqrm => "eqrm",
            Algorithm::ErmPlusPlus => "erm++",
            Algorithm::Urm => "urm",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Algorithm::Concat | Algorithm::Ogm | Algorithm::Dlmg => Family::Mml,
            _ => Family::Dg,
        }
    }

    pub fn is_implemented(self) -> bool {
        Self::IMPLEMENTED.contains(&self)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        let key = if key == "ermpp" { "erm++".to_string() } else { key };
        Self::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| {
                let names: Vec<_> = Self::IMPLEMENTED.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown algorithm '{s}' (known: {})", names.join(", ")))
            })
    }
}

impl Serialize for Algorithm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Algorithm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Sampling distribution of one hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Dist {
    /// `10^U(a, b)`
    LogUniform(f64, f64),
    /// `U(a, b)`
    Uniform(f64, f64),
    /// `2^U(a, b)`, rounded to an integer
    Pow2Uniform(f64, f64),
    Choice(Vec<f64>),
}

impl Dist {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let uniform = |rng: &mut Rng, a: f64, b: f64| if a == b { a } else { rng.random_range(a..b) };
        match self {
            Dist::LogUniform(a, b) => 10f64.powf(uniform(rng, *a, *b)),
            Dist::Uniform(a, b) => uniform(rng, *a, *b),
            Dist::Pow2Uniform(a, b) => 2f64.powf(uniform(rng, *a, *b)).round(),
            Dist::Choice(options) => options[rng.random_range(0..options.len())],
        }
    }

    /// Whether `v` is a value this distribution can produce (defaults may lie outside).
    pub fn contains(&self, v: f64) -> bool {
        let tol = 1e-12;
        match self {
            Dist::LogUniform(a, b) => v > 0.0 && v.log10() >= a - tol && v.log10() <= b + tol,
            Dist::Uniform(a, b) => v >= a - tol && v <= b + tol,
            Dist::Pow2Uniform(a, b) => {
                v >= 2f64.powf(*a).round() && v <= 2f64.powf(*b).round() && v.fract() == 0.0
            }
            Dist::Choice(options) => options.contains(&v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HParamEntry {
    pub name: &'static str,
    pub default: f64,
    pub dist: Dist,
}

fn entry(name: &'static str, default: f64, dist: Dist) -> HParamEntry {
    HParamEntry { name, default, dist }
}

/// Search space of an algorithm: shared entries for its family followed by
/// its own.
pub fn hparam_space(algorithm: Algorithm) -> Vec<HParamEntry> {
    use Dist::*;
    let mut space = vec![entry("batch_size", 32.0, Pow2Uniform(3.0, 5.5))];
    match algorithm.family() {
        Family::Mml => space.extend([
            entry("lr", 1e-3, LogUniform(-4.0, -2.0)),
            entry("momentum", 0.9, Uniform(0.85, 0.95)),
            entry("weight_decay", 1e-4, LogUniform(-6.0, -2.0)),
            entry("patience", 70.0, Uniform(60.0, 80.0)),
        ]),
        Family::Dg => {
            space.push(entry("lr", 5e-5, LogUniform(-5.0, -3.5)));
            // A zero default sits outside the log-uniform support on purpose.
            space.push(entry("weight_decay", 0.0, LogUniform(-6.0, -2.0)));
        }
    }
    match algorithm {
        Algorithm::Ogm => space.push(entry("alpha", 0.1, Uniform(0.1, 0.3))),
        Algorithm::Irm | Algorithm::IbErm => space.extend([
            entry("lambda", 100.0, LogUniform(-1.0, 5.0)),
            entry("penalty_anneal_iters", 500.0, LogUniform(0.0, 4.0)),
        ]),
        Algorithm::Mixup => space.push(entry("alpha", 0.2, LogUniform(-1.0, 1.0))),
        Algorithm::Cdann => space.extend([
            entry("lambda", 1.0, LogUniform(-2.0, -2.0)),
            entry("disc_weight_decay", 0.0, LogUniform(-6.0, -2.0)),
            entry("disc_steps", 1.0, Pow2Uniform(0.0, 3.0)),
            entry("grad_penalty", 0.0, LogUniform(-2.0, 1.0)),
            entry("beta1", 0.5, Choice(vec![0.0, 0.5])),
        ]),
        Algorithm::SagNet => space.push(entry("adv_weight", 0.1, LogUniform(-2.0, 1.0))),
        Algorithm::CondCad => space.extend([
            entry("lambda", 0.1, Choice(vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0])),
            entry("temperature", 0.1, Choice(vec![0.05, 0.1])),
        ]),
        Algorithm::Eqrm => space.extend([
            entry("eqrm_lr", 1e-6, LogUniform(-7.0, -5.0)),
            entry("quantile", 0.75, Uniform(0.5, 0.99)),
            entry("burnin_iters", 2500.0, LogUniform(2.5, 3.5)),
        ]),
        Algorithm::ErmPlusPlus => {
            // ERM++ lists its own learning rate, identical to the shared DG one.
            space.retain(|e| e.name != "lr");
            space.push(entry("lr", 5e-5, LogUniform(-5.0, -3.5)));
        }
        Algorithm::Urm => space.push(entry("lambda", 0.1, Uniform(0.0, 0.2))),
        Algorithm::Concat | Algorithm::Dlmg | Algorithm::Erm => {}
    }
    space
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HParamMode {
    Default,
    Sample,
}

pub type HParams = BTreeMap<String, f64>;

pub fn default_or_sample_hparams(algorithm: Algorithm, mode: HParamMode, rng: &mut Rng) -> Result<HParams> {
    if !algorithm.is_implemented() {
        return Err(Error::Config(format!(
            "algorithm '{algorithm}' has a search space but no implementation"
        )));
    }
    Ok(hparam_space(algorithm)
        .into_iter()
        .map(|e| {
            let v = match mode {
                HParamMode::Default => e.default,
                HParamMode::Sample => e.dist.sample(rng),
            };
            (e.name.to_string(), v)
        })
        .collect())
}

/// Reads a hyperparameter that the algorithm's space guarantees.
pub fn get(h: &HParams, name: &str) -> Result<f64> {
    h.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing hyperparameter '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn defaults(a: Algorithm) -> HParams {
        default_or_sample_hparams(a, HParamMode::Default, &mut rng::stream(&[0])).unwrap()
    }

    #[test]
    fn irm_defaults() {
        let h = defaults(Algorithm::Irm);
        assert_eq!(h["lambda"], 100.0);
        assert_eq!(h["penalty_anneal_iters"], 500.0);
        assert_eq!(h["lr"], 5e-5);
        assert_eq!(h["weight_decay"], 0.0);
        assert_eq!(h["batch_size"], 32.0);
    }

    #[test]
    fn mml_defaults() {
        let h = defaults(Algorithm::Concat);
        assert_eq!(h["lr"], 0.001);
        assert_eq!(h["momentum"], 0.9);
        assert_eq!(h["weight_decay"], 1e-4);
        assert_eq!(h["patience"], 70.0);
        assert_eq!(defaults(Algorithm::Ogm)["alpha"], 0.1);
    }

    #[test]
    fn remaining_defaults() {
        assert_eq!(defaults(Algorithm::Mixup)["alpha"], 0.2);
        let c = defaults(Algorithm::Cdann);
        assert_eq!((c["lambda"], c["disc_steps"], c["grad_penalty"], c["beta1"]), (1.0, 1.0, 0.0, 0.5));
        let e = defaults(Algorithm::Eqrm);
        assert_eq!((e["eqrm_lr"], e["quantile"], e["burnin_iters"]), (1e-6, 0.75, 2500.0));
        assert_eq!(defaults(Algorithm::Urm)["lambda"], 0.1);
        assert_eq!(defaults(Algorithm::ErmPlusPlus)["lr"], 5e-5);
        assert_eq!(defaults(Algorithm::IbErm)["lambda"], 100.0);
    }

    #[test]
    fn excluded_algorithms_keep_their_spaces() {
        assert!(hparam_space(Algorithm::SagNet).iter().any(|e| e.name == "adv_weight"));
        assert!(hparam_space(Algorithm::CondCad).iter().any(|e| e.name == "temperature"));
        assert!(matches!(
            default_or_sample_hparams(Algorithm::Dlmg, HParamMode::Default, &mut rng::stream(&[0])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert_eq!("IB-ERM".parse::<Algorithm>().unwrap(), Algorithm::IbErm);
        assert!("foo".parse::<Algorithm>().is_err());
    }

    #[test]
    fn samples_stay_inside_their_intervals() {
        let mut r = rng::stream(&[7]);
        for a in Algorithm::IMPLEMENTED {
            let space = hparam_space(a);
            for _ in 0..10_000 {
                let h = default_or_sample_hparams(a, HParamMode::Sample, &mut r).unwrap();
                for e in &space {
                    assert!(e.dist.contains(h[e.name]), "{a} {} = {}", e.name, h[e.name]);
                }
            }
        }
    }

    #[test]
    fn eqrm_quantile_range() {
        let mut r = rng::stream(&[3]);
        for _ in 0..1000 {
            let q = default_or_sample_hparams(Algorithm::Eqrm, HParamMode::Sample, &mut r).unwrap()["quantile"];
            assert!((0.5..=0.99).contains(&q));
        }
    }
}
