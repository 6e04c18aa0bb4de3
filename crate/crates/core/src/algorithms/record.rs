use serde::{Deserialize, Serialize};

use super::hparams::{Algorithm, Family, HParams};
use crate::protocols::Protocol;
use crate::synthworld::PerceptorMode;

/// Validation metrics at one checkpoint. Metrics the run's protocol may not
/// compute are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    /// Mean validation AUC over the training modalities.
    pub tm_val_auc: f64,
    /// Mean pseudo-held-out validation AUC over leave-one-out folds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loo_val_auc: Option<f64>,
    /// Validation AUC on the held-out modality (final checkpoint, oracle runs only).
    pub oracle_val_auc: Option<f64>,
}

/// One trained run, serialized as a JSON line. Field order is the key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub setting: String,
    pub algorithm: Algorithm,
    pub family: Family,
    pub protocol: Protocol,
    pub seed: usize,
    pub trial: usize,
    pub test_modality: usize,
    pub hparams: HParams,
    pub checkpoints: Vec<Checkpoint>,
    /// Test AUC of the checkpoint the protocol designates.
    pub final_test_auc: Option<f64>,
    pub selected: bool,
    /// Kept empty so that records are reproducible byte for byte; timings
    /// are reported separately.
    pub wall_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Name of the evaluation setting a perceptor mode realizes.
pub fn setting_name(mode: PerceptorMode) -> &'static str {
    match mode {
        PerceptorMode::Semantic => "weak",
        PerceptorMode::Isolated => "strong",
        PerceptorMode::RandomInit => "random_init",
    }
}

pub fn run_id(setting: &str, algorithm: Algorithm, protocol: Protocol, test: usize, trial: usize, seed: usize) -> String {
    format!("{setting}-{algorithm}-{}-m{test}-t{trial}-s{seed}", protocol.as_str())
}

impl RunRecord {
    /// The protocol's selection score for this run, if it has one.
    pub fn selection_score(&self) -> Option<f64> {
        if self.failure.is_some() {
            return None;
        }
        let best = |f: &dyn Fn(&Checkpoint) -> Option<f64>| {
            self.checkpoints.iter().filter_map(f).fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            })
        };
        match self.protocol {
            Protocol::Tm => best(&|c| Some(c.tm_val_auc)),
            Protocol::Loo => best(&|c| c.loo_val_auc),
            Protocol::Oracle => self.checkpoints.last().and_then(|c| c.oracle_val_auc),
        }
    }
}
