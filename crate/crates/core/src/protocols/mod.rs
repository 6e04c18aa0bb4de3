//! Evaluation layer: AUC, model-selection protocols, the benchmark sweep,
//! the ablation runner and report aggregation.

mod ablation;
mod metrics;
mod report;
mod runner;

pub use ablation::{ablation_mean, run_ablation, AblationMode, AblationRow};
pub use metrics::{auc, auc_pairwise};
pub use report::{aggregate_report, mean_std, BenchmarkReport, ReportRow, AVERAGE_MODALITY, REPORT_HEADER};
pub use runner::{mark_selected, materialize, run_benchmark, select_model, trial_hparams, SweepConfig};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How hyperparameters and checkpoints are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Validation splits of the training modalities.
    Tm,
    /// Leave one training modality out as a pseudo-unseen modality.
    Loo,
    /// Validation split of the held-out modality, final checkpoint only.
    Oracle,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Tm => "tm",
            Protocol::Loo => "loo",
            Protocol::Oracle => "oracle",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tm" => Ok(Self::Tm),
            "loo" => Ok(Self::Loo),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::Config(format!(
                "unknown protocol '{other}' (valid protocols: tm, loo, oracle)"
            ))),
        }
    }
}
