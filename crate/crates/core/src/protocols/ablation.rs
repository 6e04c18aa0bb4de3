use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::runner::{materialize, trial_hparams};
use super::Protocol;
use crate::algorithms::{derive_run_seed, train_run, Algorithm, RunSpec, TrainSettings};
use crate::error::{Error, Result};
use crate::rng;
use crate::synthworld::{PerceptorMode, SyntheticWorld};

/// Where the forensic knowledge used on the dark modality comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// The full detector trained on all training modalities, isolated perceptors.
    Full,
    /// A linear head trained on one training modality, isolated perceptors.
    SingleModality,
    /// The full detector on randomly initialized perceptors.
    RandomInit,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Full, AblationMode::SingleModality, AblationMode::RandomInit];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::SingleModality => "single_modality",
            AblationMode::RandomInit => "random_init",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "single_modality" | "single-modality" => Ok(Self::SingleModality),
            "random_init" | "random-init" => Ok(Self::RandomInit),
            other => Err(Error::Config(format!(
                "unknown ablation mode '{other}' (valid modes: full, single_modality, random_init)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub seed: usize,
    pub test_modality: usize,
    pub train_modalities: Vec<usize>,
    pub test_auc: Option<f64>,
}

/// ERM with default hyperparameters, final checkpoint, every modality taking
/// a turn as the dark one. The single-modality head trains on the lowest
/// indexed remaining modality.
pub fn run_ablation(
    world: &SyntheticWorld,
    mode: AblationMode,
    seeds: usize,
    settings: TrainSettings,
    global_seed: u64,
) -> Result<Vec<AblationRow>> {
    let k = world.num_modalities();
    if k < 2 {
        return Err(Error::Contract("an ablation needs at least two modalities".into()));
    }
    let perceptor = match mode {
        AblationMode::Full | AblationMode::SingleModality => PerceptorMode::Isolated,
        AblationMode::RandomInit => PerceptorMode::RandomInit,
    };
    let hparams = trial_hparams(Algorithm::Erm, 0, global_seed)?;
    let jobs: Vec<(usize, usize)> = (0..k).flat_map(|t| (0..seeds).map(move |s| (t, s))).collect();
    jobs.par_iter()
        .map(|&(test, seed)| {
            let datasets = materialize(world, perceptor, test)?;
            let others = (0..k).filter(|&m| m != test);
            let train: Vec<usize> = match mode {
                AblationMode::SingleModality => others.take(1).collect(),
                _ => others.collect(),
            };
            let spec = RunSpec {
                algorithm: Algorithm::Erm,
                hparams: hparams.clone(),
                trial: 0,
                seed_index: seed,
                run_seed: rng::derive_seed(&[
                    derive_run_seed(global_seed, Algorithm::Erm, 0, seed, test),
                    rng::tag(mode.as_str()),
                ]),
                linear_head: mode == AblationMode::SingleModality,
            };
            let out = train_run(&datasets, &train, test, Protocol::Oracle, &spec, settings)?;
            Ok(AblationRow {
                mode,
                seed,
                test_modality: test,
                train_modalities: train,
                test_auc: out.record.final_test_auc,
            })
        })
        .collect()
}

/// Mean test AUC over rows that produced one.
pub fn ablation_mean(rows: &[AblationRow]) -> f64 {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.test_auc).collect();
    v.iter().sum::<f64>() / v.len() as f64
}
