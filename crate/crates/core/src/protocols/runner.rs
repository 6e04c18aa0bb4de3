use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Protocol;
use crate::algorithms::{
    default_or_sample_hparams, derive_run_seed, train_run, Algorithm, HParamMode, HParams, RunOutput, RunRecord,
    RunSpec, TrainSettings,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::synthworld::{apply_perceptor, ModalityDataset, PerceptorMode, SyntheticWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub algorithms: Vec<Algorithm>,
    pub trials: usize,
    pub seeds: usize,
    pub protocol: Protocol,
    pub mode: PerceptorMode,
    pub steps: usize,
    pub eval_cadence: usize,
    pub global_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let settings = TrainSettings::default();
        Self {
            algorithms: Algorithm::IMPLEMENTED.to_vec(),
            trials: 9,
            seeds: 3,
            protocol: Protocol::Tm,
            mode: PerceptorMode::Semantic,
            steps: settings.steps,
            eval_cadence: settings.eval_cadence,
            global_seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.seeds == 0 {
            return Err(Error::Config("trials and seeds must both be at least 1".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("no algorithms to sweep".into()));
        }
        if let Some(a) = self.algorithms.iter().find(|a| !a.is_implemented()) {
            return Err(Error::Config(format!("algorithm '{a}' is not implemented")));
        }
        if self.steps == 0 || self.eval_cadence == 0 {
            return Err(Error::Config("steps and eval cadence must be positive".into()));
        }
        Ok(())
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            steps: self.steps,
            eval_cadence: self.eval_cadence,
        }
    }
}

/// Hyperparameters of one trial. Trial 0 runs the defaults; later trials
/// are random-search draws keyed by (global seed, algorithm, trial), shared
/// by every seed and held-out modality.
pub fn trial_hparams(algorithm: Algorithm, trial: usize, global_seed: u64) -> Result<HParams> {
    let mut r = rng::stream(&[global_seed, rng::tag("hparams"), rng::tag(algorithm.name()), trial as u64]);
    let mode = if trial == 0 {
        HParamMode::Default
    } else {
        HParamMode::Sample
    };
    default_or_sample_hparams(algorithm, mode, &mut r)
}

/// Datasets of every modality for a run that holds out `held_out`.
pub fn materialize(world: &SyntheticWorld, mode: PerceptorMode, held_out: usize) -> Result<Vec<ModalityDataset>> {
    (0..world.num_modalities())
        .map(|k| apply_perceptor(mode, world, k, held_out))
        .collect()
}

struct Job {
    test: usize,
    spec: RunSpec,
}

/// Every (held-out modality, algorithm, trial, seed) run of a sweep, in that
/// nesting order. Runs execute on the current rayon pool; the result order
/// does not depend on scheduling.
pub fn run_benchmark(world: &SyntheticWorld, config: &SweepConfig) -> Result<Vec<RunOutput>> {
    config.validate()?;
    let k = world.num_modalities();
    if k < 2 {
        return Err(Error::Contract("a benchmark needs at least two modalities".into()));
    }
    let datasets: Vec<Vec<ModalityDataset>> = (0..k)
        .into_par_iter()
        .map(|m| materialize(world, config.mode, m))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for test in 0..k {
        for &algorithm in &config.algorithms {
            for trial in 0..config.trials {
                let hparams = trial_hparams(algorithm, trial, config.global_seed)?;
                for seed in 0..config.seeds {
                    jobs.push(Job {
                        test,
                        spec: RunSpec {
                            algorithm,
                            hparams: hparams.clone(),
                            trial,
                            seed_index: seed,
                            run_seed: derive_run_seed(config.global_seed, algorithm, trial, seed, test),
                            linear_head: false,
                        },
                    });
                }
            }
        }
    }
    let settings = config.settings();
    jobs.par_iter()
        .map(|job| {
            let train: Vec<usize> = (0..k).filter(|&m| m != job.test).collect();
            let out = train_run(&datasets[job.test], &train, job.test, config.protocol, &job.spec, settings)?;
            log::info!(
                "{} test AUC {:?}{}",
                out.record.run_id,
                out.record.final_test_auc,
                out.record.failure.as_deref().map(|f| format!(" failed: {f}")).unwrap_or_default()
            );
            Ok(out)
        })
        .collect()
}

/// Index of the selected run for each seed, among runs of one algorithm and
/// held-out modality. The winner maximizes the protocol's selection score;
/// ties go to the lowest trial. Seeds whose runs all failed select nothing.
pub fn select_model(runs: &[RunRecord]) -> Result<BTreeMap<usize, usize>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Contract("selection over an empty run set".into()))?;
    if let Some(r) = runs.iter().find(|r| {
        r.algorithm != first.algorithm
            || r.test_modality != first.test_modality
            || r.protocol != first.protocol
            || r.setting != first.setting
    }) {
        return Err(Error::Contract(format!(
            "selection mixes {} with {}",
            first.run_id, r.run_id
        )));
    }
    let mut best: BTreeMap<usize, (usize, f64, usize)> = BTreeMap::new();
    for (i, r) in runs.iter().enumerate() {
        let Some(score) = r.selection_score() else { continue };
        let better = match best.get(&r.seed) {
            None => true,
            Some(&(_, s, trial)) => score > s || (score == s && r.trial < trial),
        };
        if better {
            best.insert(r.seed, (i, score, r.trial));
        }
    }
    Ok(best.into_iter().map(|(seed, (i, _, _))| (seed, i)).collect())
}

/// Sets `selected` on the winning run of every (setting, algorithm,
/// protocol, held-out modality, seed) cell.
pub fn mark_selected(records: &mut [RunRecord]) -> Result<()> {
    let mut groups: BTreeMap<(String, String, Protocol, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups
            .entry((r.setting.clone(), r.algorithm.name().to_string(), r.protocol, r.test_modality))
            .or_default()
            .push(i);
    }
    for r in records.iter_mut() {
        r.selected = false;
    }
    for idx in groups.values() {
        let group: Vec<RunRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        for local in select_model(&group)?.values() {
            records[idx[*local]].selected = true;
        }
    }
    Ok(())
}
