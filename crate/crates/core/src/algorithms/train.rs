//! The shared training loop. Every algorithm runs the same skeleton: draw one
//! batch per training modality, assemble the algorithm's loss, take an
//! optimizer step, and evaluate every `eval_cadence` steps. Only the loss
//! assembly differs between algorithms.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use super::cdann::{one_hot, Discriminator};
use super::hparams::{get, Algorithm, Family, HParams};
use super::optim::{Adam, Optimizer, Sgd};
use super::penalties::{
    eqrm_quantile_node, ib_penalty, irm_penalty, mixup_combine, ogm_coefficients, sum_vars, urm_penalty_node,
};
use super::record::{run_id, setting_name, Checkpoint, RunRecord};
use crate::audit::{AccessLog, Phase};
use crate::detector::{
    detector_forward_with, fake_probabilities, forward_on_tape, init_detector, init_linear_head, predict_scores,
    DetectorParams, ForwardResult,
};
use crate::error::{Error, Result};
use crate::numerics::{softmax_cross_entropy, Tape, Tensor, Var};
use crate::protocols::{auc, Protocol};
use crate::rng;
use crate::synthworld::{ModalityDataset, Split};

pub const DEFAULT_STEPS: usize = 1500;
pub const DEFAULT_EVAL_CADENCE: usize = 100;
pub const EMA_DECAY: f64 = 0.999;
/// EQRM always trains at least this many steps past its burn-in.
pub const EQRM_MIN_STEPS_AFTER_BURNIN: usize = 500;

pub const REPLICATE_NOTE: &str = "unseen modality fused by replicating its features into every fusion slot";
pub const UNALIGNED_NOTE: &str = "unaligned world: fusion rows paired at random within class";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSettings {
    pub steps: usize,
    pub eval_cadence: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            eval_cadence: DEFAULT_EVAL_CADENCE,
        }
    }
}

/// A trained detector, plus the fusion projections of MML algorithms.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub detector: DetectorParams,
    /// One `D x D` block per fusion slot; empty for DG algorithms.
    pub fusion: Vec<Tensor>,
    /// Score with the EMA shadow instead of the live weights.
    pub use_ema: bool,
}

impl Model {
    /// Detector input for rows of a single modality. Fused models see the
    /// rows replicated into every slot.
    pub fn input(&self, features: &Tensor) -> Result<Tensor> {
        if self.fusion.is_empty() {
            return Ok(features.clone());
        }
        let rows = vec![features; self.fusion.len()];
        mml_fuse(&rows, &self.fusion)
    }

    pub fn scores(&self, features: &Tensor) -> Result<Vec<f64>> {
        predict_scores(&self.detector, &self.input(features)?, self.use_ema)
    }

    pub fn forward(&self, features: &Tensor) -> Result<ForwardResult> {
        detector_forward_with(&self.detector, &self.input(features)?, self.use_ema)
    }
}

/// Concatenation of per-modality rows followed by a learned `K*D -> D`
/// projection, written blockwise as `sum_m rows[m] * projections[m]`.
pub fn mml_fuse(rows: &[&Tensor], projections: &[Tensor]) -> Result<Tensor> {
    if rows.len() != projections.len() || rows.is_empty() {
        return Err(Error::Dimension(format!(
            "{} feature blocks for {} fusion slots",
            rows.len(),
            projections.len()
        )));
    }
    let mut out = rows[0].matmul(&projections[0])?;
    for (x, p) in rows.iter().zip(projections).skip(1) {
        out.add_assign(&x.matmul(p)?)?;
    }
    Ok(out)
}

/// Fusion projection `slots*dim -> dim` with uniform Glorot entries, split
/// into one block per slot.
pub fn init_fusion(slots: usize, dim: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng::stream(&[seed, rng::tag("fusion-init")]);
    let bound = (6.0 / ((slots + 1) * dim) as f64).sqrt();
    (0..slots)
        .map(|_| {
            let data = (0..dim * dim).map(|_| r.random_range(-bound..bound)).collect();
            Tensor::new(dim, dim, data).expect("sized")
        })
        .collect()
}

/// What one run trains.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub algorithm: Algorithm,
    pub hparams: HParams,
    pub trial: usize,
    pub seed_index: usize,
    /// Root of every random stream of the run.
    pub run_seed: u64,
    /// Replace the MLP trunk with a linear head on the input features.
    pub linear_head: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub model: Model,
    pub log: AccessLog,
    pub wall_ms: u64,
}

/// Seed of one run, derived from everything that identifies it so that runs
/// can execute in any order.
pub fn derive_run_seed(global_seed: u64, algorithm: Algorithm, trial: usize, seed_index: usize, test: usize) -> u64 {
    rng::derive_seed(&[
        global_seed,
        rng::tag("run"),
        rng::tag(algorithm.name()),
        trial as u64,
        seed_index as u64,
        test as u64,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Snapshot {
    Final,
    BestTm,
    AtStep(usize),
}

struct CoreJob<'a> {
    spec: &'a RunSpec,
    datasets: &'a [ModalityDataset],
    envs: Vec<usize>,
    probe: Option<usize>,
    snapshot: Snapshot,
    patience: Option<usize>,
    settings: TrainSettings,
    seed: u64,
}

struct CoreResult {
    /// (step, tm_val_auc, probe_val_auc)
    curve: Vec<(usize, f64, Option<f64>)>,
    model: Model,
    failure: Option<String>,
}

fn is_training_failure(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Numeric(_))
}

fn val_auc(model: &Model, data: &ModalityDataset) -> Result<f64> {
    let (x, y) = data.subset(Split::Val);
    auc(&model.scores(&x)?, &y)
}

/// One environment's minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<u8>,
}

fn gather(data: &ModalityDataset, idx: &[usize]) -> Batch {
    Batch {
        x: data.features.select_rows(idx),
        y: idx.iter().map(|&i| data.labels[i]).collect(),
    }
}

/// The detector-side training objective of a DG algorithm at `step`, one
/// batch per environment. CDANN needs its discriminator, whose parameters
/// enter the tape as fresh leaves.
#[allow(clippy::too_many_arguments)]
pub fn dg_loss(
    tape: &mut Tape,
    detector: &DetectorParams,
    leaves: &[Var],
    algorithm: Algorithm,
    h: &HParams,
    step: usize,
    batches: &[Batch],
    disc: Option<&Discriminator>,
) -> Result<Var> {
    let mut risks = Vec::with_capacity(batches.len());
    let mut logits = Vec::with_capacity(batches.len());
    let mut features = Vec::with_capacity(batches.len());
    for b in batches {
        let x = tape.leaf(b.x.clone())?;
        let f = forward_on_tape(detector, tape, leaves, x)?;
        risks.push(softmax_cross_entropy(tape, f.logits, &b.y)?);
        logits.push(f.logits);
        features.push(f.features);
    }
    let ce = sum_vars(tape, &risks)?;
    let loss = match algorithm {
        Algorithm::Erm | Algorithm::ErmPlusPlus => ce,
        Algorithm::Irm | Algorithm::IbErm => {
            let anneal = get(h, "penalty_anneal_iters")?.round() as usize;
            let w = if step >= anneal { get(h, "lambda")? } else { 1.0 };
            let pairs: Vec<(Var, &[u8])> = logits.iter().zip(batches).map(|(&l, b)| (l, &b.y[..])).collect();
            let mut pen = irm_penalty(tape, &pairs)?;
            if algorithm == Algorithm::IbErm {
                let ib: Vec<Var> = features.iter().map(|&f| ib_penalty(tape, f)).collect::<Result<_>>()?;
                let ib = sum_vars(tape, &ib)?;
                pen = tape.add(pen, ib)?;
            }
            let pen = tape.scale(pen, w)?;
            let total = tape.add(ce, pen)?;
            if w > 1.0 {
                tape.scale(total, 1.0 / w)?
            } else {
                total
            }
        }
        Algorithm::Eqrm => {
            if step < get(h, "burnin_iters")?.round() as usize {
                tape.scale(ce, 1.0 / risks.len() as f64)?
            } else {
                eqrm_quantile_node(tape, &risks, get(h, "quantile")?)?
            }
        }
        Algorithm::Urm => {
            let pen = urm_penalty_node(tape, &risks)?;
            let pen = tape.scale(pen, get(h, "lambda")?)?;
            tape.add(ce, pen)?
        }
        Algorithm::Cdann => {
            let disc = disc.ok_or_else(|| Error::Contract("CDANN loss without a discriminator".into()))?;
            let dleaves = disc.leaves(tape)?;
            let mut disc_ce = Vec::with_capacity(batches.len());
            for (e, (b, &f)) in batches.iter().zip(&features).enumerate() {
                let classes: Vec<usize> = b.y.iter().map(|&y| y as usize).collect();
                let y = tape.leaf(one_hot(&classes, 2))?;
                let pass = Discriminator::forward(tape, &dleaves, f, y)?;
                disc_ce.push(tape.cross_entropy(pass.logits, &vec![e; b.y.len()])?);
            }
            // equal batch sizes: the mean of per-environment CEs is the CE over all rows
            let d = sum_vars(tape, &disc_ce)?;
            let d = tape.scale(d, get(h, "lambda")? / disc_ce.len() as f64)?;
            tape.sub(ce, d)?
        }
        other => {
            return Err(Error::Config(format!("algorithm '{other}' has no DG loss")));
        }
    };
    Ok(loss)
}

/// Mixup objective: for each `(a, b, lambda)` the detector sees
/// `lambda x_a + (1 - lambda) x_b` and pays the matching mix of both CEs.
pub fn mixup_loss(
    tape: &mut Tape,
    detector: &DetectorParams,
    leaves: &[Var],
    batches: &[Batch],
    pairs: &[(usize, usize, f64)],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(pairs.len());
    for &(ia, ib, lam) in pairs {
        let (a, b) = (&batches[ia], &batches[ib]);
        let (x, (wa, wb)) = mixup_combine(&a.x, &b.x, lam)?;
        let x = tape.leaf(x)?;
        let f = forward_on_tape(detector, tape, leaves, x)?;
        let ca = softmax_cross_entropy(tape, f.logits, &a.y)?;
        let cb = softmax_cross_entropy(tape, f.logits, &b.y)?;
        let ca = tape.scale(ca, wa)?;
        let cb = tape.scale(cb, wb)?;
        terms.push(tape.add(ca, cb)?);
    }
    sum_vars(tape, &terms)
}

/// True when all environments share labels and splits row for row.
fn rows_aligned(datasets: &[ModalityDataset], envs: &[usize]) -> bool {
    let first = &datasets[envs[0]];
    envs.iter()
        .all(|&m| datasets[m].labels == first.labels && datasets[m].splits == first.splits)
}

struct Trainer<'a> {
    job: &'a CoreJob<'a>,
    model: Model,
    opt: Optimizer,
    disc: Option<(Discriminator, Adam)>,
    train_idx: Vec<Vec<usize>>,
    /// Train indices of each environment split by class, for unaligned pairing.
    by_class: Vec<[Vec<usize>; 2]>,
    aligned: bool,
    batch: usize,
    batch_rng: rng::Rng,
    aux_rng: rng::Rng,
}

impl<'a> Trainer<'a> {
    fn new(job: &'a CoreJob<'a>) -> Result<Self> {
        let spec = job.spec;
        let h = &spec.hparams;
        let first = &job.datasets[job.envs[0]];
        let dim = first.features.cols();
        let init_seed = rng::derive_seed(&[job.seed, rng::tag("init")]);
        let detector = if spec.linear_head {
            init_linear_head(dim, init_seed)?
        } else {
            init_detector(dim, init_seed)?
        };
        let family = spec.algorithm.family();
        let fusion = match family {
            Family::Mml => init_fusion(job.envs.len(), dim, init_seed),
            Family::Dg => Vec::new(),
        };
        let lr = get(h, "lr")?;
        let wd = get(h, "weight_decay")?;
        let opt = match family {
            Family::Mml => Optimizer::Sgd(Sgd::new(lr, get(h, "momentum")?, wd)),
            Family::Dg => Optimizer::Adam(Adam::new(lr, 0.9, wd)),
        };
        let disc = if spec.algorithm == Algorithm::Cdann {
            let width = detector.live.head.weight.rows();
            let d = Discriminator::new(width, job.envs.len(), rng::derive_seed(&[job.seed, rng::tag("disc-init")]));
            let o = Adam::new(lr, get(h, "beta1")?, get(h, "disc_weight_decay")?);
            Some((d, o))
        } else {
            None
        };
        let train_idx: Vec<Vec<usize>> = job.envs.iter().map(|&m| job.datasets[m].indices(Split::Train)).collect();
        if let Some(m) = train_idx.iter().position(|t| t.is_empty()) {
            return Err(Error::Input(format!("modality {} has an empty training split", job.envs[m])));
        }
        let by_class = job
            .envs
            .iter()
            .zip(&train_idx)
            .map(|(&m, idx)| {
                let labels = &job.datasets[m].labels;
                let pick = |c: u8| idx.iter().copied().filter(|&i| labels[i] == c).collect::<Vec<_>>();
                [pick(0), pick(1)]
            })
            .collect();
        let batch = get(h, "batch_size")?.round().max(1.0) as usize;
        Ok(Self {
            aligned: rows_aligned(job.datasets, &job.envs),
            model: Model {
                detector,
                fusion,
                use_ema: spec.algorithm == Algorithm::ErmPlusPlus,
            },
            opt,
            disc,
            train_idx,
            by_class,
            batch,
            batch_rng: rng::stream(&[job.seed, rng::tag("batches")]),
            aux_rng: rng::stream(&[job.seed, rng::tag("aux")]),
            job,
        })
    }

    fn data(&self, env: usize) -> &ModalityDataset {
        &self.job.datasets[self.job.envs[env]]
    }

    /// One batch per environment, drawn with replacement from its train split.
    fn dg_batches(&mut self) -> Vec<Batch> {
        (0..self.job.envs.len())
            .map(|e| {
                let idx: Vec<usize> = (0..self.batch)
                    .map(|_| self.train_idx[e][self.batch_rng.random_range(0..self.train_idx[e].len())])
                    .collect();
                gather(self.data(e), &idx)
            })
            .collect()
    }

    /// Row-paired batches for fusion: shared indices in aligned worlds,
    /// same-class partners otherwise.
    fn paired_batches(&mut self) -> Result<Vec<Batch>> {
        let base: Vec<usize> = (0..self.batch)
            .map(|_| self.train_idx[0][self.batch_rng.random_range(0..self.train_idx[0].len())])
            .collect();
        let mut out = vec![gather(self.data(0), &base)];
        for e in 1..self.job.envs.len() {
            let idx: Vec<usize> = if self.aligned {
                base.clone()
            } else {
                let labels = out[0].y.clone();
                let mut idx = Vec::with_capacity(base.len());
                for &c in &labels {
                    let pool = &self.by_class[e][c as usize];
                    if pool.is_empty() {
                        return Err(Error::Input(format!(
                            "modality {} has no training rows of class {c}",
                            self.job.envs[e]
                        )));
                    }
                    idx.push(pool[self.batch_rng.random_range(0..pool.len())]);
                }
                idx
            };
            out.push(gather(self.data(e), &idx));
        }
        Ok(out)
    }

    fn apply(&mut self, mut grads: Vec<Tensor>) -> Result<()> {
        let mut params = self.model.detector.tensors_mut();
        params.extend(self.model.fusion.iter_mut());
        if grads.len() != params.len() {
            grads.truncate(params.len());
        }
        self.opt.step(&mut params, &grads)?;
        if self.job.spec.algorithm == Algorithm::ErmPlusPlus {
            self.model.detector.ema_update(EMA_DECAY)?;
        }
        Ok(())
    }

    fn reset_adam(&mut self, lr: Option<f64>) {
        if let Optimizer::Adam(a) = &mut self.opt {
            a.reset();
            if let Some(lr) = lr {
                a.lr = lr;
            }
        }
    }

    fn step(&mut self, step: usize) -> Result<()> {
        match self.job.spec.algorithm.family() {
            Family::Mml => self.mml_step(),
            Family::Dg if self.job.spec.algorithm == Algorithm::Mixup => self.mixup_step(),
            Family::Dg => self.dg_step(step),
        }
    }

    fn dg_step(&mut self, step: usize) -> Result<()> {
        let alg = self.job.spec.algorithm;
        let h = &self.job.spec.hparams;
        let batches = self.dg_batches();
        if let Some((disc, opt)) = &mut self.disc {
            let feats: Vec<Tensor> = batches
                .iter()
                .map(|b| Ok(detector_forward_with(&self.model.detector, &b.x, false)?.forensic_features))
                .collect::<Result<_>>()?;
            let stacked = Tensor::vconcat(&feats.iter().collect::<Vec<_>>())?;
            let classes: Vec<usize> = batches.iter().flat_map(|b| b.y.iter().map(|&y| y as usize)).collect();
            let envs: Vec<usize> = batches.iter().enumerate().flat_map(|(e, b)| vec![e; b.y.len()]).collect();
            let gp = get(h, "grad_penalty")?;
            for _ in 0..get(h, "disc_steps")?.round().max(1.0) as usize {
                disc.train_step(opt, &stacked, &classes, &envs, gp)?;
            }
        }
        if (alg == Algorithm::Irm || alg == Algorithm::IbErm)
            && step == get(h, "penalty_anneal_iters")?.round() as usize && step > 0 {
                self.reset_adam(None);
            }
        if alg == Algorithm::Eqrm && step == get(h, "burnin_iters")?.round() as usize {
            self.reset_adam(Some(get(h, "eqrm_lr")?));
        }

        let mut tape = Tape::new();
        let leaves = self.model.detector.leaves(&mut tape)?;
        let disc = self.disc.as_ref().map(|(d, _)| d);
        let loss = dg_loss(&mut tape, &self.model.detector, &leaves, alg, h, step, &batches, disc)?;
        if !tape.value(loss).is_finite() {
            return Err(Error::NonFinite(format!("{alg} loss at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let g = leaves.iter().map(|&v| grads.get(v)).collect();
        self.apply(g)
    }

    /// Mixup across environment pairs `(perm[i], perm[i+1])`, summed over pairs.
    fn mixup_step(&mut self) -> Result<()> {
        let alpha = get(&self.job.spec.hparams, "alpha")?;
        let batches = self.dg_batches();
        let mut perm: Vec<usize> = (0..batches.len()).collect();
        perm.shuffle(&mut self.aux_rng);
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?;
        let pairs: Vec<(usize, usize, f64)> = (0..perm.len())
            .map(|i| (perm[i], perm[(i + 1) % perm.len()], beta.sample(&mut self.aux_rng)))
            .collect();
        let mut tape = Tape::new();
        let leaves = self.model.detector.leaves(&mut tape)?;
        let loss = mixup_loss(&mut tape, &self.model.detector, &leaves, &batches, &pairs)?;
        if !tape.value(loss).is_finite() {
            return Err(Error::NonFinite("mixup loss".into()));
        }
        let grads = tape.backward(loss)?;
        let g = leaves.iter().map(|&v| grads.get(v)).collect();
        self.apply(g)
    }

    /// Fused forward on row-paired batches; OGM damps the projection
    /// gradients of modalities that dominate the fused prediction.
    fn mml_step(&mut self) -> Result<()> {
        let batches = self.paired_batches()?;
        let labels = batches[0].y.clone();
        let mut tape = Tape::new();
        let leaves = self.model.detector.leaves(&mut tape)?;
        let proj: Vec<Var> = self
            .model
            .fusion
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<_>>()?;
        let mut parts = Vec::with_capacity(batches.len());
        for (b, &p) in batches.iter().zip(&proj) {
            let x = tape.leaf(b.x.clone())?;
            parts.push(tape.matmul(x, p)?);
        }
        let fused = sum_vars(&mut tape, &parts)?;
        let f = forward_on_tape(&self.model.detector, &mut tape, &leaves, fused)?;
        let loss = softmax_cross_entropy(&mut tape, f.logits, &labels)?;
        if !tape.value(loss).is_finite() {
            return Err(Error::NonFinite("fusion loss".into()));
        }
        let grads = tape.backward(loss)?;
        let mut g: Vec<Tensor> = leaves.iter().map(|&v| grads.get(v)).collect();
        let mut pg: Vec<Tensor> = proj.iter().map(|&v| grads.get(v)).collect();
        if self.job.spec.algorithm == Algorithm::Ogm {
            let scores = batches
                .iter()
                .zip(&self.model.fusion)
                .map(|(b, p)| {
                    let logits = crate::detector::detector_forward(&self.model.detector, &b.x.matmul(p)?)?.logits;
                    let probs = fake_probabilities(&logits);
                    let correct: f64 = probs
                        .iter()
                        .zip(&b.y)
                        .map(|(&p, &y)| if y == 1 { p } else { 1.0 - p })
                        .sum();
                    Ok(correct / probs.len() as f64)
                })
                .collect::<Result<Vec<f64>>>()?;
            let coef = ogm_coefficients(&scores, get(&self.job.spec.hparams, "alpha")?);
            for (t, c) in pg.iter_mut().zip(coef) {
                *t = t.scale(c);
            }
        }
        g.append(&mut pg);
        self.apply(g)
    }
}

/// Trains on `job.envs` and evaluates on their validation splits (plus the
/// probe modality's, for leave-one-out folds).
fn run_core(job: &CoreJob, log: &mut AccessLog) -> Result<CoreResult> {
    let mut t = Trainer::new(job)?;
    for &m in &job.envs {
        log.record(m, Split::Train, Phase::Training)?;
    }
    let mut steps = job.settings.steps;
    if job.spec.algorithm == Algorithm::Eqrm {
        let burnin = get(&job.spec.hparams, "burnin_iters")?.round() as usize;
        steps = steps.max(burnin + EQRM_MIN_STEPS_AFTER_BURNIN);
    }
    let cadence = job.settings.eval_cadence.max(1);
    let mut curve = Vec::new();
    let mut snapshot: Option<Model> = None;
    let mut best = f64::NEG_INFINITY;
    let mut best_step = 0;
    let mut failure = None;
    for step in 0..steps {
        if let Err(e) = t.step(step) {
            if is_training_failure(&e) {
                failure = Some(format!("step {step}: {e}"));
                break;
            }
            return Err(e);
        }
        let done = step + 1;
        if done % cadence != 0 && done != steps {
            continue;
        }
        let mut tm = 0.0;
        for &m in &job.envs {
            log.record(m, Split::Val, Phase::Selection)?;
            tm += val_auc(&t.model, &job.datasets[m])?;
        }
        tm /= job.envs.len() as f64;
        let probe = match job.probe {
            Some(p) => {
                log.record(p, Split::Val, Phase::Selection)?;
                Some(val_auc(&t.model, &job.datasets[p])?)
            }
            None => None,
        };
        curve.push((done, tm, probe));
        let improved = tm > best;
        if improved {
            best = tm;
            best_step = done;
        }
        match job.snapshot {
            Snapshot::BestTm if improved => snapshot = Some(t.model.clone()),
            Snapshot::AtStep(s) if s == done => snapshot = Some(t.model.clone()),
            _ => {}
        }
        if let Some(p) = job.patience {
            if done - best_step >= p {
                break;
            }
        }
    }
    let model = match job.snapshot {
        Snapshot::Final => t.model,
        _ => snapshot.unwrap_or(t.model),
    };
    Ok(CoreResult { curve, model, failure })
}

/// Per-checkpoint mean of the fold probes, over checkpoints every fold reached.
fn loo_curve(folds: &[CoreResult]) -> Vec<(usize, f64)> {
    let len = folds.iter().map(|f| f.curve.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let step = folds[0].curve[i].0;
            let mean = folds.iter().map(|f| f.curve[i].2.unwrap_or(f64::NAN)).sum::<f64>() / folds.len() as f64;
            (step, mean)
        })
        .collect()
}

/// Trains one run on `train` modalities, selects its checkpoint per
/// `protocol`, and evaluates it once on the test split of `test`.
pub fn train_run(
    datasets: &[ModalityDataset],
    train: &[usize],
    test: usize,
    protocol: Protocol,
    spec: &RunSpec,
    settings: TrainSettings,
) -> Result<RunOutput> {
    let started = Instant::now();
    if train.is_empty() {
        return Err(Error::Contract("no training modalities".into()));
    }
    if train.contains(&test) {
        return Err(Error::Contract(format!("test modality {test} is also a training modality")));
    }
    for &m in train.iter().chain([&test]) {
        match datasets.get(m) {
            Some(d) if d.modality == m => {}
            _ => return Err(Error::Contract(format!("no materialized dataset for modality {m}"))),
        }
    }
    if !spec.algorithm.is_implemented() {
        return Err(Error::Config(format!("algorithm '{}' is not implemented", spec.algorithm)));
    }
    let family = spec.algorithm.family();
    let mut log = AccessLog::new(protocol, test);
    let mut notes = Vec::new();
    if family == Family::Mml {
        notes.push(REPLICATE_NOTE.to_string());
        if !rows_aligned(datasets, train) {
            notes.push(UNALIGNED_NOTE.to_string());
        }
    }
    let job = |envs: Vec<usize>, probe, snapshot, patience, seed| CoreJob {
        spec,
        datasets,
        envs,
        probe,
        snapshot,
        patience,
        settings,
        seed,
    };

    let (main, loo) = match protocol {
        Protocol::Tm => {
            let patience = match family {
                Family::Mml => Some(get(&spec.hparams, "patience")?.round() as usize),
                Family::Dg => None,
            };
            (run_core(&job(train.to_vec(), None, Snapshot::BestTm, patience, spec.run_seed), &mut log)?, None)
        }
        Protocol::Oracle => (run_core(&job(train.to_vec(), None, Snapshot::Final, None, spec.run_seed), &mut log)?, None),
        Protocol::Loo => {
            if train.len() < 2 {
                return Err(Error::Config("leave-one-out selection needs at least two training modalities".into()));
            }
            let mut folds = Vec::with_capacity(train.len());
            for (i, &f) in train.iter().enumerate() {
                let envs: Vec<usize> = train.iter().copied().filter(|&m| m != f).collect();
                let seed = rng::derive_seed(&[spec.run_seed, rng::tag("loo-fold"), i as u64]);
                folds.push(run_core(&job(envs, Some(f), Snapshot::Final, None, seed), &mut log)?);
            }
            let curve = loo_curve(&folds);
            let fold_failure = folds.iter().find_map(|f| f.failure.clone());
            let best = curve
                .iter()
                .filter(|c| c.1.is_finite())
                .fold(None::<(usize, f64)>, |acc, &(s, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((s, v)),
                });
            let target = best.map_or(Snapshot::Final, |(s, _)| Snapshot::AtStep(s));
            let main = run_core(&job(train.to_vec(), None, target, None, spec.run_seed), &mut log)?;
            (main, Some((curve, fold_failure)))
        }
    };

    let mut checkpoints: Vec<Checkpoint> = main
        .curve
        .iter()
        .map(|&(step, tm, _)| Checkpoint {
            step,
            tm_val_auc: tm,
            loo_val_auc: None,
            oracle_val_auc: None,
        })
        .collect();
    let mut failure = main.failure.clone();
    if let Some((curve, fold_failure)) = &loo {
        for c in &mut checkpoints {
            c.loo_val_auc = curve.iter().find(|(s, _)| *s == c.step).map(|&(_, v)| v);
        }
        if failure.is_none() {
            failure = fold_failure.as_ref().map(|f| format!("leave-one-out fold failed at {f}"));
        }
    }
    if protocol == Protocol::Oracle && failure.is_none() {
        log.record(test, Split::Val, Phase::Selection)?;
        let v = val_auc(&main.model, &datasets[test])?;
        if let Some(last) = checkpoints.last_mut() {
            last.oracle_val_auc = Some(v);
        }
    }

    let final_test_auc = if failure.is_none() {
        log.record(test, Split::Test, Phase::FinalEval)?;
        let (x, y) = datasets[test].subset(Split::Test);
        let scores = main.model.scores(&x)?;
        if scores.iter().all(|s| s.is_finite()) {
            Some(auc(&scores, &y)?)
        } else {
            failure = Some("non-finite test scores".into());
            None
        }
    } else {
        None
    };

    let setting = setting_name(datasets[test].mode).to_string();
    let record = RunRecord {
        run_id: run_id(&setting, spec.algorithm, protocol, test, spec.trial, spec.seed_index),
        setting,
        algorithm: spec.algorithm,
        family,
        protocol,
        seed: spec.seed_index,
        trial: spec.trial,
        test_modality: test,
        hparams: spec.hparams.clone(),
        checkpoints,
        final_test_auc,
        selected: false,
        wall_ms: None,
        notes,
        failure,
    };
    Ok(RunOutput {
        record,
        model: main.model,
        log,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}
