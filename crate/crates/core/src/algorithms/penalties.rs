//! Regularizers and loss-assembly helpers of the domain-generalization and
//! multi-modal objectives. Tape versions take and return graph nodes so the
//! training loop can differentiate through them.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Adds scalar nodes left to right.
pub fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars
        .split_first()
        .ok_or_else(|| Error::Contract("sum of zero terms".into()))?;
    rest.iter().try_fold(first, |acc, &v| tape.add(acc, v))
}

/// IRM penalty: for each environment, the squared derivative of its
/// cross-entropy with respect to a dummy multiplier on the logits, taken at
/// one; summed over environments. Empty environments are skipped.
pub fn irm_penalty(tape: &mut Tape, envs: &[(Var, &[u8])]) -> Result<Var> {
    let mut terms = Vec::with_capacity(envs.len());
    for &(logits, labels) in envs {
        if labels.is_empty() {
            log::warn!("irm_penalty: skipping empty environment");
            continue;
        }
        let targets: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
        let g = tape.irm_scale_grad(logits, &targets)?;
        terms.push(tape.square(g)?);
    }
    if terms.is_empty() {
        return tape.leaf(Tensor::scalar(0.0));
    }
    sum_vars(tape, &terms)
}

/// Mean over coordinates of the (population) variance of a feature batch.
pub fn ib_penalty(tape: &mut Tape, features: Var) -> Result<Var> {
    if tape.value(features).rows() < 2 {
        log::warn!("ib_penalty: single-row batch has no variance");
    }
    let mean = tape.mean_rows(features)?;
    let centered = tape.sub_row(features, mean)?;
    let sq = tape.square(centered)?;
    tape.mean(sq)
}

/// Interpolation weights of the empirical `q`-quantile: the quantile equals
/// `sum_i w_i * risks[i]`. Position `(n - 1) q` is interpolated linearly
/// between the neighbouring order statistics.
pub fn quantile_weights(risks: &[f64], q: f64) -> Result<Vec<f64>> {
    if risks.is_empty() {
        return Err(Error::Contract("quantile of an empty risk set".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile {q} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..risks.len()).collect();
    order.sort_by(|&a, &b| risks[a].total_cmp(&risks[b]).then(a.cmp(&b)));
    let pos = (risks.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    let mut w = vec![0.0; risks.len()];
    w[order[lo]] += 1.0 - frac;
    w[order[hi]] += frac;
    Ok(w)
}

pub fn eqrm_quantile_risk(risks: &[f64], q: f64) -> Result<f64> {
    let w = quantile_weights(risks, q)?;
    Ok(w.iter().zip(risks).map(|(a, b)| a * b).sum())
}

/// Tape version of [`eqrm_quantile_risk`] over scalar risk nodes.
pub fn eqrm_quantile_node(tape: &mut Tape, risks: &[Var], q: f64) -> Result<Var> {
    let values: Vec<f64> = risks.iter().map(|&r| tape.value(r).item()).collect();
    let w = quantile_weights(&values, q)?;
    let mut terms = Vec::new();
    for (&r, &wi) in risks.iter().zip(&w) {
        if wi != 0.0 {
            terms.push(tape.scale(r, wi)?);
        }
    }
    sum_vars(tape, &terms)
}

/// Population variance of per-environment risks; zero for one environment.
pub fn urm_penalty(risks: &[f64]) -> f64 {
    if risks.len() < 2 {
        return 0.0;
    }
    let n = risks.len() as f64;
    let mean = risks.iter().sum::<f64>() / n;
    risks.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n
}

pub fn urm_penalty_node(tape: &mut Tape, risks: &[Var]) -> Result<Var> {
    if risks.len() < 2 {
        return tape.leaf(Tensor::scalar(0.0));
    }
    let n = risks.len() as f64;
    let total = sum_vars(tape, risks)?;
    let mean = tape.scale(total, 1.0 / n)?;
    let mut sq = Vec::with_capacity(risks.len());
    for &r in risks {
        let d = tape.sub(r, mean)?;
        sq.push(tape.square(d)?);
    }
    let s = sum_vars(tape, &sq)?;
    tape.scale(s, 1.0 / n)
}

/// Per-modality gradient multipliers from contribution scores: a modality
/// scoring above the mean of the others by ratio `rho > 1` is damped by
/// `1 - tanh(alpha (rho - 1))`; the rest keep 1.
pub fn ogm_coefficients(scores: &[f64], alpha: f64) -> Vec<f64> {
    let clamped: Vec<f64> = scores
        .iter()
        .map(|&s| {
            if s > 0.0 {
                s
            } else {
                log::warn!("ogm_coefficients: non-positive score {s} clamped to 1e-6");
                1e-6
            }
        })
        .collect();
    if clamped.len() < 2 {
        return vec![1.0; clamped.len()];
    }
    let total: f64 = clamped.iter().sum();
    clamped
        .iter()
        .map(|&s| {
            let others = (total - s) / (clamped.len() - 1) as f64;
            let rho = s / others;
            if rho > 1.0 {
                1.0 - (alpha * (rho - 1.0)).tanh()
            } else {
                1.0
            }
        })
        .collect()
}

/// `lambda * a + (1 - lambda) * b`, with the loss weights `(lambda, 1 - lambda)`
/// of the two label sets.
pub fn mixup_combine(a: &Tensor, b: &Tensor, lambda: f64) -> Result<(Tensor, (f64, f64))> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!("mixup of {:?} with {:?}", a.shape(), b.shape())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Input(format!("mixup weight {lambda} outside [0, 1]")));
    }
    Ok((a.zip_map(b, |x, y| lambda * x + (1.0 - lambda) * y)?, (lambda, 1.0 - lambda)))
}
