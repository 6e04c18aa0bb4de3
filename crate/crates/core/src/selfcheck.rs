//! Finite-difference self-checks of the autodiff engine: every tape
//! operation and every composite detector-side training loss, evaluated at
//! random points away from ReLU kinks and quantile ties.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    default_or_sample_hparams, dg_loss, get, mixup_loss, one_hot, Algorithm, Batch, Discriminator, HParamMode,
};
use crate::detector::{detector_forward, init_detector, DetectorParams};
use crate::error::{Error, Result};
use crate::numerics::{finite_diff_check, Tape, Tensor, Var};
use crate::rng::{self, Rng};

/// Central-difference step.
pub const STEP: f64 = 1e-6;
/// Pre-activations and risk gaps closer than this to a kink are resampled.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_RESAMPLES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub points: usize,
    /// Worst `|analytic - numeric| / max(1, |numeric|)` over points and coordinates.
    pub max_rel_error: f64,
}

fn normal(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

/// Normal entries pushed at least `KINK_MARGIN` away from zero.
fn away_from_zero(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    normal(r, rows, cols).map(|v| if v.abs() < KINK_MARGIN { v.signum() * 0.5 + v } else { v })
}

type Build = fn(&mut Tape, &[Var], &[usize]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    /// Shapes of the differentiable inputs.
    shapes: &'static [(usize, usize)],
    build: Build,
}

const OP_CASES: &[OpCase] = &[
    OpCase { name: "matmul", shapes: &[(3, 4), (4, 2)], build: |t, v, _| t.matmul(v[0], v[1]) },
    OpCase { name: "add_row", shapes: &[(3, 4), (1, 4)], build: |t, v, _| t.add_row(v[0], v[1]) },
    OpCase { name: "sub_row", shapes: &[(3, 4), (1, 4)], build: |t, v, _| t.sub_row(v[0], v[1]) },
    OpCase { name: "add", shapes: &[(3, 4), (3, 4)], build: |t, v, _| t.add(v[0], v[1]) },
    OpCase { name: "sub", shapes: &[(3, 4), (3, 4)], build: |t, v, _| t.sub(v[0], v[1]) },
    OpCase { name: "mul", shapes: &[(3, 4), (3, 4)], build: |t, v, _| t.mul(v[0], v[1]) },
    OpCase { name: "scale", shapes: &[(3, 4)], build: |t, v, _| t.scale(v[0], -1.7) },
    OpCase { name: "mul_scalar", shapes: &[(3, 4), (1, 1)], build: |t, v, _| t.mul_scalar(v[0], v[1]) },
    OpCase { name: "relu", shapes: &[(3, 4)], build: |t, v, _| t.relu(v[0]) },
    OpCase { name: "square", shapes: &[(3, 4)], build: |t, v, _| t.square(v[0]) },
    OpCase { name: "sum", shapes: &[(3, 4)], build: |t, v, _| t.sum(v[0]) },
    OpCase { name: "mean", shapes: &[(3, 4)], build: |t, v, _| t.mean(v[0]) },
    OpCase { name: "mean_rows", shapes: &[(3, 4)], build: |t, v, _| t.mean_rows(v[0]) },
    OpCase { name: "transpose", shapes: &[(3, 4)], build: |t, v, _| t.transpose(v[0]) },
    OpCase { name: "softmax", shapes: &[(3, 4)], build: |t, v, _| t.softmax(v[0]) },
    OpCase { name: "cross_entropy", shapes: &[(5, 3)], build: |t, v, y| t.cross_entropy(v[0], y) },
    OpCase {
        name: "weighted_cross_entropy",
        shapes: &[(5, 3)],
        build: |t, v, y| t.weighted_cross_entropy(v[0], y, &[0.2, 1.0, 0.7, 1.5, 0.1]),
    },
    OpCase { name: "irm_scale_grad", shapes: &[(5, 3)], build: |t, v, y| t.irm_scale_grad(v[0], y) },
];

fn split_flat(flat: &[f64], shapes: &[(usize, usize)]) -> Vec<Tensor> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let t = Tensor::new(r, c, flat[offset..offset + r * c].to_vec()).expect("sized");
            offset += r * c;
            t
        })
        .collect()
}

fn check_op(case: &OpCase, points: usize, seed: u64) -> Result<GradCheck> {
    let mut worst = 0.0f64;
    for p in 0..points {
        let mut r = rng::stream(&[seed, rng::tag("op"), rng::tag(case.name), p as u64]);
        let inputs: Vec<f64> = case
            .shapes
            .iter()
            .flat_map(|&(rows, cols)| away_from_zero(&mut r, rows, cols).into_data())
            .collect();
        let targets: Vec<usize> = (0..5).map(|_| r.random_range(0..3)).collect();
        // a random linear read-out turns any output shape into a scalar
        let probe = {
            let mut t = Tape::new();
            let v: Vec<Var> = split_flat(&inputs, case.shapes)
                .into_iter()
                .map(|x| t.leaf(x))
                .collect::<Result<_>>()?;
            let out = (case.build)(&mut t, &v, &targets)?;
            let shape = t.value(out).shape();
            normal(&mut r, shape.0, shape.1)
        };
        let f = |flat: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut t = Tape::new();
            let v: Vec<Var> = split_flat(flat, case.shapes)
                .into_iter()
                .map(|x| t.leaf(x))
                .collect::<Result<_>>()?;
            let out = (case.build)(&mut t, &v, &targets)?;
            let w = t.leaf(probe.clone())?;
            let prod = t.mul(out, w)?;
            let loss = t.sum(prod)?;
            let value = t.value(loss).item();
            let grads = t.backward(loss)?;
            Ok((value, v.iter().flat_map(|&x| grads.get(x).into_data()).collect()))
        };
        worst = worst.max(finite_diff_check(f, &inputs, STEP)?);
    }
    Ok(GradCheck {
        name: case.name.to_string(),
        points,
        max_rel_error: worst,
    })
}

/// Every differentiable tape operation at `points` random points each.
pub fn op_gradient_checks(points: usize, seed: u64) -> Result<Vec<GradCheck>> {
    OP_CASES.iter().map(|c| check_op(c, points, seed)).collect()
}

/// Composite losses checked by [`loss_gradient_checks`].
pub const LOSS_CASES: [Algorithm; 7] = [
    Algorithm::Erm,
    Algorithm::Irm,
    Algorithm::Mixup,
    Algorithm::IbErm,
    Algorithm::Eqrm,
    Algorithm::Urm,
    Algorithm::Cdann,
];

const DIM: usize = 16;
const ROWS: usize = 8;
const ENVS: usize = 3;

fn min_abs_preactivation(det: &DetectorParams, x: &Tensor) -> Result<f64> {
    let mut h = x.clone();
    let mut m = f64::INFINITY;
    for layer in &det.live.layers {
        let z = h.matmul(&layer.weight)?.zip_map(
            &Tensor::new(h.rows(), layer.bias.cols(), layer.bias.data().repeat(h.rows()))?,
            |a, b| a + b,
        )?;
        m = m.min(z.data().iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs())));
        h = z.map(|v| v.max(0.0));
    }
    Ok(m)
}

fn disc_min_preactivation(disc: &Discriminator, det: &DetectorParams, batches: &[Batch]) -> Result<f64> {
    let mut m = f64::INFINITY;
    for b in batches {
        let f = detector_forward(det, &b.x)?.forensic_features;
        let classes: Vec<usize> = b.y.iter().map(|&y| y as usize).collect();
        let z = f
            .matmul(&disc.w_features)?
            .zip_map(&one_hot(&classes, 2).matmul(&disc.w_label)?, |a, c| a + c)?;
        let bias = Tensor::new(z.rows(), z.cols(), disc.b1.data().repeat(z.rows()))?;
        let z = z.zip_map(&bias, |a, c| a + c)?;
        m = m.min(z.data().iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs())));
    }
    Ok(m)
}

struct LossPoint {
    detector: DetectorParams,
    batches: Vec<Batch>,
    mix: Vec<(usize, usize, f64)>,
    disc: Discriminator,
}

fn sample_point(r: &mut Rng, seed: u64) -> Result<LossPoint> {
    let mut detector = init_detector(DIM, seed)?;
    // nonzero biases so the check also exercises them
    for t in detector.tensors_mut() {
        if t.rows() == 1 {
            *t = normal(r, 1, t.cols()).scale(0.1);
        }
    }
    let batches = (0..ENVS)
        .map(|_| Batch {
            x: normal(r, ROWS, DIM),
            y: (0..ROWS).map(|i| (i % 2) as u8).collect(),
        })
        .collect();
    let mix = (0..ENVS).map(|i| (i, (i + 1) % ENVS, r.random_range(0.05..0.95))).collect();
    let mut disc = Discriminator::new(DIM, ENVS, seed);
    disc.b1 = normal(r, 1, DIM).scale(0.1);
    Ok(LossPoint {
        detector,
        batches,
        mix,
        disc,
    })
}

fn kink_free(point: &LossPoint, algorithm: Algorithm) -> Result<bool> {
    let inputs: Vec<Tensor> = if algorithm == Algorithm::Mixup {
        point
            .mix
            .iter()
            .map(|&(a, b, lam)| point.batches[a].x.zip_map(&point.batches[b].x, |u, v| lam * u + (1.0 - lam) * v))
            .collect::<Result<_>>()?
    } else {
        point.batches.iter().map(|b| b.x.clone()).collect()
    };
    for x in &inputs {
        if min_abs_preactivation(&point.detector, x)? < KINK_MARGIN {
            return Ok(false);
        }
    }
    match algorithm {
        Algorithm::Cdann => Ok(disc_min_preactivation(&point.disc, &point.detector, &point.batches)? >= KINK_MARGIN),
        Algorithm::Eqrm => {
            let mut risks = Vec::new();
            for b in &point.batches {
                let mut t = Tape::new();
                let logits = t.leaf(detector_forward(&point.detector, &b.x)?.logits)?;
                let ce = crate::numerics::softmax_cross_entropy(&mut t, logits, &b.y)?;
                risks.push(t.value(ce).item());
            }
            risks.sort_by(f64::total_cmp);
            Ok(risks.windows(2).all(|w| w[1] - w[0] >= KINK_MARGIN))
        }
        _ => Ok(true),
    }
}

fn loss_value_and_grad(
    point: &LossPoint,
    algorithm: Algorithm,
    step: usize,
    h: &crate::algorithms::HParams,
    flat: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut det = point.detector.clone();
    det.load_flat(flat)?;
    let mut tape = Tape::new();
    let leaves = det.leaves(&mut tape)?;
    let loss = if algorithm == Algorithm::Mixup {
        mixup_loss(&mut tape, &det, &leaves, &point.batches, &point.mix)?
    } else {
        dg_loss(&mut tape, &det, &leaves, algorithm, h, step, &point.batches, Some(&point.disc))?
    };
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, leaves.iter().flat_map(|&v| grads.get(v).into_data()).collect()))
}

/// Full detector-side objective of each DG algorithm, with its penalty
/// switched on (past any annealing or burn-in), at `points` random points.
pub fn loss_gradient_checks(points: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for algorithm in LOSS_CASES {
        let mut r = rng::stream(&[seed, rng::tag("loss"), rng::tag(algorithm.name())]);
        let mut h = default_or_sample_hparams(algorithm, HParamMode::Default, &mut r)?;
        let step = match algorithm {
            Algorithm::Irm | Algorithm::IbErm => get(&h, "penalty_anneal_iters")?.round() as usize,
            Algorithm::Eqrm => get(&h, "burnin_iters")?.round() as usize,
            _ => 0,
        };
        if algorithm == Algorithm::Cdann {
            // the default weight is tiny; a unit weight makes the adversarial term visible
            h.insert("lambda".into(), 1.0);
        }
        let mut worst = 0.0f64;
        for p in 0..points {
            let mut tries = 0;
            let point = loop {
                let s = rng::derive_seed(&[seed, rng::tag(algorithm.name()), p as u64, tries as u64]);
                let point = sample_point(&mut rng::stream(&[s]), s)?;
                if kink_free(&point, algorithm)? {
                    break point;
                }
                tries += 1;
                if tries == MAX_RESAMPLES {
                    return Err(Error::Numeric(format!("no kink-free point found for {algorithm}")));
                }
            };
            let flat = point.detector.flatten();
            let f = |x: &[f64]| loss_value_and_grad(&point, algorithm, step, &h, x);
            worst = worst.max(finite_diff_check(f, &flat, STEP)?);
        }
        out.push(GradCheck {
            name: algorithm.name().to_string(),
            points,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
