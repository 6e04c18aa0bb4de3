//! The shared forgery detector: a symmetric-bottleneck ReLU MLP
//! (`D -> D/2 -> D/4 -> D/2 -> D`) followed by a linear two-class head.

use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_in x fan_out`
    pub weight: Tensor,
    /// `1 x fan_out`
    pub bias: Tensor,
}

impl Linear {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(fan_in, fan_out, data).expect("sized"),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.matmul(&self.weight)?;
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Ok(out)
    }
}

/// Hidden layers and head; the unit the EMA shadow copies.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub layers: Vec<Linear>,
    pub head: Linear,
}

impl Weights {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub input_dim: usize,
    pub live: Weights,
    pub ema: Option<Weights>,
}

/// Output of a detector pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub logits: Tensor,
    /// Post-activation output of the last hidden layer (the batch itself for a
    /// bare linear head); this is what the head reads.
    pub forensic_features: Tensor,
    pub hidden_activations: Vec<Tensor>,
}

/// Handles to a detector forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub logits: Var,
    pub features: Var,
    pub hidden: Vec<Var>,
}

pub fn layer_dims(input_dim: usize) -> [usize; 5] {
    [input_dim, input_dim / 2, input_dim / 4, input_dim / 2, input_dim]
}

pub fn init_detector(input_dim: usize, seed: u64) -> Result<DetectorParams> {
    if input_dim < 8 || !input_dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "detector input dimension must be a multiple of 4 and at least 8, got {input_dim}"
        )));
    }
    let mut r = rng::stream(&[rng::tag("detector-init"), seed]);
    let dims = layer_dims(input_dim);
    let layers = dims
        .windows(2)
        .map(|w| Linear::glorot(w[0], w[1], &mut r))
        .collect();
    let head = Linear::glorot(input_dim, 2, &mut r);
    Ok(DetectorParams {
        input_dim,
        live: Weights { layers, head },
        ema: None,
    })
}

/// A bare linear two-class head on the input features (no hidden layers).
pub fn init_linear_head(input_dim: usize, seed: u64) -> Result<DetectorParams> {
    if input_dim == 0 {
        return Err(Error::Config("input dimension must be positive".into()));
    }
    let mut r = rng::stream(&[rng::tag("linear-head-init"), seed]);
    Ok(DetectorParams {
        input_dim,
        live: Weights {
            layers: Vec::new(),
            head: Linear::glorot(input_dim, 2, &mut r),
        },
        ema: None,
    })
}

impl DetectorParams {
    pub fn num_hidden(&self) -> usize {
        self.live.layers.len()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.live.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.live.tensors_mut()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Registers the live parameters as tape leaves, in `tensors()` order.
    pub fn leaves(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// `shadow <- decay * shadow + (1 - decay) * live`; the first call copies
    /// the live weights.
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        match &mut self.ema {
            None => self.ema = Some(self.live.clone()),
            Some(shadow) => {
                for (s, l) in shadow.tensors_mut().into_iter().zip(self.live.tensors()) {
                    for (sv, lv) in s.data_mut().iter_mut().zip(l.data()) {
                        *sv = decay * *sv + (1.0 - decay) * lv;
                    }
                }
            }
        }
        Ok(())
    }

    fn weights(&self, use_ema: bool) -> Result<&Weights> {
        if use_ema {
            self.ema
                .as_ref()
                .ok_or_else(|| Error::Contract("EMA weights requested before any EMA update".into()))
        } else {
            Ok(&self.live)
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.cols() != self.input_dim {
            return Err(Error::Input(format!(
                "batch has {} columns, detector expects {}",
                batch.cols(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

fn forward_weights(weights: &Weights, batch: &Tensor) -> Result<ForwardResult> {
    let mut hidden = Vec::with_capacity(weights.layers.len());
    let mut h = batch.clone();
    for layer in &weights.layers {
        h = layer.apply(&h)?.map(|v| if v > 0.0 { v } else { 0.0 });
        hidden.push(h.clone());
    }
    let logits = weights.head.apply(&h)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("detector forward".into()));
    }
    Ok(ForwardResult {
        logits,
        forensic_features: h,
        hidden_activations: hidden,
    })
}

pub fn detector_forward(params: &DetectorParams, batch: &Tensor) -> Result<ForwardResult> {
    params.check_batch(batch)?;
    forward_weights(&params.live, batch)
}

/// Forward pass through the live weights, or through the EMA shadow when
/// `use_ema` is set (the shadow must exist).
pub fn detector_forward_with(params: &DetectorParams, batch: &Tensor, use_ema: bool) -> Result<ForwardResult> {
    params.check_batch(batch)?;
    forward_weights(params.weights(use_ema)?, batch)
}

/// Same computation as [`detector_forward`], recorded on a tape. `leaves`
/// must come from [`DetectorParams::leaves`].
pub fn forward_on_tape(
    params: &DetectorParams,
    tape: &mut Tape,
    leaves: &[Var],
    input: Var,
) -> Result<TapeForward> {
    if tape.value(input).cols() != params.input_dim {
        return Err(Error::Input(format!(
            "batch has {} columns, detector expects {}",
            tape.value(input).cols(),
            params.input_dim
        )));
    }
    let mut hidden = Vec::with_capacity(params.num_hidden());
    let mut h = input;
    for l in 0..params.num_hidden() {
        let z = tape.matmul(h, leaves[2 * l])?;
        let z = tape.add_row(z, leaves[2 * l + 1])?;
        h = tape.relu(z)?;
        hidden.push(h);
    }
    let k = 2 * params.num_hidden();
    let z = tape.matmul(h, leaves[k])?;
    let logits = tape.add_row(z, leaves[k + 1])?;
    Ok(TapeForward {
        logits,
        features: h,
        hidden,
    })
}

/// Probability of class 1 (fake) from two-class logits.
pub fn fake_probabilities(logits: &Tensor) -> Vec<f64> {
    logits
        .data()
        .chunks(2)
        .map(|r| 1.0 / (1.0 + (r[0] - r[1]).exp()))
        .collect()
}

/// P(fake) per row. With `use_ema` the EMA shadow scores the batch (it must exist).
pub fn predict_scores(params: &DetectorParams, batch: &Tensor, use_ema: bool) -> Result<Vec<f64>> {
    params.check_batch(batch)?;
    Ok(fake_probabilities(&forward_weights(params.weights(use_ema)?, batch)?.logits))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CheckpointHeader {
    dims: Vec<usize>,
    layer_order: Vec<String>,
    has_ema: bool,
}

/// Writes a JSON header line followed by the parameters as little-endian
/// `f64`s (live weights, then the EMA shadow when present).
pub fn write_checkpoint<W: Write>(params: &DetectorParams, mut out: W) -> Result<()> {
    let mut dims = vec![params.input_dim];
    dims.extend(params.live.layers.iter().map(|l| l.weight.cols()));
    dims.push(2);
    let mut order = Vec::new();
    for i in 1..=params.num_hidden() {
        order.push(format!("w{i}"));
        order.push(format!("b{i}"));
    }
    order.push("wh".into());
    order.push("bh".into());
    let header = CheckpointHeader {
        dims,
        layer_order: order,
        has_ema: params.ema.is_some(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    let mut push = |w: &Weights| {
        for t in w.tensors() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    };
    push(&params.live);
    if let Some(ema) = &params.ema {
        push(ema);
    }
    out.write_all(&bytes).map_err(|e| Error::io("writing checkpoint", e))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<DetectorParams> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading checkpoint", e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Input("checkpoint header line missing".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    let dims = &header.dims;
    if dims.len() < 2 || *dims.last().unwrap() != 2 {
        return Err(Error::Input(format!("bad checkpoint dims {dims:?}")));
    }
    let shape_of = |fan_in: usize, fan_out: usize| Linear {
        weight: Tensor::zeros(fan_in, fan_out),
        bias: Tensor::zeros(1, fan_out),
    };
    let hidden = dims.len() - 2;
    let template = Weights {
        layers: (0..hidden).map(|i| shape_of(dims[i], dims[i + 1])).collect(),
        head: shape_of(dims[hidden], 2),
    };
    let mut params = DetectorParams {
        input_dim: dims[0],
        live: template.clone(),
        ema: header.has_ema.then(|| template.clone()),
    };
    let n = params.num_params();
    let payload = &bytes[nl + 1..];
    let expected = n * 8 * if header.has_ema { 2 } else { 1 };
    if payload.len() != expected {
        return Err(Error::Input(format!(
            "checkpoint payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    params.load_flat(&values[..n])?;
    if let Some(ema) = &mut params.ema {
        let mut offset = n;
        for t in ema.tensors_mut() {
            let len = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, softmax_cross_entropy};

    fn batch(n: usize, d: usize, salt: f64) -> Tensor {
        Tensor::new(n, d, (0..n * d).map(|i| ((i as f64 + salt) * 0.731).sin()).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let a = init_detector(64, 7).unwrap();
        assert_eq!(a, init_detector(64, 7).unwrap());
        assert_ne!(a, init_detector(64, 8).unwrap());
        let shapes: Vec<_> = a.tensors().iter().map(|t| t.shape()).collect();
        assert_eq!(
            shapes,
            vec![(64, 32), (1, 32), (32, 16), (1, 16), (16, 32), (1, 32), (32, 64), (1, 64), (64, 2), (1, 2)]
        );
        assert!(a.live.layers.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
        let bound = (6.0f64 / 96.0).sqrt();
        assert!(a.live.layers[0].weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn full_scale_chain() {
        let p = init_detector(1024, 0).unwrap();
        let widths: Vec<_> = p.live.layers.iter().map(|l| l.weight.shape()).collect();
        assert_eq!(widths, vec![(1024, 512), (512, 256), (256, 512), (512, 1024)]);
    }

    #[test]
    fn rejects_bad_input_dim() {
        assert!(matches!(init_detector(66, 0), Err(Error::Config(_))));
        assert!(init_detector(4, 0).is_err());
    }

    #[test]
    fn zero_batch_gives_zero_logits_at_init() {
        let p = init_detector(16, 1).unwrap();
        let out = detector_forward(&p, &Tensor::zeros(3, 16)).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(predict_scores(&p, &Tensor::zeros(2, 16), false).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let p = init_detector(16, 3).unwrap();
        let x = batch(4, 16, 0.3);
        let out = detector_forward(&p, &x).unwrap();
        for r in 0..4 {
            let mut h: Vec<f64> = x.row(r).to_vec();
            for layer in &p.live.layers {
                let mut next = vec![0.0; layer.weight.cols()];
                for (j, n) in next.iter_mut().enumerate() {
                    let mut acc = layer.bias.get(0, j);
                    for (i, hv) in h.iter().enumerate() {
                        acc += hv * layer.weight.get(i, j);
                    }
                    *n = acc.max(0.0);
                }
                h = next;
            }
            for c in 0..2 {
                let mut acc = p.live.head.bias.get(0, c);
                for (i, hv) in h.iter().enumerate() {
                    acc += hv * p.live.head.weight.get(i, c);
                }
                assert!((acc - out.logits.get(r, c)).abs() < 1e-12);
            }
        }
        assert!(out.forensic_features.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn duplicated_rows_and_permutations() {
        let p = init_detector(16, 4).unwrap();
        let x = batch(3, 16, 1.0);
        let dup = x.select_rows(&[1, 1]);
        let out = detector_forward(&p, &dup).unwrap();
        assert_eq!(out.logits.row(0), out.logits.row(1));
        let base = detector_forward(&p, &x).unwrap();
        let perm = detector_forward(&p, &x.select_rows(&[2, 0, 1])).unwrap();
        assert_eq!(perm.logits, base.logits.select_rows(&[2, 0, 1]));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let p = init_detector(16, 5).unwrap();
        let x = batch(5, 16, 2.0);
        let mut tape = Tape::new();
        let leaves = p.leaves(&mut tape).unwrap();
        let input = tape.leaf(x.clone()).unwrap();
        let f = forward_on_tape(&p, &mut tape, &leaves, input).unwrap();
        assert_eq!(tape.value(f.logits), &detector_forward(&p, &x).unwrap().logits);
    }

    #[test]
    fn loss_gradient_passes_finite_differences() {
        let mut p = init_detector(8, 9).unwrap();
        // Nonzero biases keep pre-activations away from exact kinks.
        for (i, t) in p.tensors_mut().into_iter().enumerate() {
            if t.rows() == 1 {
                for (j, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.05 * ((i * 13 + j) as f64).sin();
                }
            }
        }
        let x = batch(6, 8, 0.5);
        let labels = [0u8, 1, 1, 0, 1, 0];
        let eval = |flat: &[f64]| {
            let mut q = p.clone();
            q.load_flat(flat)?;
            let mut tape = Tape::new();
            let leaves = q.leaves(&mut tape)?;
            let input = tape.leaf(x.clone())?;
            let f = forward_on_tape(&q, &mut tape, &leaves, input)?;
            let loss = softmax_cross_entropy(&mut tape, f.logits, &labels)?;
            let value = tape.value(loss).item();
            let g = tape.backward(loss)?;
            let grad = leaves.iter().flat_map(|&v| g.get(v).into_data()).collect();
            Ok((value, grad))
        };
        let err = finite_diff_check(eval, &p.flatten(), 1e-6).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn predict_scores_reference_value() {
        let logits = Tensor::from_rows(&[vec![10.0, -10.0]]).unwrap();
        let s = fake_probabilities(&logits)[0];
        let direct = (-10.0f64).exp() / ((10.0f64).exp() + (-10.0f64).exp());
        assert!((s - direct).abs() < 1e-20);
        assert!((s - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn ema_recursion() {
        let mut p = init_linear_head(2, 0).unwrap();
        assert!(predict_scores(&p, &Tensor::zeros(1, 2), true).is_err());
        p.load_flat(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        p.ema_update(0.5).unwrap();
        assert_eq!(p.ema.as_ref().unwrap(), &p.live);
        // shadow 1 -> live values 3, 5, 9 with decay 0.5: 2, 3.5, 6.25
        let mut expected = 1.0;
        for live in [3.0, 5.0, 9.0] {
            p.load_flat(&[live; 6]).unwrap();
            p.ema_update(0.5).unwrap();
            expected = 0.5 * expected + 0.5 * live;
        }
        assert_eq!(expected, 6.25);
        assert_eq!(p.ema.as_ref().unwrap().head.weight.data(), &[6.25; 4]);
        p.ema_update(0.0).unwrap();
        assert_eq!(p.ema.as_ref().unwrap(), &p.live);
        assert!(matches!(p.ema_update(1.0), Err(Error::Config(_))));
        assert!(p.ema_update(-0.1).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let mut p = init_detector(16, 2).unwrap();
        p.ema_update(0.9).unwrap();
        let mut first = Vec::new();
        write_checkpoint(&p, &mut first).unwrap();
        let back = read_checkpoint(first.as_slice()).unwrap();
        assert_eq!(back, p);
        let mut second = Vec::new();
        write_checkpoint(&back, &mut second).unwrap();
        assert_eq!(first, second);
        assert!(read_checkpoint(&first[..first.len() - 1]).is_err());
    }
}
