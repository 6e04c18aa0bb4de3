//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the node
//! list is already in topological order and `backward` is a single reverse
//! sweep. A tape can be differentiated once; a second `backward` call is
//! rejected so that stale accumulators are never mistaken for fresh ones.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    MeanRows(Var),
    Transpose(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Option<Vec<f64>>,
    },
    IrmScaleGrad {
        logits: Var,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Softmax probabilities for the loss nodes.
    cache: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    differentiated: bool,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros of the matching shape when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn is_reachable(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut p = logits.clone();
    let cols = p.cols();
    for row in p.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    p
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, cache: Option<Tensor>, what: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        self.nodes.push(Node { op, value, cache });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Inputs and parameters enter the tape as leaves.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value, None, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v, None, "matmul")
    }

    /// `a + row` with a 1 x cols row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.broadcast_row(a, row, 1.0)?;
        self.push(Op::AddRow(a, row), v, None, "add_row")
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.broadcast_row(a, row, -1.0)?;
        self.push(Op::SubRow(a, row), v, None, "sub_row")
    }

    fn broadcast_row(&self, a: Var, row: Var, sign: f64) -> Result<Tensor> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Dimension(format!(
                "row broadcast of {:?} onto {:?}",
                rv.shape(),
                av.shape()
            )));
        }
        let mut out = av.clone();
        let cols = out.cols();
        for r in out.data_mut().chunks_mut(cols) {
            for (o, b) in r.iter_mut().zip(rv.data()) {
                *o += sign * b;
            }
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), v, None, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, None, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, None, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v, None, "scale")
    }

    /// `a * s` where `s` is a 1x1 node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::Dimension(format!("scalar operand has shape {:?}", sv.shape())));
        }
        let v = self.value(a).scale(sv.item());
        self.push(Op::MulScalar(a, s), v, None, "mul_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v, None, "relu")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v, None, "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v, None, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column means, 1 x cols.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).col_means();
        self.push(Op::MeanRows(a), v, None, "mean_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, None, "transpose")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = softmax_rows(self.value(a));
        self.push(Op::Softmax(a), v, None, "softmax")
    }

    /// Mean over rows of `-log softmax(logits)[target]`, for any class count.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, targets, None)
    }

    /// Cross-entropy with per-row weights: `sum_i w_i * ce_i / n`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        if weights.len() != targets.len() {
            return Err(Error::Dimension("one weight per row required".into()));
        }
        self.cross_entropy_impl(logits, targets, Some(weights.to_vec()))
    }

    fn cross_entropy_impl(&mut self, logits: Var, targets: &[usize], weights: Option<Vec<f64>>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::Dimension(format!(
                "{} logit rows for {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::Input(format!("class {bad} outside 0..{}", lv.cols())));
        }
        let cols = lv.cols();
        let n = lv.rows().max(1) as f64;
        let mut total = 0.0;
        for (i, row) in lv.data().chunks(cols).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let w = weights.as_ref().map_or(1.0, |w| w[i]);
            total += w * (lse - row[targets[i]]);
        }
        let probs = softmax_rows(lv);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
            },
            Tensor::scalar(total / n),
            Some(probs),
            "cross_entropy",
        )
    }

    /// Derivative of `cross_entropy(w * logits)` with respect to a dummy scalar
    /// `w`, evaluated at `w = 1`, as a differentiable 1x1 node.
    ///
    /// In closed form this is `mean_i sum_c (p_ic - onehot_ic) * l_ic`, so its
    /// gradient with respect to the logits needs only first-order machinery.
    pub fn irm_scale_grad(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::Dimension("one target per logit row required".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::Input(format!("class {bad} outside 0..{}", lv.cols())));
        }
        let probs = softmax_rows(lv);
        let cols = lv.cols();
        let n = lv.rows().max(1) as f64;
        let mut g = 0.0;
        for (i, (lrow, prow)) in lv.data().chunks(cols).zip(probs.data().chunks(cols)).enumerate() {
            for c in 0..cols {
                let y = if targets[i] == c { 1.0 } else { 0.0 };
                g += (prow[c] - y) * lrow[c];
            }
        }
        self.push(
            Op::IrmScaleGrad {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::scalar(g / n),
            Some(probs),
            "irm_scale_grad",
        )
    }

    /// Reverse sweep from a scalar `loss`. A tape may be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.differentiated {
            return Err(Error::Contract("backward already run on this tape".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.differentiated = true;
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                // Only leaf gradients are kept; interior ones are consumed.
                Op::Leaf => grads[idx] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(&self.nodes[b.0].value)?;
                    let gb = self.nodes[a.0].value.t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddRow(a, r) => {
                    accumulate(&mut grads, *r, g.col_sums())?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::SubRow(a, r) => {
                    accumulate(&mut grads, *r, g.col_sums().scale(-1.0))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone())?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&self.nodes[b.0].value, |x, y| x * y)?;
                    let gb = g.zip_map(&self.nodes[a.0].value, |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::MulScalar(a, s) => {
                    let sv = self.nodes[s.0].value.item();
                    let av = &self.nodes[a.0].value;
                    let gs: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    accumulate(&mut grads, *s, Tensor::scalar(gs))?;
                    accumulate(&mut grads, *a, g.scale(sv))?;
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(&self.nodes[a.0].value, |x, y| if y > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Square(a) => {
                    let ga = g.zip_map(&self.nodes[a.0].value, |x, y| 2.0 * x * y)?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sum(a) => {
                    let (r, c) = shapes[a.0];
                    accumulate(&mut grads, *a, Tensor::filled(r, c, g.item()))?;
                }
                Op::MeanRows(a) => {
                    let (r, c) = shapes[a.0];
                    let mut ga = Tensor::zeros(r, c);
                    let inv = 1.0 / r.max(1) as f64;
                    for row in ga.data_mut().chunks_mut(c) {
                        for (o, v) in row.iter_mut().zip(g.data()) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose())?,
                Op::Softmax(a) => {
                    let p = &node.value;
                    let cols = p.cols();
                    let mut ga = Tensor::zeros(p.rows(), cols);
                    for ((out, prow), grow) in ga
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(p.data().chunks(cols))
                        .zip(g.data().chunks(cols))
                    {
                        let dot: f64 = prow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        for c in 0..cols {
                            out[c] = prow[c] * (grow[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                } => {
                    let probs = node.cache.as_ref().expect("cross-entropy caches probabilities");
                    let cols = probs.cols();
                    let n = probs.rows().max(1) as f64;
                    let scale = g.item() / n;
                    let mut gl = probs.clone();
                    for (i, row) in gl.data_mut().chunks_mut(cols).enumerate() {
                        row[targets[i]] -= 1.0;
                        let w = weights.as_ref().map_or(1.0, |w| w[i]);
                        row.iter_mut().for_each(|v| *v *= scale * w);
                    }
                    accumulate(&mut grads, *logits, gl)?;
                }
                Op::IrmScaleGrad { logits, targets } => {
                    let probs = node.cache.as_ref().expect("irm node caches probabilities");
                    let lv = &self.nodes[logits.0].value;
                    let cols = probs.cols();
                    let scale = g.item() / probs.rows().max(1) as f64;
                    let mut gl = Tensor::zeros(probs.rows(), cols);
                    for (i, ((out, prow), lrow)) in gl
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(probs.data().chunks(cols))
                        .zip(lv.data().chunks(cols))
                        .enumerate()
                    {
                        let expected: f64 = prow.iter().zip(lrow).map(|(p, l)| p * l).sum();
                        for c in 0..cols {
                            let y = if targets[i] == c { 1.0 } else { 0.0 };
                            out[c] = scale * ((prow[c] - y) + prow[c] * (lrow[c] - expected));
                        }
                    }
                    accumulate(&mut grads, *logits, gl)?;
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Binary softmax cross-entropy with input validation of the two-class contract.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    if tape.value(logits).cols() != 2 {
        return Err(Error::Dimension(format!(
            "binary cross-entropy needs 2 logit columns, got {}",
            tape.value(logits).cols()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Input(format!("label {bad} is not binary")));
    }
    let targets: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    tape.cross_entropy(logits, &targets)
}
