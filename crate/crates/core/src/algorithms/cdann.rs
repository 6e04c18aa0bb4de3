//! Class-conditional modality discriminator for CDANN.

use rand::Rng as _;

use super::optim::Adam;
use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;

/// Two-layer MLP over (features ⊕ one-hot class) producing modality logits.
/// The first layer keeps separate weights for the feature and label parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub w_features: Tensor,
    pub w_label: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Uniform Glorot init of a `rows x cols` block of a layer with the given fan-in.
fn glorot(r: &mut rng::Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = (6.0 / (fan_in + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| r.random_range(-bound..bound)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (i, &c) in labels.iter().enumerate() {
        t.set(i, c, 1.0);
    }
    t
}

/// Tape handles of one discriminator pass.
pub struct DiscPass {
    pub logits: Var,
    pre_activation: Var,
}

impl Discriminator {
    pub fn new(feature_dim: usize, num_envs: usize, seed: u64) -> Self {
        let hidden = feature_dim;
        let mut r = rng::stream(&[rng::tag("cdann-discriminator"), seed]);
        Self {
            w_features: glorot(&mut r, feature_dim, hidden, feature_dim + 2),
            w_label: glorot(&mut r, 2, hidden, feature_dim + 2),
            b1: Tensor::zeros(1, hidden),
            w2: glorot(&mut r, hidden, num_envs, hidden),
            b2: Tensor::zeros(1, num_envs),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_features,
            &mut self.w_label,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn leaves(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        [&self.w_features, &self.w_label, &self.b1, &self.w2, &self.b2]
            .into_iter()
            .map(|t| tape.leaf(t.clone()))
            .collect()
    }

    pub fn forward(tape: &mut Tape, leaves: &[Var], features: Var, label_onehot: Var) -> Result<DiscPass> {
        let a = tape.matmul(features, leaves[0])?;
        let b = tape.matmul(label_onehot, leaves[1])?;
        let s = tape.add(a, b)?;
        let pre = tape.add_row(s, leaves[2])?;
        let h = tape.relu(pre)?;
        let z = tape.matmul(h, leaves[3])?;
        let logits = tape.add_row(z, leaves[4])?;
        Ok(DiscPass {
            logits,
            pre_activation: pre,
        })
    }

    /// `mean_i ||d/d features_i CE_sum||²`, built from first-order nodes: the
    /// ReLU mask enters as a constant, so the result stays differentiable
    /// with respect to the discriminator weights.
    pub fn gradient_penalty(tape: &mut Tape, leaves: &[Var], pass: &DiscPass, env_onehot: Var) -> Result<Var> {
        let p = tape.softmax(pass.logits)?;
        let g_logits = tape.sub(p, env_onehot)?;
        let w2t = tape.transpose(leaves[3])?;
        let g_hidden = tape.matmul(g_logits, w2t)?;
        let mask = tape.value(pass.pre_activation).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let mask = tape.leaf(mask)?;
        let g_pre = tape.mul(g_hidden, mask)?;
        let wft = tape.transpose(leaves[0])?;
        let g_features = tape.matmul(g_pre, wft)?;
        let n = tape.value(g_features).rows().max(1) as f64;
        let sq = tape.square(g_features)?;
        let total = tape.sum(sq)?;
        tape.scale(total, 1.0 / n)
    }

    /// One update on the modality-classification loss plus the weighted
    /// input-gradient penalty. Returns the classification loss before the update.
    pub fn train_step(
        &mut self,
        opt: &mut Adam,
        features: &Tensor,
        class_labels: &[usize],
        env_labels: &[usize],
        grad_penalty: f64,
    ) -> Result<f64> {
        let num_envs = self.b2.cols();
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape)?;
        let f = tape.leaf(features.clone())?;
        let y = tape.leaf(one_hot(class_labels, 2))?;
        let pass = Self::forward(&mut tape, &leaves, f, y)?;
        let ce = tape.cross_entropy(pass.logits, env_labels)?;
        let ce_value = tape.value(ce).item();
        let loss = if grad_penalty > 0.0 {
            let e = tape.leaf(one_hot(env_labels, num_envs))?;
            let gp = Self::gradient_penalty(&mut tape, &leaves, &pass, e)?;
            let weighted = tape.scale(gp, grad_penalty)?;
            tape.add(ce, weighted)?
        } else {
            ce
        };
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = leaves.iter().map(|&v| grads.get(v)).collect();
        opt.step(&mut self.tensors_mut(), &g)?;
        Ok(ce_value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;

    fn flat(d: &Discriminator) -> Vec<f64> {
        let mut d = d.clone();
        d.tensors_mut().iter().flat_map(|t| t.data().to_vec()).collect()
    }

    fn load(d: &Discriminator, p: &[f64]) -> Discriminator {
        let mut d = d.clone();
        let mut off = 0;
        for t in d.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&p[off..off + n]);
            off += n;
        }
        d
    }

    #[test]
    fn separable_toy_case_is_learned_within_inner_steps() {
        let mut disc = Discriminator::new(16, 2, 1);
        let mut rows = Vec::new();
        let mut envs = Vec::new();
        for i in 0..16 {
            let env = i % 2;
            rows.push((0..16).map(|j| if j % 2 == env { 1.0 } else { 0.0 }).collect());
            envs.push(env);
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let classes: Vec<usize> = (0..16).map(|i| (i / 2) % 2).collect();
        let mut opt = Adam::new(0.1, 0.5, 0.0);
        let mut last = f64::INFINITY;
        for _ in 0..8 {
            last = disc.train_step(&mut opt, &x, &classes, &envs, 0.0).unwrap();
        }
        let mut tape = Tape::new();
        let leaves = disc.leaves(&mut tape).unwrap();
        let f = tape.leaf(x).unwrap();
        let y = tape.leaf(one_hot(&classes, 2)).unwrap();
        let pass = Discriminator::forward(&mut tape, &leaves, f, y).unwrap();
        let ce = tape.cross_entropy(pass.logits, &envs).unwrap();
        assert!(tape.value(ce).item() < 0.1, "{} (last step {last})", tape.value(ce).item());
    }

    #[test]
    fn penalty_vanishes_for_feature_independent_output() {
        let mut disc = Discriminator::new(3, 2, 0);
        disc.w_features = Tensor::zeros(3, 3);
        let mut tape = Tape::new();
        let leaves = disc.leaves(&mut tape).unwrap();
        let f = tape.leaf(Tensor::new(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap()).unwrap();
        let y = tape.leaf(one_hot(&[0, 1], 2)).unwrap();
        let e = tape.leaf(one_hot(&[1, 0], 2)).unwrap();
        let pass = Discriminator::forward(&mut tape, &leaves, f, y).unwrap();
        let gp = Discriminator::gradient_penalty(&mut tape, &leaves, &pass, e).unwrap();
        assert_eq!(tape.value(gp).item(), 0.0);
    }

    #[test]
    fn penalty_equals_squared_input_gradient() {
        let disc = Discriminator::new(3, 2, 4);
        let x = Tensor::new(2, 3, vec![0.3, -0.2, 0.8, 1.1, 0.4, -0.6]).unwrap();
        let (classes, envs) = ([1usize, 0], [0usize, 1]);
        let mut tape = Tape::new();
        let leaves = disc.leaves(&mut tape).unwrap();
        let f = tape.leaf(x.clone()).unwrap();
        let y = tape.leaf(one_hot(&classes, 2)).unwrap();
        let e = tape.leaf(one_hot(&envs, 2)).unwrap();
        let pass = Discriminator::forward(&mut tape, &leaves, f, y).unwrap();
        let gp = Discriminator::gradient_penalty(&mut tape, &leaves, &pass, e).unwrap();
        let gp = tape.value(gp).item();
        // input gradient of the summed CE through an independent tape
        let mut tape = Tape::new();
        let leaves = disc.leaves(&mut tape).unwrap();
        let f = tape.leaf(x).unwrap();
        let y = tape.leaf(one_hot(&classes, 2)).unwrap();
        let pass = Discriminator::forward(&mut tape, &leaves, f, y).unwrap();
        let ce = tape.cross_entropy(pass.logits, &envs).unwrap();
        let ce_sum = tape.scale(ce, 2.0).unwrap();
        let g = tape.backward(ce_sum).unwrap().get(f);
        let expected = g.data().iter().map(|v| v * v).sum::<f64>() / 2.0;
        assert!((gp - expected).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_passes_finite_differences() {
        let disc = Discriminator::new(3, 2, 9);
        let x = Tensor::new(3, 3, vec![0.3, -0.2, 0.8, 1.1, 0.4, -0.6, 0.05, 0.7, -0.3]).unwrap();
        let (classes, envs) = ([1usize, 0, 1], [0usize, 1, 1]);
        let f = |p: &[f64]| {
            let d = load(&disc, p);
            let mut tape = Tape::new();
            let leaves = d.leaves(&mut tape)?;
            let fv = tape.leaf(x.clone())?;
            let y = tape.leaf(one_hot(&classes, 2))?;
            let e = tape.leaf(one_hot(&envs, 2))?;
            let pass = Discriminator::forward(&mut tape, &leaves, fv, y)?;
            let ce = tape.cross_entropy(pass.logits, &envs)?;
            let gp = Discriminator::gradient_penalty(&mut tape, &leaves, &pass, e)?;
            let loss = tape.add(ce, gp)?;
            let v = tape.value(loss).item();
            let g = tape.backward(loss)?;
            Ok((v, leaves.iter().flat_map(|&l| g.get(l).into_data()).collect()))
        };
        let err = finite_diff_check(f, &flat(&disc), 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
