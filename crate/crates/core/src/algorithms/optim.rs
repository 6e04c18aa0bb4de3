use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj + self.weight_decay * *w;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let denom = (v[j] / bc2).sqrt() + self.eps;
                *w -= self.lr * (m[j] / bc1) / denom;
            }
        }
        Ok(())
    }

    /// Forgets the moment estimates and the step count.
    pub fn reset(&mut self) {
        self.m.clear();
        self.v.clear();
        self.t = 0;
    }
}

/// SGD with heavy-ball momentum: `buf = momentum * buf + g; w -= lr * buf`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buf: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            buf: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check(params, grads)?;
        if self.buf.is_empty() {
            self.buf = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let b = self.buf[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj + self.weight_decay * *w;
                b[j] = self.momentum * b[j] + gj;
                *w -= self.lr * b[j];
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        match self {
            Optimizer::Adam(o) => o.step(params, grads),
            Optimizer::Sgd(o) => o.step(params, grads),
        }
    }
}

fn check(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "{} parameter tensors, {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::row_vector(vec![1.0, -2.0]);
        let mut opt = Adam::new(0.1, 0.9, 0.0);
        opt.step(&mut [&mut p], &[Tensor::row_vector(vec![3.0, -0.5])]).unwrap();
        // bias-corrected m/sqrt(v) = sign(g) on the first step
        assert!((p.get(0, 0) - 0.9).abs() < 1e-7);
        assert!((p.get(0, 1) + 1.9).abs() < 1e-7);
    }

    #[test]
    fn adam_matches_scalar_recursion() {
        let mut p = Tensor::scalar(0.5);
        let mut opt = Adam::new(0.01, 0.5, 0.1);
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = 2.0 * w;
            opt.step(&mut [&mut p], &[Tensor::scalar(g)]).unwrap();
            let g = g + 0.1 * w;
            m = 0.5 * m + 0.5 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= 0.01 * (m / (1.0 - 0.5f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((p.item() - w).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_recursion() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        // buffers 1, 1.9 -> 1 - 0.1 - 0.19
        assert!((p.item() - 0.71).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(1, 2)]).is_err());
        assert!(opt.step(&mut [&mut p], &[Tensor::scalar(f64::NAN)]).is_err());
    }
}
