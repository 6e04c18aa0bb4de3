use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::config::WorldConfig;
use crate::error::{Error, Result};
use crate::numerics::linalg::orthonormalize_columns;
use crate::numerics::Tensor;
use crate::rng;

/// Norm of each modality's style mean, in style-latent units.
pub const STYLE_MEAN_NORM: f64 = 3.0;
/// Norm of each modality's offset in the semantic style coordinates.
pub const SEMANTIC_OFFSET_NORM: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityParams {
    /// `d x (e + s)` with orthonormal columns: essence basis then style basis.
    pub mixing: Tensor,
    pub style_mean: Vec<f64>,
    /// Unit direction in style space along which fakes are shifted.
    pub leak_dir: Vec<f64>,
    pub semantic_offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    /// Unit direction of the fake-class essence mean shift, shared by all modalities.
    pub essence_shift: Vec<f64>,
    pub modalities: Vec<ModalityParams>,
}

/// Raw observations of one modality with their ground-truth latents.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSamples {
    pub x: Tensor,
    pub labels: Vec<u8>,
    pub essence: Tensor,
    pub style: Tensor,
}

fn gaussian(r: &mut rng::Rng) -> f64 {
    r.sample(StandardNormal)
}

fn random_vector(r: &mut rng::Rng, n: usize, norm: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| gaussian(r)).collect();
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| norm * x / len).collect()
}

pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let (e, s, d) = (config.essence_dim, config.style_dim, config.raw_dim);
    let mut r = rng::stream(&[config.seed, rng::tag("world")]);
    let essence_shift = random_vector(&mut r, e, 1.0);
    let mut modalities = Vec::with_capacity(config.num_modalities);
    for _ in 0..config.num_modalities {
        let g = Tensor::new(d, e + s, (0..d * (e + s)).map(|_| gaussian(&mut r)).collect())?;
        modalities.push(ModalityParams {
            mixing: orthonormalize_columns(&g)?,
            style_mean: random_vector(&mut r, s, STYLE_MEAN_NORM),
            leak_dir: random_vector(&mut r, s, 1.0),
            semantic_offset: random_vector(&mut r, s, SEMANTIC_OFFSET_NORM),
        });
    }
    Ok(SyntheticWorld {
        config: config.clone(),
        essence_shift,
        modalities,
    })
}

impl SyntheticWorld {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn check_modality(&self, k: usize) -> Result<()> {
        if k >= self.num_modalities() {
            return Err(Error::Contract(format!(
                "modality {k} does not exist in a {}-modality world",
                self.num_modalities()
            )));
        }
        Ok(())
    }

    /// Style-leak coefficient of modality `k` when `held_out` is the unseen one.
    pub fn leak(&self, k: usize, held_out: usize) -> f64 {
        if k == held_out {
            self.config.style_leak_test
        } else {
            self.config.style_leak_train
        }
    }

    /// Modalities sharing one (label, essence) draw share a group.
    fn group(&self, k: usize) -> u64 {
        if self.config.aligned {
            0
        } else {
            k as u64 + 1
        }
    }

    /// Balanced labels: exactly `n / 2` fakes at seeded positions.
    pub fn labels(&self, k: usize) -> Vec<u8> {
        let n = self.config.samples_per_modality;
        let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n / 2)).collect();
        let mut r = rng::stream(&[self.config.seed, rng::tag("labels"), self.group(k)]);
        labels.shuffle(&mut r);
        labels
    }

    /// Seed of the train/val/test split; aligned modalities share it.
    pub fn split_seed(&self, k: usize) -> u64 {
        rng::derive_seed(&[self.config.seed, rng::tag("split"), self.group(k)])
    }

    pub fn raw(&self, k: usize, held_out: usize) -> Result<RawSamples> {
        self.check_modality(k)?;
        let labels = self.labels(k);
        self.draw(k, self.leak(k, held_out), &labels, rng::tag("sample"))
    }

    /// Draws samples of modality `k` with the given labels and style leak.
    /// Each row's randomness comes from a stream keyed by (seed, purpose,
    /// modality or group, row), so rows are independent of batch order.
    pub fn draw(&self, k: usize, leak: f64, labels: &[u8], purpose: u64) -> Result<RawSamples> {
        self.check_modality(k)?;
        let c = &self.config;
        let (e, s, d) = (c.essence_dim, c.style_dim, c.raw_dim);
        let params = &self.modalities[k];
        let n = labels.len();
        let mut essence = Tensor::zeros(n, e);
        let mut style = Tensor::zeros(n, s);
        let mut latent = Tensor::zeros(n, e + s);
        let mut noise = Tensor::zeros(n, d);
        for (i, &y) in labels.iter().enumerate() {
            let fake = y == 1;
            let mut er = rng::stream(&[c.seed, purpose, rng::tag("essence"), self.group(k), i as u64]);
            for j in 0..e {
                let xi = gaussian(&mut er);
                let v = if fake {
                    c.fake_mean_shift * self.essence_shift[j] + c.fake_variance_inflation * xi
                } else {
                    xi
                };
                essence.set(i, j, v);
                latent.set(i, j, v);
            }
            let mut sr = rng::stream(&[c.seed, purpose, rng::tag("style"), k as u64, i as u64]);
            let shift = if fake { leak } else { 0.0 };
            for j in 0..s {
                let v = params.style_mean[j] + shift * params.leak_dir[j] + gaussian(&mut sr);
                style.set(i, j, v);
                latent.set(i, e + j, v);
            }
            for j in 0..d {
                noise.set(i, j, c.observation_noise * gaussian(&mut sr));
            }
        }
        let mut x = latent.matmul_t(&params.mixing)?;
        x.add_assign(&noise)?;
        Ok(RawSamples {
            x,
            labels: labels.to_vec(),
            essence,
            style,
        })
    }

    /// Raw-space class-conditional Gaussian `(mean, covariance)` of modality `k`.
    pub fn raw_class_gaussian(&self, k: usize, leak: f64, fake: bool) -> Result<(Tensor, Tensor)> {
        self.check_modality(k)?;
        let c = &self.config;
        let (e, s, d) = (c.essence_dim, c.style_dim, c.raw_dim);
        let params = &self.modalities[k];
        let mut mean_latent = vec![0.0; e + s];
        let mut var_latent = vec![1.0; e + s];
        for j in 0..e {
            if fake {
                mean_latent[j] = c.fake_mean_shift * self.essence_shift[j];
                var_latent[j] = c.fake_variance_inflation.powi(2);
            }
        }
        for j in 0..s {
            mean_latent[e + j] = params.style_mean[j] + if fake { leak * params.leak_dir[j] } else { 0.0 };
        }
        let mean = Tensor::row_vector(mean_latent).matmul_t(&params.mixing)?;
        let mut scaled = params.mixing.clone();
        for row in scaled.data_mut().chunks_mut(e + s) {
            for (v, var) in row.iter_mut().zip(&var_latent) {
                *v *= var;
            }
        }
        let mut cov = scaled.matmul_t(&params.mixing)?;
        for i in 0..d {
            let v = cov.get(i, i) + c.observation_noise.powi(2);
            cov.set(i, i, v);
        }
        Ok((mean, cov))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            samples_per_modality: 200,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.raw(1, 2).unwrap(), b.raw(1, 2).unwrap());
        let c = generate_world(&WorldConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.modalities[0].mixing, c.modalities[0].mixing);
    }

    #[test]
    fn essence_and_style_subspaces_are_orthogonal() {
        let w = generate_world(&small()).unwrap();
        let (e, s) = (8, 24);
        for m in &w.modalities {
            let g = m.mixing.t_matmul(&m.mixing).unwrap();
            assert!(g.max_abs_diff(&Tensor::identity(e + s)) < 1e-12);
            for i in 0..e {
                for j in e..e + s {
                    assert!(g.get(i, j).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn aligned_worlds_share_labels_and_essence() {
        let w = generate_world(&small()).unwrap();
        let a = w.raw(0, 2).unwrap();
        let b = w.raw(1, 2).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.essence, b.essence);
        assert_ne!(a.style, b.style);
        assert_eq!(a.labels.iter().filter(|&&y| y == 1).count(), 100);
    }

    #[test]
    fn unaligned_worlds_draw_independently() {
        let w = generate_world(&WorldConfig {
            aligned: false,
            ..small()
        })
        .unwrap();
        let a = w.raw(0, 2).unwrap();
        let b = w.raw(1, 2).unwrap();
        assert_ne!(a.labels, b.labels);
        assert_ne!(a.essence, b.essence);
    }

    #[test]
    fn held_out_modality_gets_reversed_leak() {
        let w = generate_world(&small()).unwrap();
        let as_train = w.raw(2, 0).unwrap();
        let as_test = w.raw(2, 2).unwrap();
        assert_eq!(as_train.essence, as_test.essence);
        let v = &w.modalities[2].leak_dir;
        for i in 0..200 {
            let proj: f64 = (0..24).map(|j| (as_train.style.get(i, j) - as_test.style.get(i, j)) * v[j]).sum();
            let expected = if as_train.labels[i] == 1 { 1.6 } else { 0.0 };
            assert!((proj - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_moments_match_class_gaussians() {
        let w = generate_world(&WorldConfig {
            samples_per_modality: 6000,
            ..WorldConfig::default()
        })
        .unwrap();
        let raw = w.raw(0, 2).unwrap();
        let fakes: Vec<usize> = (0..6000).filter(|&i| raw.labels[i] == 1).collect();
        let xf = raw.x.select_rows(&fakes);
        let (mean, cov) = w.raw_class_gaussian(0, 0.8, true).unwrap();
        let (emp_cov, emp_mean) = crate::numerics::linalg::covariance(&xf).unwrap();
        assert!(emp_mean.max_abs_diff(&mean) < 0.12);
        assert!(emp_cov.max_abs_diff(&cov) < 0.2);
    }
}
