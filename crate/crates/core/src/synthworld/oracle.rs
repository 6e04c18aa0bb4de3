use super::perceptor::{build_perceptor, perceptor_noise_key, PerceptorMode};
use super::world::SyntheticWorld;
use crate::error::{Error, Result};
use crate::numerics::linalg::{cholesky, cholesky_logdet, cholesky_solve};
use crate::numerics::Tensor;
use crate::protocols::auc;
use crate::rng;

/// A Gaussian log-density restricted to a subset of coordinates.
struct ClassDensity {
    mean: Vec<f64>,
    chol: Tensor,
    logdet: f64,
}

impl ClassDensity {
    fn new(mean: &Tensor, cov: &Tensor, keep: &[usize]) -> Result<Self> {
        let n = keep.len();
        let mut sub = Tensor::zeros(n, n);
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                sub.set(a, b, cov.get(i, j));
            }
        }
        let chol = match cholesky(&sub) {
            Ok(l) => l,
            Err(_) => {
                // Exactly singular feature covariances (noise-free worlds
                // projected above their rank) get a vanishing ridge.
                let ridge = 1e-10 * (0..n).map(|i| sub.get(i, i)).sum::<f64>() / n as f64;
                for i in 0..n {
                    let v = sub.get(i, i) + ridge;
                    sub.set(i, i, v);
                }
                cholesky(&sub)?
            }
        };
        Ok(Self {
            mean: keep.iter().map(|&i| mean.get(0, i)).collect(),
            logdet: cholesky_logdet(&chol),
            chol,
        })
    }

    fn log_density(&self, z: &[f64], keep: &[usize]) -> Result<f64> {
        let centered: Vec<f64> = keep.iter().zip(&self.mean).map(|(&i, m)| z[i] - m).collect();
        let n = centered.len();
        let rhs = Tensor::new(n, 1, centered.clone())?;
        let sol = cholesky_solve(&self.chol, &rhs)?;
        let quad: f64 = centered.iter().zip(sol.data()).map(|(a, b)| a * b).sum();
        Ok(-0.5 * (quad + self.logdet))
    }
}

/// Monte Carlo AUC of the exact class log-likelihood ratio in the feature
/// space of modality `k` under the given perceptor, for a run holding out
/// `held_out`. Samples come from fresh streams, disjoint from the datasets.
pub fn bayes_auc_oracle(
    world: &SyntheticWorld,
    k: usize,
    mode: PerceptorMode,
    held_out: usize,
    n_mc: usize,
) -> Result<f64> {
    if n_mc < 100 {
        return Err(Error::Config(format!("bayes_auc_oracle needs n_mc >= 100, got {n_mc}")));
    }
    world.check_modality(k)?;
    let map = build_perceptor(world, mode, k, held_out)?;
    let leak = world.leak(k, held_out);
    let mut densities = Vec::with_capacity(2);
    let mut covs = Vec::with_capacity(2);
    for fake in [false, true] {
        let (mx, sx) = world.raw_class_gaussian(k, leak, fake)?;
        let mean = mx.matmul(&map.weight)?;
        let mut mean_z = mean.clone();
        mean_z.add_assign(&map.bias)?;
        let mut cov = map.weight.t_matmul(&sx.matmul(&map.weight)?)?;
        for (i, sd) in map.noise_sd.iter().enumerate() {
            let v = cov.get(i, i) + sd * sd;
            cov.set(i, i, v);
        }
        covs.push((mean_z, cov));
    }
    let dim = map.output_dim();
    let scale = (0..dim).map(|i| covs[0].1.get(i, i)).fold(0.0, f64::max);
    let keep: Vec<usize> = (0..dim)
        .filter(|&i| covs[0].1.get(i, i).max(covs[1].1.get(i, i)) > 1e-14 * scale)
        .collect();
    for (mean, cov) in &covs {
        densities.push(ClassDensity::new(mean, cov, &keep)?);
    }
    let labels: Vec<u8> = (0..n_mc).map(|i| (i % 2) as u8).collect();
    let purpose = rng::tag("bayes-oracle");
    let raw = world.draw(k, leak, &labels, purpose)?;
    let z = map.apply(&raw.x, &perceptor_noise_key(world, k, purpose))?;
    let mut scores = Vec::with_capacity(n_mc);
    for i in 0..n_mc {
        let row = z.row(i);
        scores.push(densities[1].log_density(row, &keep)? - densities[0].log_density(row, &keep)?);
    }
    auc(&scores, &labels)
}

/// Monte Carlo AUC of the likelihood ratio of the essence latent alone.
pub fn essence_bayes_auc(world: &SyntheticWorld, n_mc: usize) -> Result<f64> {
    if n_mc < 100 {
        return Err(Error::Config(format!("essence_bayes_auc needs n_mc >= 100, got {n_mc}")));
    }
    let c = &world.config;
    let labels: Vec<u8> = (0..n_mc).map(|i| (i % 2) as u8).collect();
    let raw = world.draw(0, 0.0, &labels, rng::tag("essence-oracle"))?;
    let var_f = c.fake_variance_inflation.powi(2);
    let e = c.essence_dim as f64;
    let scores = (0..n_mc)
        .map(|i| {
            let eps = raw.essence.row(i);
            let real: f64 = eps.iter().map(|v| v * v).sum::<f64>();
            let fake: f64 = eps
                .iter()
                .zip(&world.essence_shift)
                .map(|(v, u)| (v - c.fake_mean_shift * u).powi(2))
                .sum::<f64>()
                / var_f;
            0.5 * (real - fake) - 0.5 * e * var_f.ln()
        })
        .collect::<Vec<_>>();
    auc(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_world, WorldConfig};

    #[test]
    fn rejects_small_budgets() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        assert!(matches!(
            bayes_auc_oracle(&w, 0, PerceptorMode::Semantic, 2, 99),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn null_world_is_at_chance() {
        let w = generate_world(&WorldConfig::default().null_signal()).unwrap();
        let a = bayes_auc_oracle(&w, 0, PerceptorMode::Semantic, 2, 4000).unwrap();
        assert!((a - 0.5).abs() < 0.02, "{a}");
    }

    #[test]
    fn separated_classes_approach_one() {
        let w = generate_world(&WorldConfig {
            fake_mean_shift: 10.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let a = bayes_auc_oracle(&w, 1, PerceptorMode::Semantic, 2, 1000).unwrap();
        assert!(a > 0.999, "{a}");
    }

    #[test]
    fn feature_oracle_dominates_essence_oracle() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let ess = essence_bayes_auc(&w, 20000).unwrap();
        // Training modalities add the style leak on top of the essence signal.
        let sem = bayes_auc_oracle(&w, 0, PerceptorMode::Semantic, 2, 20000).unwrap();
        assert!(sem > ess, "{sem} vs {ess}");
    }
}
