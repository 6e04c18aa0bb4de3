use crate::error::{Error, Result};
use crate::numerics::linalg::{cholesky, cholesky_logdet, cholesky_solve, covariance, jacobi_eigen};
use crate::numerics::Tensor;

pub const DEFAULT_SHRINKAGE: f64 = 0.1;

/// Sample mean and covariance shrunk toward `trace/d * I`.
pub fn shrunk_covariance(x: &Tensor, gamma: f64) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("shrinkage {gamma} outside [0, 1]")));
    }
    let (cov, mean) = covariance(x)?;
    let d = cov.rows();
    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    if trace <= 0.0 {
        return Err(Error::Numeric("features have zero variance; covariance is identically zero".into()));
    }
    let mut shrunk = cov.scale(1.0 - gamma);
    for i in 0..d {
        shrunk.set(i, i, shrunk.get(i, i) + gamma * trace / d as f64);
    }
    Ok((mean, shrunk))
}

/// Closed-form `KL(N(mu_a, cov_a) || N(mu_b, cov_b))`.
pub fn gaussian_kl_moments(mu_a: &Tensor, cov_a: &Tensor, mu_b: &Tensor, cov_b: &Tensor) -> Result<f64> {
    let d = cov_a.rows();
    if cov_b.shape() != (d, d) || mu_a.shape() != (1, d) || mu_b.shape() != (1, d) {
        return Err(Error::Dimension("Gaussian KL of mismatched moments".into()));
    }
    let la = cholesky(cov_a)?;
    let lb = cholesky(cov_b)?;
    let trace_term: f64 = {
        let s = cholesky_solve(&lb, cov_a)?;
        (0..d).map(|i| s.get(i, i)).sum()
    };
    let diff = mu_b.zip_map(mu_a, |b, a| b - a)?;
    let sol = cholesky_solve(&lb, &diff.transpose())?;
    let maha: f64 = diff.data().iter().zip(sol.data()).map(|(a, b)| a * b).sum();
    let kl = 0.5 * (trace_term + maha - d as f64 + cholesky_logdet(&lb) - cholesky_logdet(&la));
    Ok(kl.max(0.0))
}

/// KL between Gaussians fit to two feature groups, with covariance shrinkage.
pub fn gaussian_kl(a: &Tensor, b: &Tensor, gamma: f64) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!("groups of width {} and {}", a.cols(), b.cols())));
    }
    let (mu_a, cov_a) = shrunk_covariance(a, gamma)?;
    let (mu_b, cov_b) = shrunk_covariance(b, gamma)?;
    gaussian_kl_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// Pairwise `KL(group i || group j)`, both directions stored, zero diagonal.
pub fn kl_matrix(groups: &[&Tensor], gamma: f64) -> Result<Vec<Vec<f64>>> {
    if groups.len() < 2 {
        return Err(Error::Input("a KL matrix needs at least two groups".into()));
    }
    let moments: Vec<(Tensor, Tensor)> = groups.iter().map(|g| shrunk_covariance(g, gamma)).collect::<Result<_>>()?;
    let n = groups.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out[i][j] = gaussian_kl_moments(&moments[i].0, &moments[i].1, &moments[j].0, &moments[j].1)?;
            }
        }
    }
    Ok(out)
}

/// Mean of the off-diagonal entries.
pub fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j]).sum();
    total / (n * (n - 1)) as f64
}

/// Smallest number of leading principal components carrying 95% of the
/// variance; 0 when the data has no variance.
pub fn pca_k95(x: &Tensor) -> Result<usize> {
    let (cov, _) = covariance(x)?;
    let eig = jacobi_eigen(&cov)?;
    let values: Vec<f64> = eig.values.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Ok(0);
    }
    let mut acc = 0.0;
    for (k, v) in values.iter().enumerate() {
        acc += v;
        if acc >= 0.95 * total {
            return Ok(k + 1);
        }
    }
    Ok(values.len())
}

/// Per-group top neurons and the neurons common to every group.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoactivationCore {
    pub top_n: usize,
    /// Neuron indices of each group, by decreasing mean activation.
    pub top_sets: Vec<Vec<usize>>,
    /// Sorted indices present in every top set.
    pub core: Vec<usize>,
}

/// Ranks neurons of each activation matrix by mean activation (ties to the
/// lower index) and intersects the `top_n` sets.
pub fn coactivation_core(activations: &[&Tensor], top_n: usize) -> Result<CoactivationCore> {
    let width = activations
        .first()
        .ok_or_else(|| Error::Input("co-activation needs at least one group".into()))?
        .cols();
    if activations.iter().any(|a| a.cols() != width) {
        return Err(Error::Dimension("activation groups differ in width".into()));
    }
    if top_n > width {
        return Err(Error::Config(format!("top_n {top_n} exceeds layer width {width}")));
    }
    let mut top_sets = Vec::with_capacity(activations.len());
    for a in activations {
        if a.rows() == 0 {
            return Err(Error::Input("empty activation group".into()));
        }
        let means = a.col_means();
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|&i, &j| means.data()[j].total_cmp(&means.data()[i]).then(i.cmp(&j)));
        order.truncate(top_n);
        top_sets.push(order);
    }
    let mut core: Vec<usize> = top_sets[0].clone();
    core.retain(|n| top_sets.iter().all(|s| s.contains(n)));
    core.sort_unstable();
    Ok(CoactivationCore { top_n, top_sets, core })
}

pub const RIDGE_FALLBACK: f64 = 1e-8;

/// Fraction of the total feature variance explained by an ordinary least
/// squares fit (with intercept) on the covariates. Coordinates are weighted
/// by their variance, so this is `1 - sum residual var / sum total var`.
pub fn variance_explained(features: &Tensor, covariates: &Tensor) -> Result<f64> {
    let n = features.rows();
    if covariates.rows() != n {
        return Err(Error::Dimension(format!(
            "{n} feature rows but {} covariate rows",
            covariates.rows()
        )));
    }
    if covariates.cols() >= n {
        return Err(Error::Input("need more rows than covariate columns".into()));
    }
    let (_, fmean) = covariance(features)?;
    let (_, cmean) = covariance(covariates)?;
    let center = |x: &Tensor, m: &Tensor| -> Tensor {
        let mut out = x.clone();
        let c = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v -= m.data()[i % c];
        }
        out
    };
    let y = center(features, &fmean);
    let x = center(covariates, &cmean);
    let total: f64 = y.data().iter().map(|v| v * v).sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let xtx = x.t_matmul(&x)?;
    let xty = x.t_matmul(&y)?;
    let beta = match cholesky(&xtx).and_then(|l| cholesky_solve(&l, &xty)) {
        Ok(b) => b,
        Err(_) => {
            log::warn!("variance_explained: rank-deficient covariates, ridge {RIDGE_FALLBACK}");
            let scale = (0..xtx.rows()).map(|i| xtx.get(i, i)).fold(0.0, f64::max).max(1.0);
            let mut ridged = xtx.clone();
            for i in 0..ridged.rows() {
                ridged.set(i, i, ridged.get(i, i) + RIDGE_FALLBACK * scale);
            }
            cholesky_solve(&cholesky(&ridged)?, &xty)?
        }
    };
    let fitted = x.matmul(&beta)?;
    let residual: f64 = y.data().iter().zip(fitted.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((1.0 - residual / total).clamp(0.0, 1.0))
}

/// Coordinates on the top two principal components of the rows. Each
/// component's largest-magnitude loading is made positive.
pub fn pca_project_2d(x: &Tensor) -> Result<Tensor> {
    if x.rows() < 3 {
        return Err(Error::Input("2-D projection needs at least 3 rows".into()));
    }
    let (cov, mean) = covariance(x)?;
    let eig = jacobi_eigen(&cov)?;
    let d = x.cols();
    let k = d.min(2);
    let mut basis = Tensor::zeros(d, 2);
    for c in 0..k {
        let col: Vec<f64> = (0..d).map(|r| eig.vectors.get(r, c)).collect();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (r, v) in col.iter().enumerate() {
            basis.set(r, c, sign * v);
        }
    }
    let mut centered = x.clone();
    for (i, v) in centered.data_mut().iter_mut().enumerate() {
        *v -= mean.data()[i % d];
    }
    centered.matmul(&basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn gaussian_rows(seed: u64, n: usize, d: usize) -> Tensor {
        let mut r = crate::rng::stream(&[seed]);
        Tensor::new(n, d, (0..n * d).map(|_| r.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn kl_of_identical_groups_is_zero() {
        let a = gaussian_rows(1, 50, 4);
        assert!(gaussian_kl(&a, &a, 0.1).unwrap().abs() < 1e-9);
    }

    #[test]
    fn kl_of_unit_mean_shift_is_half() {
        let s = Tensor::scalar(1.0);
        let kl = gaussian_kl_moments(&Tensor::scalar(0.0), &s, &Tensor::scalar(1.0), &s).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_of_variance_change_matches_closed_form() {
        let kl = gaussian_kl_moments(&Tensor::scalar(0.0), &Tensor::scalar(1.0), &Tensor::scalar(0.0), &Tensor::scalar(4.0))
            .unwrap();
        let expected = 2f64.ln() + 1.0 / 8.0 - 0.5;
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.3181).abs() < 1e-4);
    }

    #[test]
    fn kl_rejects_constant_features() {
        let a = Tensor::filled(5, 2, 3.0);
        assert!(matches!(gaussian_kl(&a, &a, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn kl_matrix_has_zero_diagonal_and_both_directions() {
        let a = gaussian_rows(2, 40, 3);
        let b = gaussian_rows(3, 40, 3).map(|v| 2.0 * v + 1.0);
        let m = kl_matrix(&[&a, &b, &a], 0.1).unwrap();
        for (i, row) in m.iter().enumerate() {
            assert_eq!(row[i], 0.0);
        }
        assert!(m[0][2].abs() < 1e-9);
        assert!(m[0][1] > 0.0 && m[1][0] > 0.0);
        assert!((m[0][1] - m[1][0]).abs() > 1e-6);
    }

    #[test]
    fn k95_of_rank_one_data_is_one() {
        let x = Tensor::from_rows(&(0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect::<Vec<_>>())
            .unwrap();
        assert_eq!(pca_k95(&x).unwrap(), 1);
    }

    #[test]
    fn k95_with_96_percent_leading_variance_is_one() {
        // columns of +-sqrt(0.96 * 3/4 * 4/3) style: exact covariance diag(0.96, 0.04)
        let a = (0.96f64 * 3.0 / 4.0).sqrt();
        let b = (0.04f64 * 3.0 / 4.0).sqrt();
        let x = Tensor::from_rows(&[vec![a, b], vec![-a, b], vec![a, -b], vec![-a, -b]]).unwrap();
        let (cov, _) = covariance(&x).unwrap();
        assert!((cov.get(0, 0) - 0.96).abs() < 1e-12 && (cov.get(1, 1) - 0.04).abs() < 1e-12);
        assert_eq!(pca_k95(&x).unwrap(), 1);
    }

    #[test]
    fn k95_of_constant_data_is_zero() {
        assert_eq!(pca_k95(&Tensor::filled(4, 3, 1.5)).unwrap(), 0);
    }

    #[test]
    fn identical_activations_share_the_full_top_set() {
        let a = gaussian_rows(4, 20, 8);
        let core = coactivation_core(&[&a, &a, &a], 3).unwrap();
        assert_eq!(core.core.len(), 3);
    }

    #[test]
    fn disjoint_top_sets_have_empty_core() {
        let mut a = Tensor::zeros(2, 4);
        let mut b = Tensor::zeros(2, 4);
        for r in 0..2 {
            a.set(r, 0, 5.0);
            a.set(r, 1, 4.0);
            b.set(r, 2, 5.0);
            b.set(r, 3, 4.0);
        }
        let core = coactivation_core(&[&a, &b], 2).unwrap();
        assert_eq!(core.top_sets, vec![vec![0, 1], vec![2, 3]]);
        assert!(core.core.is_empty());
        assert!(matches!(coactivation_core(&[&a], 5), Err(Error::Config(_))));
    }

    #[test]
    fn exact_linear_map_is_fully_explained() {
        let c = gaussian_rows(5, 100, 3);
        let w = Tensor::new(3, 2, vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap();
        let f = c.matmul(&w).unwrap().map(|v| v + 7.0);
        assert!((variance_explained(&f, &c).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn independent_features_are_barely_explained() {
        let f = gaussian_rows(6, 4000, 2);
        let c = gaussian_rows(7, 4000, 2);
        assert!(variance_explained(&f, &c).unwrap() < 0.01);
    }

    #[test]
    fn unit_noise_on_unit_signal_explains_half() {
        let c = gaussian_rows(8, 2000, 1);
        let noise = gaussian_rows(9, 2000, 1);
        let f = c.zip_map(&noise, |a, b| a + b).unwrap();
        assert!((variance_explained(&f, &c).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn duplicated_covariates_use_the_ridge_fallback() {
        let c = gaussian_rows(10, 50, 1);
        let both = Tensor::hconcat(&[&c, &c]).unwrap();
        let f = c.map(|v| 2.0 * v);
        assert!((variance_explained(&f, &both).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn points_on_a_line_project_to_one_axis() {
        let x = Tensor::from_rows(&(0..6).map(|i| vec![i as f64, 0.5 * i as f64, 1.0]).collect::<Vec<_>>()).unwrap();
        let p = pca_project_2d(&x).unwrap();
        for i in 0..6 {
            assert!(p.get(i, 1).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_residual_matches_eigenvalue_tail() {
        let x = gaussian_rows(11, 60, 5);
        let p = pca_project_2d(&x).unwrap();
        let (cov, mean) = covariance(&x).unwrap();
        let eig = jacobi_eigen(&cov).unwrap();
        let tail: f64 = eig.values[2..].iter().sum();
        let total: f64 = (0..60)
            .map(|i| (0..5).map(|j| (x.get(i, j) - mean.get(0, j)).powi(2)).sum::<f64>())
            .sum();
        let kept: f64 = p.data().iter().map(|v| v * v).sum();
        assert!(((total - kept) / 59.0 - tail).abs() < 1e-9);
    }

    #[test]
    fn projection_follows_row_permutation() {
        let x = gaussian_rows(12, 20, 4);
        let order: Vec<usize> = (0..20).rev().collect();
        let a = pca_project_2d(&x).unwrap();
        let b = pca_project_2d(&x.select_rows(&order)).unwrap();
        assert!(a.select_rows(&order).max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn random_matrix_k95_matches_an_independent_eigensolver() {
        let x = gaussian_rows(13, 50, 8);
        let (cov, _) = covariance(&x).unwrap();
        let values = power_deflation_eigenvalues(&cov);
        let total: f64 = values.iter().sum();
        let mut acc = 0.0;
        let mut k = 0;
        for v in &values {
            acc += v;
            k += 1;
            if acc >= 0.95 * total {
                break;
            }
        }
        assert_eq!(pca_k95(&x).unwrap(), k);
    }

    /// Eigenvalues by power iteration with deflation; an oracle unrelated to Jacobi rotations.
    fn power_deflation_eigenvalues(m: &Tensor) -> Vec<f64> {
        let n = m.rows();
        let mut a = m.clone();
        let mut out = Vec::new();
        for _ in 0..n {
            let mut v = Tensor::new(n, 1, (0..n).map(|i| 1.0 + i as f64 * 0.1).collect()).unwrap();
            let mut lambda = 0.0;
            for _ in 0..20000 {
                let w = a.matmul(&v).unwrap();
                let norm = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    break;
                }
                v = w.scale(1.0 / norm);
                lambda = norm;
            }
            out.push(lambda);
            let outer = v.matmul_t(&v).unwrap().scale(lambda);
            a = a.zip_map(&outer, |x, y| x - y).unwrap();
        }
        out
    }
}
