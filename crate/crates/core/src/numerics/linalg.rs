//! Small dense symmetric linear algebra: cyclic Jacobi eigensolver, Cholesky,
//! and Gram-Schmidt orthonormalization.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Column `j` is the unit eigenvector for `values[j]`.
    pub vectors: Tensor,
    pub sweeps: usize,
}

const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below
/// `1e-12` (scaled by the matrix norm when that is larger than one).
///
/// Eigenvectors use a fixed sign convention: the largest-magnitude entry of
/// every eigenvector is positive (first such entry on ties).
pub fn jacobi_eigen(m: &Tensor) -> Result<SymEigen> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Dimension(format!("eigen of non-square {:?}", m.shape())));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("jacobi_eigen input".into()));
    }
    let mut a = m.data().to_vec();
    // Symmetrize against round-off in callers' covariance accumulation.
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = s;
            a[j * n + i] = s;
        }
    }
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let tol = OFF_DIAGONAL_TOL * scale;
    let mut v = Tensor::identity(n).into_data();
    let mut sweeps = 0;
    while off_diagonal_norm(&a, n) >= tol {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Numeric("Jacobi eigensolver did not converge".into()));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Tensor::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for k in 0..n {
            if v[k * n + src].abs() > v[pivot * n + src].abs() {
                pivot = k;
            }
        }
        let sign = if v[pivot * n + src] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors.set(k, col, sign * v[k * n + src]);
        }
    }
    Ok(SymEigen {
        values,
        vectors,
        sweeps,
    })
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(m: &Tensor) -> Result<Tensor> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Dimension("cholesky of non-square matrix".into()));
    }
    let mut l = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Numeric(format!(
                        "matrix not positive definite (pivot {i} = {s:e})"
                    )));
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

pub fn cholesky_logdet(l: &Tensor) -> f64 {
    (0..l.rows()).map(|i| l.get(i, i).ln()).sum::<f64>() * 2.0
}

/// Solves `L Lᵀ x = b` for each column of `b`.
pub fn cholesky_solve(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = l.rows();
    if b.rows() != n {
        return Err(Error::Dimension("cholesky_solve rhs rows".into()));
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    Ok(x)
}

/// Orthonormalizes the columns of `m` with two passes of modified Gram-Schmidt.
pub fn orthonormalize_columns(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.shape();
    if cols > rows {
        return Err(Error::Dimension(format!(
            "cannot orthonormalize {cols} columns in dimension {rows}"
        )));
    }
    let mut q = m.transpose();
    for _pass in 0..2 {
        for j in 0..cols {
            for k in 0..j {
                let dot: f64 = (0..rows).map(|r| q.get(j, r) * q.get(k, r)).sum();
                for r in 0..rows {
                    let v = q.get(j, r) - dot * q.get(k, r);
                    q.set(j, r, v);
                }
            }
            let norm = q.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric("rank-deficient column set".into()));
            }
            for r in 0..rows {
                let v = q.get(j, r) / norm;
                q.set(j, r, v);
            }
        }
    }
    Ok(q.transpose())
}

/// Sample covariance (divisor `n - 1`) and column means of a data matrix.
pub fn covariance(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::Input("covariance needs at least 2 rows".into()));
    }
    let mean = x.col_means();
    let mut centered = x.clone();
    let d = x.cols();
    for row in centered.data_mut().chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(mean.data()) {
            *v -= m;
        }
    }
    let cov = centered.t_matmul(&centered)?.scale(1.0 / (n - 1) as f64);
    Ok((cov, mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(n: usize, seed: u64) -> Tensor {
        let mut m = Tensor::zeros(n, n);
        let mut x = seed as f64;
        for i in 0..n {
            for j in 0..=i {
                x = (x * 1.618 + 0.37).fract();
                m.set(i, j, x - 0.5);
                m.set(j, i, x - 0.5);
            }
        }
        m
    }

    #[test]
    fn jacobi_reconstructs_and_orders() {
        let m = sym(7, 3);
        let e = jacobi_eigen(&m).unwrap();
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        // V diag(λ) Vᵀ == M
        let mut vl = e.vectors.clone();
        for r in 0..7 {
            for c in 0..7 {
                vl.set(r, c, vl.get(r, c) * e.values[c]);
            }
        }
        let rec = vl.matmul_t(&e.vectors).unwrap();
        assert!(rec.max_abs_diff(&m) < 1e-10);
        let trace: f64 = (0..7).map(|i| m.get(i, i)).sum();
        assert!((e.values.iter().sum::<f64>() - trace).abs() < 1e-9);
    }

    #[test]
    fn jacobi_sign_convention() {
        let e = jacobi_eigen(&sym(5, 11)).unwrap();
        for c in 0..5 {
            let col: Vec<f64> = (0..5).map(|r| e.vectors.get(r, c)).collect();
            let pivot = col
                .iter()
                .copied()
                .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn cholesky_solves() {
        let a = Tensor::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        assert!((cholesky_logdet(&l) - 11.0f64.ln()).abs() < 1e-12);
        let b = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let x = cholesky_solve(&l, &b).unwrap();
        assert!(a.matmul(&x).unwrap().max_abs_diff(&b) < 1e-12);
        let bad = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn gram_schmidt_columns_are_orthonormal() {
        let m = Tensor::new(6, 4, (0..24).map(|i| ((i * 7 % 11) as f64).sin()).collect()).unwrap();
        let q = orthonormalize_columns(&m).unwrap();
        let g = q.t_matmul(&q).unwrap();
        assert!(g.max_abs_diff(&Tensor::identity(4)) < 1e-14);
    }
}
