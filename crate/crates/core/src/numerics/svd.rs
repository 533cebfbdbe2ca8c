//! Full singular value decomposition by one-sided (Hestenes) Jacobi
//! rotations.
//!
//! The left factor is always square: columns belonging to zero singular
//! values, and the extra columns when `rows > cols`, are filled by
//! Householder completion so that `U·Uᵀ = I` holds even for
//! rank-deficient input.

use super::Tensor;
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;
/// Largest tolerated normalized off-diagonal Gram entry at exit.
pub const CONVERGENCE_TOL: f64 = 1e-12;
/// Relative cutoff below which singular values are treated as zero when
/// inverting.
pub const PINV_RTOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `m×m`, orthogonal.
    pub u: Tensor,
    /// `min(m, n)` values, descending, non-negative.
    pub s: Vec<f64>,
    /// `n×n`, orthogonal.
    pub vt: Tensor,
}

impl SvdResult {
    /// `U·diag(S)·Vt` with the rectangular diagonal implied by the shapes.
    pub fn reconstruct(&self) -> Tensor {
        let (m, n) = (self.u.rows(), self.vt.rows());
        let mut us = Tensor::zeros(m, n);
        for (j, &s) in self.s.iter().enumerate() {
            for i in 0..m {
                us.set(i, j, self.u.get(i, j) * s);
            }
        }
        us.mm(&self.vt)
    }

    /// Number of singular values above `PINV_RTOL · σ_max`.
    pub fn numeric_rank(&self) -> usize {
        let smax = self.s.first().copied().unwrap_or(0.0);
        if smax == 0.0 {
            return 0;
        }
        self.s.iter().filter(|&&s| s > PINV_RTOL * smax).count()
    }
}

/// Reciprocals of singular values, with entries below `PINV_RTOL · σ_max`
/// mapped to zero.
pub fn pinv_values(s: &[f64]) -> Vec<f64> {
    let smax = s.iter().cloned().fold(0.0, f64::max);
    s.iter()
        .map(|&v| {
            if smax > 0.0 && v > PINV_RTOL * smax {
                1.0 / v
            } else {
                0.0
            }
        })
        .collect()
}

pub fn svd_full(a: &Tensor) -> Result<SvdResult> {
    if a.is_empty() {
        return Err(Error::Input("svd of an empty matrix".into()));
    }
    if !a.is_finite() {
        return Err(Error::Numeric("svd input has non-finite entries".into()));
    }
    if a.rows() >= a.cols() {
        tall_svd(a)
    } else {
        let t = tall_svd(&a.transpose())?;
        Ok(SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        })
    }
}

fn tall_svd(a: &Tensor) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // Column-major working copies.
    let mut b: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let rot_tol = f64::EPSILON * m as f64;

    let mut converged = false;
    let mut worst = 0.0;
    for _ in 0..MAX_SWEEPS {
        worst = 0.0f64;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = gram_entries(&b[p], &b[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(off);
                if off <= rot_tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut b, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged && worst > CONVERGENCE_TOL {
        return Err(Error::Numeric(format!(
            "jacobi svd did not converge in {MAX_SWEEPS} sweeps (off-diagonal residual {worst:.3e})"
        )));
    }

    let norms: Vec<f64> = b.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let smax = norms[order[0]];

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut s = Vec::with_capacity(n);
    for &j in &order {
        let sigma = norms[j];
        s.push(sigma);
        if u_cols.len() < s.len() - 1 {
            continue;
        }
        if sigma > 0.0 && sigma > smax * 1e-15 {
            let mut col: Vec<f64> = b[j].iter().map(|x| x / sigma).collect();
            if orthonormalize_against(&mut col, &u_cols) >= 0.5 {
                u_cols.push(col);
            }
        }
    }
    complete_basis(&mut u_cols, m);

    let u = Tensor::from_fn(m, m, |i, j| u_cols[j][i]);
    let vt = Tensor::from_fn(n, n, |i, k| v[order[i]][k]);
    Ok(SvdResult { u, s, vt })
}

fn gram_entries(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut g = 0.0;
    for (p, q) in x.iter().zip(y) {
        a += p * p;
        b += q * q;
        g += p * q;
    }
    (a, b, g)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Two passes of modified Gram–Schmidt, then normalization. Returns the
/// norm that survived the projections (relative to the input's).
fn orthonormalize_against(col: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    let start: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
    if start == 0.0 {
        return 0.0;
    }
    for _ in 0..2 {
        for e in basis {
            let dot: f64 = col.iter().zip(e).map(|(a, b)| a * b).sum();
            for (c, b) in col.iter_mut().zip(e) {
                *c -= dot * b;
            }
        }
    }
    let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for c in col.iter_mut() {
            *c /= norm;
        }
    }
    norm / start
}

/// Extends orthonormal columns to a basis of `R^m` with the trailing
/// columns of a Householder QR of the existing ones.
fn complete_basis(cols: &mut Vec<Vec<f64>>, m: usize) {
    let r = cols.len();
    if r >= m {
        return;
    }
    let mut a = cols.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(r);
    for j in 0..r {
        let norm = a[j][j..].iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut v = vec![0.0; m];
        v[j..].copy_from_slice(&a[j][j..]);
        v[j] += if a[j][j] >= 0.0 { norm } else { -norm };
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vn > 0.0 {
            v.iter_mut().for_each(|x| *x /= vn);
        }
        for col in a.iter_mut().skip(j) {
            reflect(col, &v);
        }
        reflectors.push(v);
    }
    for k in r..m {
        let mut e = vec![0.0; m];
        e[k] = 1.0;
        for v in reflectors.iter().rev() {
            reflect(&mut e, v);
        }
        cols.push(e);
    }
}

/// `x ← (I − 2vvᵀ)x` for unit `v`.
fn reflect(x: &mut [f64], v: &[f64]) {
    let dot: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
    x.iter_mut().zip(v).for_each(|(a, b)| *a -= 2.0 * dot * b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn gram_residual(q: &Tensor) -> f64 {
        q.tmm(q).max_abs_diff(&Tensor::eye(q.cols()))
    }

    fn check(a: &Tensor) -> SvdResult {
        let r = svd_full(a).unwrap();
        assert_eq!(r.u.shape(), (a.rows(), a.rows()));
        assert_eq!(r.vt.shape(), (a.cols(), a.cols()));
        assert!(gram_residual(&r.u) < 1e-10, "U gram {}", gram_residual(&r.u));
        assert!(gram_residual(&r.u.transpose()) < 1e-10);
        assert!(gram_residual(&r.vt.transpose()) < 1e-10);
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        assert!(r.reconstruct().max_abs_diff(a) < 1e-8 * scale);
        assert!(r.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.s.iter().all(|&s| s >= 0.0));
        r
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let r = check(&Tensor::eye(4));
        assert!(r.s.iter().all(|s| (s - 1.0).abs() < 1e-14));
    }

    #[test]
    fn rank_one_outer_product() {
        let mut rng = Rng::new(8);
        let mut u = rng.normal_tensor(5, 1, 1.0);
        let mut v = rng.normal_tensor(3, 1, 1.0);
        u = u.scale(1.0 / u.frobenius());
        v = v.scale(1.0 / v.frobenius());
        let a = u.mmt(&v);
        let r = check(&a);
        assert!((r.s[0] - 1.0).abs() < 1e-12);
        assert!(r.s[1..].iter().all(|s| s.abs() < 1e-12));
        assert_eq!(r.numeric_rank(), 1);
    }

    #[test]
    fn wide_random_matrix() {
        let mut rng = Rng::new(21);
        check(&rng.normal_tensor(6, 10, 1.0));
    }

    #[test]
    fn zero_matrix_gets_identity_factors() {
        let r = check(&Tensor::zeros(3, 2));
        assert!(r.s.iter().all(|&s| s == 0.0));
        assert_eq!(r.numeric_rank(), 0);
    }

    #[test]
    fn rank_deficient_tall_matrix_has_orthogonal_u() {
        let mut rng = Rng::new(2);
        let a = rng.normal_tensor(8, 2, 1.0).mm(&rng.normal_tensor(2, 6, 1.0));
        let r = check(&a);
        assert_eq!(r.numeric_rank(), 2);
    }

    #[test]
    fn pinv_zeroes_tiny_values() {
        assert_eq!(pinv_values(&[2.0, 1e-12, 0.0]), vec![0.5, 0.0, 0.0]);
        assert_eq!(pinv_values(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(svd_full(&Tensor::zeros(0, 3)).is_err());
    }
}
