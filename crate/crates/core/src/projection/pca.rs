use rayon::prelude::*;

use super::set::{HeadProj, LayerProj, ProjectionSet, SiteProj};
use crate::calibration::{CalibrationFeatures, HeadFeatures};
use crate::error::{Error, Result};
use crate::model::{Arch, TransformerModel};
use crate::numerics::{centering_matrix, pinv_values, svd_full, Tensor};

/// Projections for one LayerNorm site.
#[derive(Clone, Debug)]
pub struct HiddenProjection {
    /// `UᵀR`.
    pub p_in: Tensor,
    /// `diag(γ)·U`.
    pub p_out: Tensor,
    /// `U`, the full left singular basis of the centered features.
    pub basis: Tensor,
    /// Numerical rank of the centered features.
    pub rank: usize,
}

/// PCA of the centered features `X` around a LayerNorm with scale `gamma`.
/// For any input, `P_out·norm(P_in·x) + β = LN(x)`.
pub fn hidden_projection(x: &Tensor, gamma: &Tensor) -> Result<HiddenProjection> {
    let d = x.rows();
    if x.cols() == 0 {
        return Err(Error::Input(
            "hidden projection needs at least one feature column".into(),
        ));
    }
    if gamma.shape() != (d, 1) {
        return Err(Error::dim("hidden projection scale", gamma.shape(), (d, 1)));
    }
    let r = centering_matrix(d);
    let svd = svd_full(&r.mm(x))?;
    let rank = svd.numeric_rank();
    if rank == 0 {
        log::warn!("hidden projection features have rank 0 after centering");
    }
    let u = svd.u;
    Ok(HiddenProjection {
        p_in: u.tmm(&r),
        p_out: u.scale_rows(gamma.data())?,
        basis: u,
        rank,
    })
}

/// Left singular basis of uncentered features, used around RMSNorm.
pub fn stream_basis(x: &Tensor) -> Result<Tensor> {
    if x.cols() == 0 {
        return Err(Error::Input("stream basis needs at least one feature column".into()));
    }
    Ok(svd_full(x)?.u)
}

/// Joint factorization of a head's query/key product.
#[derive(Clone, Debug)]
pub struct QkProjection {
    pub u_q: Tensor,
    pub u_k: Tensor,
    /// Singular values of `Z = Σ₁U₁ᵀU₂Σ₂`.
    pub z_singular: Vec<f64>,
}

impl QkProjection {
    /// `U_Q[:k]ᵀ·U_K[:k]`, the rank-`k` replacement for the identity between
    /// queries and keys.
    pub fn truncated_metric(&self, k: usize) -> Tensor {
        let k = k.min(self.u_q.rows());
        self.u_q.top_rows(k).tmm(&self.u_k.top_rows(k))
    }

    /// `√(Σ_{i>k} σ_i(Z)²)`.
    pub fn predicted_error(&self, k: usize) -> f64 {
        self.z_singular.iter().skip(k).map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// `U_Q = Σ_Z^{1/2} U_Zᵀ Σ₁⁺ U₁ᵀ` and `U_K = Σ_Z^{1/2} V_Zᵀ Σ₂⁺ U₂ᵀ`, so that
/// `X_Qᵀ U_Qᵀ U_K X_K = X_Qᵀ X_K` and truncating to the leading `k` rows
/// gives the best rank-`k` score approximation.
pub fn qk_projection(x_q: &Tensor, x_k: &Tensor) -> Result<QkProjection> {
    if x_q.is_empty() || x_k.is_empty() {
        return Err(Error::Input("query/key features must be non-empty".into()));
    }
    if x_q.shape() != x_k.shape() {
        return Err(Error::dim("qk projection", x_q.shape(), x_k.shape()));
    }
    let dh = x_q.rows();
    let s1 = svd_full(x_q)?;
    let s2 = svd_full(x_k)?;
    let sig = |s: &[f64]| -> Vec<f64> { (0..dh).map(|i| s.get(i).copied().unwrap_or(0.0)).collect() };
    let (sig1, sig2) = (sig(&s1.s), sig(&s2.s));
    let z = s1.u.tmm(&s2.u).scale_rows(&sig1)?.scale_cols(&sig2)?;
    let sz = svd_full(&z)?;
    let root: Vec<f64> = sz.s.iter().map(|s| s.sqrt()).collect();
    let u_q =
        sz.u.transpose()
            .scale_cols(&pinv_values(&sig1))?
            .mmt(&s1.u)
            .scale_rows(&root)?;
    let u_k = sz.vt.scale_cols(&pinv_values(&sig2))?.mmt(&s2.u).scale_rows(&root)?;
    Ok(QkProjection {
        u_q,
        u_k,
        z_singular: sz.s,
    })
}

/// `(P_V, P_O) = (U_Vᵀ, U_V)` with `U_V` the left singular basis of `W_V·X`.
pub fn v_projection(x_v: &Tensor) -> Result<(Tensor, Tensor)> {
    if x_v.is_empty() {
        return Err(Error::Input("value features must be non-empty".into()));
    }
    let u = svd_full(x_v)?.u;
    Ok((u.transpose(), u))
}

fn check_features(model: &TransformerModel, features: &CalibrationFeatures) -> Result<()> {
    let c = &model.config;
    if features.arch != c.arch {
        return Err(Error::Input(format!(
            "features were collected from a {} model, not {}",
            features.arch, c.arch
        )));
    }
    if features.layers.len() != c.n_layers {
        return Err(Error::Input("feature layer count does not match the model".into()));
    }
    for l in &features.layers {
        if l.x_m.rows() != c.d_model || l.x_f.rows() != c.d_model || l.heads.len() != c.n_heads {
            return Err(Error::Input("feature shapes do not match the model".into()));
        }
        if l.heads.iter().any(|h| h.x_q.rows() != c.head_dim()) {
            return Err(Error::Input("head feature shapes do not match the model".into()));
        }
    }
    Ok(())
}

fn head_projections(heads: &[HeadFeatures]) -> Result<Vec<HeadProj<Tensor>>> {
    heads
        .par_iter()
        .map(|h| {
            let qk = qk_projection(&h.x_q, &h.x_k)?;
            let (p_v, p_o) = v_projection(&h.x_v)?;
            Ok(HeadProj {
                p_q: qk.u_q,
                p_k: qk.u_k,
                p_v,
                p_o,
            })
        })
        .collect()
}

fn shared_site(u: &Tensor) -> SiteProj<Tensor> {
    SiteProj {
        p_in: u.transpose(),
        basis: u.clone(),
    }
}

/// Builds every projection from calibration features. The model itself is
/// not modified: the projected model is the pair `(model, projections)`.
///
/// Post-LN sites get their own basis each. Pre-RMSNorm layers get one basis
/// per layer, shared by both of its sites.
pub fn inject(model: &TransformerModel, features: &CalibrationFeatures) -> Result<ProjectionSet> {
    check_features(model, features)?;
    let layers: Vec<LayerProj<Tensor>> = features
        .layers
        .par_iter()
        .zip(model.params.layers.par_iter())
        .map(|(f, w)| {
            let heads = head_projections(&f.heads)?;
            match model.config.arch {
                Arch::PostLn => {
                    let m = hidden_projection(&f.x_m, &w.gamma_m)?;
                    let ff = hidden_projection(&f.x_f, &w.gamma_f)?;
                    Ok(LayerProj {
                        m: SiteProj {
                            p_in: m.p_in,
                            basis: m.basis,
                        },
                        f: SiteProj {
                            p_in: ff.p_in,
                            basis: ff.basis,
                        },
                        heads,
                    })
                }
                Arch::PreRms => {
                    let u = stream_basis(&Tensor::hstack(&[&f.x_m, &f.x_f])?)?;
                    Ok(LayerProj {
                        m: shared_site(&u),
                        f: shared_site(&u),
                        heads,
                    })
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok(ProjectionSet {
        arch: model.config.arch,
        groups: (0..layers.len()).collect(),
        layers,
    })
}

/// Pre-RMSNorm projections with one basis per group of `g` consecutive
/// layers, computed from the column-wise concatenation of the group's
/// norm-input features. A trailing group may be shorter.
pub fn group_pca(model: &TransformerModel, features: &CalibrationFeatures, g: usize) -> Result<ProjectionSet> {
    if model.config.arch != Arch::PreRms {
        return Err(Error::Contract("group PCA requires a pre-RMSNorm model".into()));
    }
    if g == 0 {
        return Err(Error::Config("group size must be at least 1".into()));
    }
    check_features(model, features)?;
    let n = model.config.n_layers;
    let group_starts: Vec<usize> = (0..n).step_by(g).collect();
    let bases: Vec<Tensor> = group_starts
        .par_iter()
        .map(|&start| {
            let end = (start + g).min(n);
            let parts: Vec<&Tensor> = features.layers[start..end]
                .iter()
                .flat_map(|l| [&l.x_m, &l.x_f])
                .collect();
            stream_basis(&Tensor::hstack(&parts)?)
        })
        .collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(n);
    for (i, f) in features.layers.iter().enumerate() {
        let u = &bases[i / g];
        layers.push(LayerProj {
            m: shared_site(u),
            f: shared_site(u),
            heads: head_projections(&f.heads)?,
        });
    }
    Ok(ProjectionSet {
        arch: Arch::PreRms,
        groups: (0..n).map(|i| i / g).collect(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NORM_EPS;
    use crate::numerics::{norm_columns, Rng};

    fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let d = x.rows() as f64;
        let mut out = x.clone();
        for c in 0..x.cols() {
            let col = x.col(c);
            let mu = col.iter().sum::<f64>() / d;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
            for (r, v) in col.iter().enumerate() {
                out.set(
                    r,
                    c,
                    gamma.get(r, 0) * (v - mu) / (var + NORM_EPS).sqrt() + beta.get(r, 0),
                );
            }
        }
        out
    }

    fn projected_ln(p: &HiddenProjection, x: &Tensor, beta: &Tensor) -> Tensor {
        let n = norm_columns(&p.p_in.mm(x), x.rows() as f64, NORM_EPS);
        p.p_out.mm(&n).add_col(beta).unwrap()
    }

    #[test]
    fn two_by_two_hand_case() {
        let x = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap();
        let gamma = Tensor::ones(2, 1);
        let p = hidden_projection(&x, &gamma).unwrap();
        // Centered columns are ±(0.5, −0.5), so the leading direction is (1, −1)/√2.
        let u0 = p.basis.col(0);
        assert!((u0[0].abs() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((u0[0] + u0[1]).abs() < 1e-12);
        assert_eq!(p.rank, 1);
        let beta = Tensor::zeros(2, 1);
        assert!(projected_ln(&p, &x, &beta).max_abs_diff(&layer_norm(&x, &gamma, &beta)) < 1e-9);
    }

    #[test]
    fn p_in_kills_constants() {
        let mut rng = Rng::new(3);
        let x = rng.normal_tensor(6, 20, 1.0);
        let p = hidden_projection(&x, &Tensor::ones(6, 1)).unwrap();
        assert!(p.p_in.mm(&Tensor::ones(6, 1)).max_abs() < 1e-12);
    }

    #[test]
    fn projected_layer_norm_is_exact_on_fresh_inputs() {
        let mut rng = Rng::new(5);
        let x = rng.normal_tensor(8, 30, 1.0);
        let gamma = rng.uniform_tensor(8, 1, 0.5, 1.5);
        let beta = rng.normal_tensor(8, 1, 0.2);
        let p = hidden_projection(&x, &gamma).unwrap();
        let fresh = rng.normal_tensor(8, 10, 2.0);
        let want = layer_norm(&fresh, &gamma, &beta);
        assert!(projected_ln(&p, &fresh, &beta).max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn degenerate_features_still_give_an_orthogonal_basis() {
        let x = Tensor::filled(5, 7, 1.5);
        let p = hidden_projection(&x, &Tensor::ones(5, 1)).unwrap();
        assert_eq!(p.rank, 0);
        assert!(p.basis.tmm(&p.basis).max_abs_diff(&Tensor::eye(5)) < 1e-10);
    }

    #[test]
    fn identity_features_give_identity_metric() {
        let qk = qk_projection(&Tensor::eye(4), &Tensor::eye(4)).unwrap();
        assert!(qk.truncated_metric(4).max_abs_diff(&Tensor::eye(4)) < 1e-9);
    }

    #[test]
    fn full_rank_scores_are_reconstructed() {
        let mut rng = Rng::new(9);
        let xq = rng.normal_tensor(4, 16, 1.0);
        let xk = rng.normal_tensor(4, 16, 1.0);
        let qk = qk_projection(&xq, &xk).unwrap();
        let exact = xq.tmm(&xk);
        let approx = xq.tmm(&qk.truncated_metric(4).mm(&xk));
        assert!(exact.sub(&approx).unwrap().frobenius() < 1e-8);
    }

    #[test]
    fn value_projection_is_orthogonal() {
        let mut rng = Rng::new(2);
        let (p_v, p_o) = v_projection(&rng.normal_tensor(4, 12, 1.0)).unwrap();
        assert!(p_v.mm(&p_o).max_abs_diff(&Tensor::eye(4)) < 1e-10);
        assert_eq!(p_o, p_v.transpose());
    }

    #[test]
    fn rank_one_values_lose_nothing_at_k1() {
        let mut rng = Rng::new(6);
        let x = rng.normal_tensor(4, 1, 1.0).mm(&rng.normal_tensor(1, 10, 1.0));
        let (p_v, p_o) = v_projection(&x).unwrap();
        let k1 = p_o.select_cols(&[0]).mm(&p_v.top_rows(1)).mm(&x);
        assert!(k1.max_abs_diff(&x) < 1e-9);
    }
}
