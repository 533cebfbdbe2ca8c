//! Folding binary masks and projections into a structurally smaller model.
//!
//! Each layer of a [`FusedModel`] works in its own reduced coordinates: a
//! norm site reads `dim_in` kept input components and emits the kept output
//! components, and every weight is a rectangular block between such
//! coordinate sets.

mod build;
mod run;
mod size;

pub use build::fuse;
pub use run::fused_forward;
pub use size::{size_report, SizeReport};

use crate::model::Arch;
use crate::numerics::Tensor;

/// How one coordinate set feeds another along the residual path.
#[derive(Clone, Debug, PartialEq)]
pub enum Link {
    /// Entry `k` of the target is entry `map[k]` of the source, or zero.
    Select(Vec<Option<usize>>),
    /// `w·x (+ b)`; `w` is target × source.
    Dense { w: Tensor, b: Option<Tensor> },
}

impl Link {
    pub fn is_dense(&self) -> bool {
        matches!(self, Link::Dense { .. })
    }

    /// Number of weight entries (selections are free).
    pub fn n_params(&self) -> usize {
        match self {
            Link::Select(_) => 0,
            Link::Dense { w, .. } => w.len(),
        }
    }
}

/// Coordinates around one inner norm: `dim_in` kept inputs, and the kept
/// outputs as indices into the inputs (`None` when an output component has
/// no surviving input and is therefore always zero).
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSite {
    pub dim_in: usize,
    pub out_from_in: Vec<Option<usize>>,
}

impl FusedSite {
    pub fn dim_out(&self) -> usize {
        self.out_from_in.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedHead {
    /// Index of the head in the source model.
    pub index: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub b_q: Option<Tensor>,
    pub b_k: Option<Tensor>,
    pub b_v: Option<Tensor>,
    /// Output block, `out × rows(w_v)`-compatible through `vo_pairs`.
    pub w_o: Tensor,
    /// Row of `q` paired with row of `k` in the score product.
    pub qk_pairs: Vec<(usize, usize)>,
    /// Row of `v` feeding column of `w_o`.
    pub vo_pairs: Vec<(usize, usize)>,
}

impl FusedHead {
    pub fn n_params(&self) -> usize {
        self.w_q.len() + self.w_k.len() + self.w_v.len() + self.w_o.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFfn {
    pub w_u: Tensor,
    pub b_u: Option<Tensor>,
    pub w_d: Tensor,
}

impl FusedFfn {
    pub fn n_params(&self) -> usize {
        self.w_u.len() + self.w_d.len()
    }
}

/// One fused layer.
///
/// Post-LN: the MHA site input is `into_m(x) + MHA(x)` for the previous
/// layer's output `x`, and the FFN site input is `into_f(y) + FFN(y)` for
/// the MHA site's output `y`.
///
/// Pre-RMSNorm: the residual stream `r` enters as `into_m(r) + FFN_prev`,
/// the MHA reads the MHA site's output, and the FFN site stream is
/// `into_f(r) + MHA`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedLayer {
    pub m: FusedSite,
    pub f: FusedSite,
    pub heads: Vec<FusedHead>,
    pub ffn: Option<FusedFfn>,
    pub into_m: Link,
    pub into_f: Link,
}

/// Per-layer widths, for reports and the checkpoint header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    pub m_in: usize,
    pub m_out: usize,
    pub f_in: usize,
    pub f_out: usize,
    pub heads: usize,
    pub d_ff: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel {
    pub arch: Arch,
    /// Width of the source model; the inner norms divide by it.
    pub d_model: usize,
    /// Head width of the source model; scores are scaled by its root.
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Token and position embeddings, one column per id.
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<FusedLayer>,
    /// Pre-RMSNorm only: the final norm's input width and the link from the
    /// last FFN site stream.
    pub final_in: Option<(usize, Link)>,
    pub classifier: Tensor,
    pub cls_bias: Tensor,
}

impl FusedModel {
    /// Weight entries of the prunable matrices: attention and FFN blocks
    /// plus dense residual links. Embeddings, classifier, biases and norms
    /// are not counted.
    pub fn prunable_params(&self) -> usize {
        let mut n = 0;
        for l in &self.layers {
            n += l.heads.iter().map(FusedHead::n_params).sum::<usize>();
            n += l.ffn.as_ref().map_or(0, FusedFfn::n_params);
            n += l.into_m.n_params() + l.into_f.n_params();
        }
        n + self.final_in.as_ref().map_or(0, |(_, link)| link.n_params())
    }

    /// Number of dense residual matrices.
    pub fn n_residual_matrices(&self) -> usize {
        let links = self.layers.iter().flat_map(|l| [&l.into_m, &l.into_f]);
        let extra = self.final_in.iter().map(|(_, link)| link);
        links.chain(extra).filter(|l| l.is_dense()).count()
    }

    pub fn layer_dims(&self) -> Vec<LayerDims> {
        self.layers
            .iter()
            .map(|l| LayerDims {
                m_in: l.m.dim_in,
                m_out: l.m.dim_out(),
                f_in: l.f.dim_in,
                f_out: l.f.dim_out(),
                heads: l.heads.len(),
                d_ff: l.ffn.as_ref().map_or(0, |f| f.w_u.rows()),
            })
            .collect()
    }
}

/// Drops the exactly-zero rows and columns of `a`; returns the kept matrix
/// with the surviving row and column indices.
pub fn prune_zeros(a: &Tensor) -> (Tensor, Vec<usize>, Vec<usize>) {
    let rows: Vec<usize> = (0..a.rows()).filter(|&r| a.row(r).iter().any(|&v| v != 0.0)).collect();
    let cols: Vec<usize> = (0..a.cols())
        .filter(|&c| (0..a.rows()).any(|r| a.get(r, c) != 0.0))
        .collect();
    (a.select_rows(&rows).select_cols(&cols), rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn prune_zeros_without_zeros_is_identity() {
        let a = Rng::new(1).normal_tensor(3, 4, 1.0);
        let (b, r, c) = prune_zeros(&a);
        assert_eq!(b, a);
        assert_eq!((r, c), (vec![0, 1, 2], vec![0, 1, 2, 3]));
    }

    #[test]
    fn prune_zeros_of_zero_matrix_is_empty() {
        let (b, r, c) = prune_zeros(&Tensor::zeros(3, 2));
        assert_eq!(b.shape(), (0, 0));
        assert!(r.is_empty() && c.is_empty());
    }

    #[test]
    fn prune_zeros_round_trips() {
        let mut a = Rng::new(2).normal_tensor(5, 4, 1.0);
        for c in 0..4 {
            a.set(1, c, 0.0);
            a.set(3, c, 0.0);
        }
        let (b, rows, cols) = prune_zeros(&a);
        assert_eq!(rows, vec![0, 2, 4]);
        assert_eq!(cols.len(), 4);
        let mut back = Tensor::zeros(5, 4);
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                back.set(r, c, b.get(i, j));
            }
        }
        assert_eq!(back, a);
    }
}
