//! Expected number of retained parameters as a function of the masks.
//!
//! Every prunable weight matrix of the fused model has one side indexed by
//! an input mask and one by an output mask, so its expected size is the
//! product of the two mask sums (times the gates that remove it entirely).
//! With binary masks the expectation is exactly the fused parameter count.

use crate::error::Result;
use crate::model::{Arch, ModelConfig};
use crate::numerics::{Tape, Tensor, Var};

use super::masks::{MaskLevel, MaskSet, MaskTree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    M,
    F,
}

/// Which mask indexes one side of a fused matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskRef {
    /// The full-width embedding stream (implicit all-ones mask).
    Ones,
    SiteIn(usize, Block),
    SiteOut(usize, Block),
    FinalIn,
}

/// Input/output masks of every fused weight in one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerWiring {
    /// Columns of `Ŵ_Q`, `Ŵ_K`, `Ŵ_V`.
    pub qkv_in: MaskRef,
    /// Rows of `Ŵ_Oᵀ`.
    pub o_out: MaskRef,
    /// Columns of `Ŵ_U`.
    pub u_in: MaskRef,
    /// Rows of `Ŵ_Dᵀ`.
    pub d_out: MaskRef,
}

/// A dense residual matrix mapping stream coordinates `from` to `to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Residual {
    pub from: MaskRef,
    pub to: MaskRef,
}

/// Wiring of the fused model: which masks size which matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub arch: Arch,
    pub d_model: usize,
    pub n_heads: usize,
    pub layers: Vec<LayerWiring>,
    pub residuals: Vec<Residual>,
}

impl Topology {
    /// `groups[i]` is the projection group of layer `i`; only pre-RMSNorm
    /// stacks use it, to decide where residual matrices are needed.
    pub fn new(config: &ModelConfig, groups: &[usize]) -> Self {
        use Block::*;
        use MaskRef::*;
        let n = config.n_layers;
        let mut layers = Vec::with_capacity(n);
        let mut residuals = Vec::new();
        match config.arch {
            Arch::PostLn => {
                for i in 0..n {
                    let qkv_in = if i == 0 { Ones } else { SiteOut(i - 1, F) };
                    layers.push(LayerWiring {
                        qkv_in,
                        o_out: SiteIn(i, M),
                        u_in: SiteOut(i, M),
                        d_out: SiteIn(i, F),
                    });
                    residuals.push(Residual {
                        from: qkv_in,
                        to: SiteIn(i, M),
                    });
                    residuals.push(Residual {
                        from: SiteOut(i, M),
                        to: SiteIn(i, F),
                    });
                }
            }
            Arch::PreRms => {
                for i in 0..n {
                    layers.push(LayerWiring {
                        qkv_in: SiteOut(i, M),
                        o_out: SiteIn(i, F),
                        u_in: SiteOut(i, F),
                        d_out: if i + 1 < n { SiteIn(i + 1, M) } else { FinalIn },
                    });
                    if i > 0 && groups.get(i - 1) != groups.get(i) {
                        residuals.push(Residual {
                            from: SiteIn(i - 1, F),
                            to: SiteIn(i, M),
                        });
                    }
                }
            }
        }
        Self {
            arch: config.arch,
            d_model: config.d_model,
            n_heads: config.n_heads,
            layers,
            residuals,
        }
    }

    /// Prunable parameter count with every mask at one (`M`).
    pub fn total(&self, config: &ModelConfig) -> usize {
        let ones = MaskSet::ones(config);
        self.retained(&ones).round() as usize
    }

    /// Expected retained parameters for tensor-valued masks.
    pub fn retained(&self, masks: &MaskSet) -> f64 {
        self.terms(masks).iter().map(|(_, v)| v).sum()
    }

    /// Per-term breakdown of [`retained`](Self::retained).
    pub fn terms(&self, masks: &MaskSet) -> Vec<(String, f64)> {
        let ops = Ops {
            sum: &|t: &Tensor| t.sum(),
            konst: &|c| c,
            add: &|a, b| a + b,
            mul: &|a, b| a * b,
        };
        self.terms_with(masks, &ops)
    }

    /// Expected sparsity `1 − retained/M` recorded on a tape.
    pub fn expected_sparsity_var<'t>(&self, tape: &'t Tape, masks: &MaskTree<Var<'t>>, total: f64) -> Var<'t> {
        let ops = Ops {
            sum: &|v: &Var<'t>| v.sum(),
            konst: &|c| tape.scalar(c),
            add: &|a, b| a + b,
            mul: &|a, b| a * b,
        };
        let retained = self
            .terms_with(masks, &ops)
            .into_iter()
            .map(|(_, v)| v)
            .reduce(|a, b| a + b)
            .unwrap_or_else(|| tape.scalar(0.0));
        tape.scalar(1.0) - retained.scale(1.0 / total)
    }

    fn terms_with<T, S: Copy>(&self, masks: &MaskTree<T>, ops: &Ops<'_, T, S>) -> Vec<(String, S)> {
        let size = |r: MaskRef| -> S {
            match r {
                MaskRef::Ones => (ops.konst)(self.d_model as f64),
                MaskRef::SiteIn(i, Block::M) => (ops.sum)(&masks.layers[i].m.z_in),
                MaskRef::SiteIn(i, Block::F) => (ops.sum)(&masks.layers[i].f.z_in),
                MaskRef::SiteOut(i, Block::M) => (ops.sum)(&masks.layers[i].m.z_out),
                MaskRef::SiteOut(i, Block::F) => (ops.sum)(&masks.layers[i].f.z_out),
                MaskRef::FinalIn => (ops.sum)(masks.final_in.as_ref().expect("final mask for pre-RMSNorm")),
            }
        };
        let mut out = Vec::new();
        for (i, w) in self.layers.iter().enumerate() {
            let l = &masks.layers[i];
            let (qkv_in, o_out) = (size(w.qkv_in), size(w.o_out));
            let mut mha: Option<S> = None;
            for h in &l.heads {
                let qkv = (ops.add)((ops.add)((ops.sum)(&h.z_q), (ops.sum)(&h.z_k)), (ops.sum)(&h.z_v));
                let inner = (ops.add)((ops.mul)(qkv_in, qkv), (ops.mul)(o_out, (ops.sum)(&h.z_o)));
                let gated = (ops.mul)((ops.sum)(&h.z_head), inner);
                mha = Some(match mha {
                    Some(acc) => (ops.add)(acc, gated),
                    None => gated,
                });
            }
            if let Some(mha) = mha {
                out.push((format!("L{i}.mha"), (ops.mul)((ops.sum)(&l.z_mha), mha)));
            }
            let ffn_io = (ops.add)(size(w.u_in), size(w.d_out));
            let ffn = (ops.mul)((ops.mul)((ops.sum)(&l.z_ffn), (ops.sum)(&l.z_f)), ffn_io);
            out.push((format!("L{i}.ffn"), ffn));
        }
        for (k, r) in self.residuals.iter().enumerate() {
            out.push((format!("residual{k}"), (ops.mul)(size(r.from), size(r.to))));
        }
        out
    }
}

struct Ops<'o, T, S> {
    sum: &'o dyn Fn(&T) -> S,
    konst: &'o dyn Fn(f64) -> S,
    add: &'o dyn Fn(S, S) -> S,
    mul: &'o dyn Fn(S, S) -> S,
}

/// Mean mask value and count of exact ones at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelStats {
    pub level: MaskLevel,
    pub entries: usize,
    pub mean: f64,
    pub ones: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    /// Expected retained prunable parameters.
    pub retained: f64,
    /// Prunable parameters with every mask at one.
    pub total: usize,
    /// Expected removed fraction, `1 − retained/total`.
    pub s_hat: f64,
    pub terms: Vec<(String, f64)>,
    pub levels: Vec<LevelStats>,
}

pub fn expected_retained(masks: &MaskSet, config: &ModelConfig, groups: &[usize]) -> Result<SparsityReport> {
    masks.validate(config)?;
    let topo = Topology::new(config, groups);
    Ok(report_for(&topo, config, masks))
}

pub(crate) fn report_for(topo: &Topology, config: &ModelConfig, masks: &MaskSet) -> SparsityReport {
    let total = topo.total(config);
    let terms = topo.terms(masks);
    let retained: f64 = terms.iter().map(|(_, v)| v).sum();
    let s_hat = if total == 0 { 0.0 } else { 1.0 - retained / total as f64 };
    let levels = [MaskLevel::Dimension, MaskLevel::Head, MaskLevel::Layer]
        .into_iter()
        .map(|level| {
            let vals: Vec<f64> = masks
                .leaves()
                .iter()
                .filter(|(_, l, _)| *l == level)
                .flat_map(|(_, _, t)| t.data().to_vec())
                .collect();
            LevelStats {
                level,
                entries: vals.len(),
                mean: if vals.is_empty() {
                    0.0
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                },
                ones: vals.iter().filter(|&&v| v == 1.0).count(),
            }
        })
        .collect();
    SparsityReport {
        retained,
        total,
        s_hat,
        terms,
        levels,
    }
}
