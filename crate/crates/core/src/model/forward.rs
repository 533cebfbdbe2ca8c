//! Tape-recorded forward passes.
//!
//! One graph builder serves every variant. Sequences of a batch are laid
//! side by side as columns; an additive block-diagonal bias keeps attention
//! inside each sequence and a pooling matrix averages each sequence's
//! columns before the classifier.

use super::config::{Arch, ModelConfig};
use super::params::{HeadParams, ModelParams, TransformerModel};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::projection::{HeadProj, ProjTree, ProjectionSet, SiteProj};
use crate::pruning::{HeadMasks, MaskSet, MaskTree, SiteMasks};

/// Epsilon inside every normalization.
pub const NORM_EPS: f64 = 1e-12;

const BLOCKED: f64 = -1e30;

/// Which forward variant to record.
pub enum Plan<'a, 't> {
    Plain,
    /// Masks applied around the unprojected norms, in the baseline form
    /// `z_out ⊙ LN(z_in ⊙ (x + z_MHA·MHA(x)))`. Per-head dimension masks
    /// are ignored here.
    Masked(&'a MaskTree<Var<'t>>),
    /// Projections around every norm and inside every head, with optional
    /// per-block masks (`None` means all ones).
    Projected {
        proj: &'a ProjTree<Var<'t>>,
        masks: Option<&'a MaskTree<Var<'t>>>,
    },
}

/// Tensor-valued counterpart of [`Plan`].
#[derive(Clone, Copy)]
pub enum EvalPlan<'a> {
    Plain,
    Masked(&'a MaskSet),
    Projected(&'a ProjectionSet, Option<&'a MaskSet>),
}

#[derive(Clone, Debug, Default)]
pub struct HeadTrace {
    /// `W_Q·x`, `W_K·x`, `W_V·x` on the head's input (`d_h×C`).
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Scaled scores after any head projection and masks, before the
    /// sequence bias (`C×C`).
    pub scores: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct LayerTrace {
    /// Residual stream entering the MHA-side norm (`d×C`).
    pub x_m: Tensor,
    /// Residual stream entering the FFN-side norm.
    pub x_f: Tensor,
    pub heads: Vec<HeadTrace>,
}

/// Intermediate features captured during a forward pass. Columns follow the
/// batch layout: sequence by sequence, position by position.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Stream entering the final norm (pre-RMSNorm stacks only).
    pub x_final: Option<Tensor>,
    /// Normalized vectors at every site after the inner norm; only filled by
    /// projected passes.
    pub inner_norms: Vec<Tensor>,
}

/// Token ids of a batch in column layout plus the constant matrices the
/// graph needs.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub seq_lens: Vec<usize>,
}

impl BatchInput {
    pub fn new(model: &TransformerModel, seqs: &[Vec<usize>]) -> Result<Self> {
        Self::for_config(&model.config, seqs)
    }

    pub fn for_config(config: &ModelConfig, seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut seq_lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            config.check_tokens(s)?;
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
            seq_lens.push(s.len());
        }
        Ok(Self {
            ids,
            positions,
            seq_lens,
        })
    }

    pub fn columns(&self) -> usize {
        self.ids.len()
    }

    pub fn batch_size(&self) -> usize {
        self.seq_lens.len()
    }

    /// `C×C` additive attention bias: zero within a sequence, a large
    /// negative value across sequences.
    pub fn attention_bias(&self) -> Tensor {
        let c = self.columns();
        let seq = self.sequence_of_column();
        Tensor::from_fn(c, c, |i, j| if seq[i] == seq[j] { 0.0 } else { BLOCKED })
    }

    /// `C×B` mean-pooling matrix.
    pub fn pooling(&self) -> Tensor {
        let seq = self.sequence_of_column();
        Tensor::from_fn(self.columns(), self.batch_size(), |c, b| {
            if seq[c] == b {
                1.0 / self.seq_lens[b] as f64
            } else {
                0.0
            }
        })
    }

    fn sequence_of_column(&self) -> Vec<usize> {
        self.seq_lens
            .iter()
            .enumerate()
            .flat_map(|(b, &n)| std::iter::repeat_n(b, n))
            .collect()
    }
}

struct Graph<'a, 't> {
    cfg: &'a ModelConfig,
    p: &'a ModelParams<Var<'t>>,
    proj: Option<&'a ProjTree<Var<'t>>>,
    masks: Option<&'a MaskTree<Var<'t>>>,
    bias: Var<'t>,
    trace: Option<&'a mut ForwardTrace>,
}

/// Records the forward pass and returns `n_classes×B` logits.
pub fn build_graph<'a, 't>(
    tape: &'t Tape,
    cfg: &'a ModelConfig,
    params: &'a ModelParams<Var<'t>>,
    plan: &Plan<'a, 't>,
    input: &BatchInput,
    trace: Option<&'a mut ForwardTrace>,
) -> Var<'t> {
    let (proj, masks) = match *plan {
        Plan::Plain => (None, None),
        Plan::Masked(m) => (None, Some(m)),
        Plan::Projected { proj, masks } => (Some(proj), masks),
    };
    let mut g = Graph {
        cfg,
        p: params,
        proj,
        masks,
        bias: tape.leaf(input.attention_bias()),
        trace,
    };
    if let Some(t) = g.trace.as_deref_mut() {
        *t = ForwardTrace {
            layers: vec![LayerTrace::default(); cfg.n_layers],
            ..ForwardTrace::default()
        };
    }
    let x0 = tape.embed(params.tok_emb, &input.ids) + tape.embed(params.pos_emb, &input.positions);
    let h = match cfg.arch {
        Arch::PostLn => g.post_ln(x0),
        Arch::PreRms => g.pre_rms(x0),
    };
    let pooled = h.matmul(tape.leaf(input.pooling()));
    params.classifier.matmul(pooled).add_col(params.cls_bias)
}

impl<'a, 't> Graph<'a, 't> {
    fn record(&mut self, f: impl FnOnce(&mut ForwardTrace)) {
        if let Some(t) = self.trace.as_deref_mut() {
            f(t);
        }
    }

    fn post_ln(&mut self, mut x: Var<'t>) -> Var<'t> {
        let p = self.p;
        for i in 0..self.cfg.n_layers {
            let l = &p.layers[i];
            let mha = self.mha(i, x);
            let a = x + mha;
            self.record(|t| t.layers[i].x_m = a.value());
            let beta_m = l.beta_m.expect("post-LN layer without beta");
            let x_m = self.post_ln_site(i, false, a, l.gamma_m, beta_m);
            let ffn = self.ffn(i, x_m);
            let b = x_m + ffn;
            self.record(|t| t.layers[i].x_f = b.value());
            let beta_f = l.beta_f.expect("post-LN layer without beta");
            x = self.post_ln_site(i, true, b, l.gamma_f, beta_f);
        }
        x
    }

    fn site_masks(&self, i: usize, ffn_side: bool) -> Option<&'a SiteMasks<Var<'t>>> {
        self.masks
            .map(|m| if ffn_side { &m.layers[i].f } else { &m.layers[i].m })
    }

    fn site_proj(&self, i: usize, ffn_side: bool) -> Option<&'a SiteProj<Var<'t>>> {
        self.proj
            .map(|p| if ffn_side { &p.layers[i].f } else { &p.layers[i].m })
    }

    fn post_ln_site(&mut self, i: usize, ffn_side: bool, a: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Var<'t> {
        let d = self.cfg.d_model as f64;
        let sm = self.site_masks(i, ffn_side).cloned();
        match self.site_proj(i, ffn_side).cloned() {
            None => {
                let a = match &sm {
                    Some(m) => a.mul_rows(m.z_in),
                    None => a,
                };
                let y = a.layer_norm_cols(NORM_EPS).mul_rows(gamma).add_col(beta);
                match &sm {
                    Some(m) => y.mul_rows(m.z_out),
                    None => y,
                }
            }
            Some(sp) => {
                let mut s = sp.p_in.matmul(a);
                if let Some(m) = &sm {
                    s = s.mul_rows(m.z_in);
                }
                let n = s.norm_cols(d, NORM_EPS);
                self.record(|t| t.inner_norms.push(n.value()));
                let n = match &sm {
                    Some(m) => n.mul_rows(m.z_out),
                    None => n,
                };
                sp.basis.mul_rows(gamma).matmul(n).add_col(beta)
            }
        }
    }

    fn pre_rms(&mut self, x0: Var<'t>) -> Var<'t> {
        match self.proj {
            None => self.pre_rms_unprojected(x0),
            Some(_) => self.pre_rms_projected(x0),
        }
    }

    fn pre_rms_unprojected(&mut self, mut x: Var<'t>) -> Var<'t> {
        let p = self.p;
        for i in 0..self.cfg.n_layers {
            let l = &p.layers[i];
            self.record(|t| t.layers[i].x_m = x.value());
            let u = self.rms_site(i, false, x, l.gamma_m);
            x = x + self.mha(i, u);
            self.record(|t| t.layers[i].x_f = x.value());
            let u = self.rms_site(i, true, x, l.gamma_f);
            x = x + self.ffn(i, u);
        }
        self.record(|t| t.x_final = Some(x.value()));
        let gamma = self.p.final_gamma.expect("pre-RMSNorm model without final norm");
        let x = match self.masks.and_then(|m| m.final_in) {
            Some(z) => x.mul_rows(z),
            None => x,
        };
        x.rms_norm_cols(NORM_EPS).mul_rows(gamma)
    }

    fn rms_site(&self, i: usize, ffn_side: bool, x: Var<'t>, gamma: Var<'t>) -> Var<'t> {
        let sm = self.site_masks(i, ffn_side);
        let x = match sm {
            Some(m) => x.mul_rows(m.z_in),
            None => x,
        };
        let y = x.rms_norm_cols(NORM_EPS).mul_rows(gamma);
        match sm {
            Some(m) => y.mul_rows(m.z_out),
            None => y,
        }
    }

    /// Stream kept in the rotated coordinates of the current basis group.
    fn pre_rms_projected(&mut self, x0: Var<'t>) -> Var<'t> {
        let proj = self.proj.expect("projected pass without projections");
        let p = self.p;
        let d = self.cfg.d_model as f64;
        let n_layers = self.cfg.n_layers;
        let mut s = match proj.layers.first() {
            Some(l) => l.m.p_in.matmul(x0),
            None => x0,
        };
        for i in 0..n_layers {
            let lp = &proj.layers[i];
            let l = &p.layers[i];
            for ffn_side in [false, true] {
                let sp = if ffn_side { &lp.f } else { &lp.m };
                let gamma = if ffn_side { l.gamma_f } else { l.gamma_m };
                let basis = sp.basis;
                self.record(|t| {
                    let x = basis.value().mm(&s.value());
                    if ffn_side {
                        t.layers[i].x_f = x;
                    } else {
                        t.layers[i].x_m = x;
                    }
                });
                let sm = self.site_masks(i, ffn_side).cloned();
                if let Some(m) = &sm {
                    s = s.mul_rows(m.z_in);
                }
                let n = s.norm_cols(d, NORM_EPS);
                self.record(|t| t.inner_norms.push(n.value()));
                let n = match &sm {
                    Some(m) => n.mul_rows(m.z_out),
                    None => n,
                };
                let u = sp.basis.mul_rows(gamma).matmul(n);
                let y = if ffn_side { self.ffn(i, u) } else { self.mha(i, u) };
                s = s + sp.p_in.matmul(y);
            }
            if proj.crosses_group(i) {
                s = proj.layers[i + 1].m.p_in.matmul(lp.f.basis.matmul(s));
            }
        }
        let gamma = self.p.final_gamma.expect("pre-RMSNorm model without final norm");
        let Some(last) = proj.layers.last() else {
            return s.rms_norm_cols(NORM_EPS).mul_rows(gamma);
        };
        self.record(|t| t.x_final = Some(last.f.basis.value().mm(&s.value())));
        if let Some(z) = self.masks.and_then(|m| m.final_in) {
            s = s.mul_rows(z);
        }
        let n = s.norm_cols(d, NORM_EPS);
        last.f.basis.mul_rows(gamma).matmul(n)
    }

    /// `z_MHA · Σ_h z_head · Att_h(x)`.
    fn mha(&mut self, i: usize, x: Var<'t>) -> Var<'t> {
        let mut total: Option<Var<'t>> = None;
        for h in 0..self.cfg.n_heads {
            let p = self.p;
            let hp = &p.layers[i].heads[h];
            let hproj = self.proj.map(|p| &p.layers[i].heads[h]);
            let hm = self.masks.map(|m| &m.layers[i].heads[h]);
            let mut out = self.attention(i, x, hp, hproj, hm);
            if let Some(m) = hm {
                out = out.mul_scalar(m.z_head);
            }
            total = Some(match total {
                Some(t) => t + out,
                None => out,
            });
        }
        let total = total.expect("at least one head");
        match self.masks {
            Some(m) => total.mul_scalar(m.layers[i].z_mha),
            None => total,
        }
    }

    fn attention(
        &mut self,
        i: usize,
        x: Var<'t>,
        hp: &HeadParams<Var<'t>>,
        hproj: Option<&HeadProj<Var<'t>>>,
        hm: Option<&HeadMasks<Var<'t>>>,
    ) -> Var<'t> {
        let (q0, k0, v0) = (hp.w_q.matmul(x), hp.w_k.matmul(x), hp.w_v.matmul(x));
        let (mut q, mut k, mut v) = match hproj {
            Some(p) => (p.p_q.matmul(q0), p.p_k.matmul(k0), p.p_v.matmul(v0)),
            None => (q0, k0, v0),
        };
        // Intermediate-dimension masks only exist in the projected form.
        if let (Some(m), Some(_)) = (hm, hproj) {
            q = q.mul_rows(m.z_q);
            k = k.mul_rows(m.z_k);
            v = v.mul_rows(m.z_v).mul_rows(m.z_o);
        }
        let dh = self.cfg.head_dim() as f64;
        let scores = k.t().matmul(q).scale(1.0 / dh.sqrt());
        self.record(|t| {
            t.layers[i].heads.push(HeadTrace {
                q: q0.value(),
                k: k0.value(),
                v: v0.value(),
                scores: scores.value(),
            })
        });
        let attn = (scores + self.bias).softmax_cols();
        let mut ctx = v.matmul(attn);
        if let Some(p) = hproj {
            ctx = p.p_o.matmul(ctx);
        }
        hp.w_o.t().matmul(ctx)
    }

    /// `z_FFN · W_Dᵀ (z_f ⊙ gelu(W_U x))`.
    fn ffn(&self, i: usize, x: Var<'t>) -> Var<'t> {
        let l = &self.p.layers[i];
        let mut h = l.w_u.matmul(x).gelu();
        if let Some(m) = self.masks {
            h = h.mul_rows(m.layers[i].z_f);
        }
        let out = l.w_d.t().matmul(h);
        match self.masks {
            Some(m) => out.mul_scalar(m.layers[i].z_ffn),
            None => out,
        }
    }
}

/// Places every tensor of a parameter tree on `tape` as a leaf.
pub fn leaves_on<'t>(tape: &'t Tape, params: &ModelParams<Tensor>) -> ModelParams<Var<'t>> {
    params.map(&mut |t| tape.leaf(t.clone()))
}

/// Runs a forward pass on a fresh tape and returns `n_classes×B` logits,
/// plus the captured features when `want_trace` is set.
pub fn evaluate(
    model: &TransformerModel,
    plan: EvalPlan<'_>,
    seqs: &[Vec<usize>],
    want_trace: bool,
) -> Result<(Tensor, Option<ForwardTrace>)> {
    let input = BatchInput::new(model, seqs)?;
    match plan {
        EvalPlan::Plain => {}
        EvalPlan::Masked(m) => m.validate(&model.config)?,
        EvalPlan::Projected(p, m) => {
            p.validate(&model.config)?;
            if let Some(m) = m {
                m.validate(&model.config)?;
            }
        }
    }
    let tape = Tape::new();
    let params = leaves_on(&tape, &model.params);
    let on_tape = |t: &Tensor| tape.leaf(t.clone());
    let masks_var = match plan {
        EvalPlan::Masked(m) | EvalPlan::Projected(_, Some(m)) => Some(m.map(&mut { on_tape })),
        _ => None,
    };
    let proj_var = match plan {
        EvalPlan::Projected(p, _) => Some(p.map(&mut { on_tape })),
        _ => None,
    };
    let graph_plan = match (&proj_var, &masks_var) {
        (Some(proj), masks) => Plan::Projected {
            proj,
            masks: masks.as_ref(),
        },
        (None, Some(m)) => Plan::Masked(m),
        (None, None) => Plan::Plain,
    };
    let mut trace = ForwardTrace::default();
    let logits = build_graph(
        &tape,
        &model.config,
        &params,
        &graph_plan,
        &input,
        want_trace.then_some(&mut trace),
    );
    let value = logits.value();
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok((value, want_trace.then_some(trace)))
}

/// Plain forward pass over a batch; `n_classes×B` logits.
pub fn forward(model: &TransformerModel, seqs: &[Vec<usize>]) -> Result<Tensor> {
    Ok(evaluate(model, EvalPlan::Plain, seqs, false)?.0)
}

pub fn forward_masked(model: &TransformerModel, masks: &MaskSet, seqs: &[Vec<usize>]) -> Result<Tensor> {
    Ok(evaluate(model, EvalPlan::Masked(masks), seqs, false)?.0)
}

pub fn forward_projected(
    model: &TransformerModel,
    proj: &ProjectionSet,
    masks: Option<&MaskSet>,
    seqs: &[Vec<usize>],
) -> Result<Tensor> {
    Ok(evaluate(model, EvalPlan::Projected(proj, masks), seqs, false)?.0)
}

/// Plain forward pass that also returns the captured features.
pub fn forward_traced(model: &TransformerModel, seqs: &[Vec<usize>]) -> Result<(Tensor, ForwardTrace)> {
    let (logits, trace) = evaluate(model, EvalPlan::Plain, seqs, true)?;
    Ok((logits, trace.unwrap_or_default()))
}
