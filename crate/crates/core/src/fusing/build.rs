use super::{FusedFfn, FusedHead, FusedLayer, FusedModel, FusedSite, Link};
use crate::error::{Error, Result};
use crate::model::{Arch, TransformerModel};
use crate::numerics::Tensor;
use crate::projection::{ProjectionSet, SiteProj};
use crate::pruning::{keep_list, HeadMasks, MaskSet, SiteMasks};

/// Folds binary masks and projections into a [`FusedModel`] whose forward
/// pass equals the projected, masked forward pass of `model`.
pub fn fuse(model: &TransformerModel, proj: &ProjectionSet, masks: &MaskSet) -> Result<FusedModel> {
    let cfg = &model.config;
    proj.validate(cfg)?;
    masks.validate(cfg)?;
    if !masks.is_binary() {
        return Err(Error::Contract("fusing needs binary masks; binarize first".into()));
    }
    if cfg.n_layers == 0 {
        return Err(Error::Contract("nothing to fuse in a model without layers".into()));
    }
    match cfg.arch {
        Arch::PostLn => fuse_post_ln(model, proj, masks),
        Arch::PreRms => fuse_pre_rms(model, proj, masks),
    }
}

/// `diag(γ)·basis` restricted to the kept output components.
fn out_map(sp: &SiteProj<Tensor>, gamma: &Tensor, keep_out: &[usize]) -> Tensor {
    sp.basis
        .scale_rows(gamma.data())
        .expect("γ matches the basis")
        .select_cols(keep_out)
}

fn site(m: &SiteMasks<Tensor>) -> (Vec<usize>, Vec<usize>, FusedSite) {
    let keep_in = keep_list(&m.z_in);
    let keep_out = keep_list(&m.z_out);
    let fs = FusedSite {
        dim_in: keep_in.len(),
        out_from_in: selection(&keep_out, &keep_in),
    };
    (keep_in, keep_out, fs)
}

/// For every target index, its position in `source` if present.
fn selection(target: &[usize], source: &[usize]) -> Vec<Option<usize>> {
    target.iter().map(|t| source.iter().position(|s| s == t)).collect()
}

fn pairs(a: &[usize], b: &[usize]) -> Vec<(usize, usize)> {
    a.iter()
        .enumerate()
        .filter_map(|(i, x)| b.iter().position(|y| y == x).map(|j| (i, j)))
        .collect()
}

fn is_on(z: &Tensor) -> bool {
    z.get(0, 0) == 1.0
}

/// Attention heads reading `input_map·c (+ input_bias)` and writing through
/// `out_proj` into the rows `out_rows`.
#[allow(clippy::too_many_arguments)]
fn heads(
    model: &TransformerModel,
    proj: &ProjectionSet,
    masks: &MaskSet,
    i: usize,
    input_map: &Tensor,
    input_bias: Option<&Tensor>,
    out_proj: &Tensor,
    out_rows: &[usize],
) -> Vec<FusedHead> {
    let lm = &masks.layers[i];
    if !is_on(&lm.z_mha) {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (h, hm) in lm.heads.iter().enumerate() {
        if !is_on(&hm.z_head) {
            continue;
        }
        let hp = &model.params.layers[i].heads[h];
        let hj = &proj.layers[i].heads[h];
        let HeadMasks { z_q, z_k, z_v, z_o, .. } = hm;
        let (kq, kk, kv, ko) = (keep_list(z_q), keep_list(z_k), keep_list(z_v), keep_list(z_o));
        let side = |p: &Tensor, w: &Tensor, keep: &[usize]| {
            let pw = p.mm(w);
            let weight = pw.mm(input_map).select_rows(keep);
            let bias = input_bias.map(|b| pw.mm(b).select_rows(keep));
            (weight, bias)
        };
        let (w_q, b_q) = side(&hj.p_q, &hp.w_q, &kq);
        let (w_k, b_k) = side(&hj.p_k, &hp.w_k, &kk);
        let (w_v, b_v) = side(&hj.p_v, &hp.w_v, &kv);
        let w_o = out_proj
            .mm(&hp.w_o.transpose())
            .mm(&hj.p_o)
            .select_rows(out_rows)
            .select_cols(&ko);
        out.push(FusedHead {
            index: h,
            w_q,
            w_k,
            w_v,
            b_q,
            b_k,
            b_v,
            w_o,
            qk_pairs: pairs(&kq, &kk),
            vo_pairs: pairs(&kv, &ko),
        });
    }
    out
}

fn ffn(
    model: &TransformerModel,
    masks: &MaskSet,
    i: usize,
    input_map: &Tensor,
    input_bias: Option<&Tensor>,
    out_proj: &Tensor,
    out_rows: &[usize],
) -> Option<FusedFfn> {
    let lm = &masks.layers[i];
    if !is_on(&lm.z_ffn) {
        return None;
    }
    let l = &model.params.layers[i];
    let kf = keep_list(&lm.z_f);
    Some(FusedFfn {
        w_u: l.w_u.mm(input_map).select_rows(&kf),
        b_u: input_bias.map(|b| l.w_u.mm(b).select_rows(&kf)),
        w_d: out_proj.mm(&l.w_d.transpose()).select_rows(out_rows).select_cols(&kf),
    })
}

fn fuse_post_ln(model: &TransformerModel, proj: &ProjectionSet, masks: &MaskSet) -> Result<FusedModel> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    // Previous output as `map·c + bias`; the embedding stream is the identity.
    let mut prev_map = Tensor::eye(d);
    let mut prev_bias: Option<Tensor> = None;
    for i in 0..cfg.n_layers {
        let (lp, lm, l) = (&proj.layers[i], &masks.layers[i], &model.params.layers[i]);
        let beta = |b: &Option<Tensor>| b.clone().expect("post-LN layer has β");
        let (m_in, m_out, m_site) = site(&lm.m);
        let (f_in, f_out, f_site) = site(&lm.f);

        let hs = heads(model, proj, masks, i, &prev_map, prev_bias.as_ref(), &lp.m.p_in, &m_in);
        let into_m = Link::Dense {
            w: lp.m.p_in.mm(&prev_map).select_rows(&m_in),
            b: prev_bias.as_ref().map(|b| lp.m.p_in.mm(b).select_rows(&m_in)),
        };

        let m_map = out_map(&lp.m, &l.gamma_m, &m_out);
        let m_bias = beta(&l.beta_m);
        let ff = ffn(model, masks, i, &m_map, Some(&m_bias), &lp.f.p_in, &f_in);
        let into_f = Link::Dense {
            w: lp.f.p_in.mm(&m_map).select_rows(&f_in),
            b: Some(lp.f.p_in.mm(&m_bias).select_rows(&f_in)),
        };

        prev_map = out_map(&lp.f, &l.gamma_f, &f_out);
        prev_bias = Some(beta(&l.beta_f));
        layers.push(FusedLayer {
            m: m_site,
            f: f_site,
            heads: hs,
            ffn: ff,
            into_m,
            into_f,
        });
    }
    let p = &model.params;
    let bias = prev_bias.expect("at least one layer");
    Ok(FusedModel {
        arch: cfg.arch,
        d_model: d,
        head_dim: cfg.head_dim(),
        vocab_size: cfg.vocab_size,
        max_seq_len: cfg.max_seq_len,
        tok_emb: p.tok_emb.transpose(),
        pos_emb: p.pos_emb.transpose(),
        layers,
        final_in: None,
        classifier: p.classifier.mm(&prev_map),
        cls_bias: p.classifier.mm(&bias).add(&p.cls_bias)?,
    })
}

fn fuse_pre_rms(model: &TransformerModel, proj: &ProjectionSet, masks: &MaskSet) -> Result<FusedModel> {
    let cfg = &model.config;
    let n = cfg.n_layers;
    let p = &model.params;
    let final_keep = keep_list(masks.final_in.as_ref().expect("pre-RMSNorm masks have final_in"));
    // Input coordinates of the stream entering layer i's MHA site, or the final norm.
    let next_in = |i: usize| -> Vec<usize> {
        if i < n {
            keep_list(&masks.layers[i].m.z_in)
        } else {
            final_keep.clone()
        }
    };
    let first = &proj.layers[0].m.p_in;
    let k0 = next_in(0);
    let tok_emb = first.mm(&p.tok_emb.transpose()).select_rows(&k0);
    let pos_emb = first.mm(&p.pos_emb.transpose()).select_rows(&k0);

    let mut layers = Vec::with_capacity(n);
    let mut into_next = Link::Select((0..k0.len()).map(Some).collect());
    for i in 0..n {
        let (lp, lm, l) = (&proj.layers[i], &masks.layers[i], &p.layers[i]);
        let (m_in, m_out, m_site) = site(&lm.m);
        let (f_in, f_out, f_site) = site(&lm.f);

        let m_map = out_map(&lp.m, &l.gamma_m, &m_out);
        let hs = heads(model, proj, masks, i, &m_map, None, &lp.m.p_in, &f_in);
        let into_f = Link::Select(selection(&f_in, &m_in));

        // FFN output lands in the coordinates of the next reader, rotated
        // into the next group's basis when the group changes.
        let next = next_in(i + 1);
        let cross = proj.crosses_group(i);
        let to_next = if cross {
            proj.layers[i + 1].m.p_in.mm(&lp.f.basis)
        } else {
            Tensor::eye(cfg.d_model)
        };
        let f_map = out_map(&lp.f, &l.gamma_f, &f_out);
        let ff = ffn(model, masks, i, &f_map, None, &to_next.mm(&lp.f.p_in), &next);

        let into_m = std::mem::replace(
            &mut into_next,
            if cross {
                Link::Dense {
                    w: to_next.select_rows(&next).select_cols(&f_in),
                    b: None,
                }
            } else {
                Link::Select(selection(&next, &f_in))
            },
        );
        layers.push(FusedLayer {
            m: m_site,
            f: f_site,
            heads: hs,
            ffn: ff,
            into_m,
            into_f,
        });
    }
    let last = &proj.layers[n - 1].f;
    let gamma = p.final_gamma.as_ref().expect("pre-RMSNorm model has a final norm");
    let final_map = out_map(last, gamma, &final_keep);
    Ok(FusedModel {
        arch: cfg.arch,
        d_model: cfg.d_model,
        head_dim: cfg.head_dim(),
        vocab_size: cfg.vocab_size,
        max_seq_len: cfg.max_seq_len,
        tok_emb,
        pos_emb,
        layers,
        final_in: Some((final_keep.len(), into_next)),
        classifier: p.classifier.mm(&final_map),
        cls_bias: p.cls_bias.clone(),
    })
}
