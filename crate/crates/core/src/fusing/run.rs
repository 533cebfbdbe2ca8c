use rayon::prelude::*;

use super::{FusedFfn, FusedHead, FusedModel, FusedSite, Link};
use crate::error::{Error, Result};
use crate::model::{Arch, NORM_EPS};
use crate::numerics::{gelu, norm_columns, softmax_columns, Tensor};

/// Logits of the fused model, `n_classes×B`, one sequence at a time.
pub fn fused_forward(fm: &FusedModel, seqs: &[Vec<usize>]) -> Result<Tensor> {
    if seqs.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    for s in seqs {
        if s.is_empty() || s.len() > fm.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} outside 1..={}",
                s.len(),
                fm.max_seq_len
            )));
        }
        if let Some(&t) = s.iter().find(|&&t| t >= fm.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} outside the vocabulary of {}",
                fm.vocab_size
            )));
        }
    }
    let pooled: Vec<Vec<f64>> = seqs.par_iter().map(|s| sequence(fm, s)).collect();
    let refs: Vec<Tensor> = pooled.iter().map(|p| Tensor::column(p)).collect();
    let parts: Vec<&Tensor> = refs.iter().collect();
    let h = Tensor::hstack(&parts)?;
    let logits = fm.classifier.mm(&h).add_col(&fm.cls_bias)?;
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(logits)
}

/// Mean over positions of the representation fed to the classifier.
fn sequence(fm: &FusedModel, ids: &[usize]) -> Vec<f64> {
    let x = Tensor::from_fn(fm.tok_emb.rows(), ids.len(), |r, c| {
        fm.tok_emb.get(r, ids[c]) + fm.pos_emb.get(r, c)
    });
    let h = match fm.arch {
        Arch::PostLn => post_ln(fm, x),
        Arch::PreRms => pre_rms(fm, x),
    };
    let n = ids.len() as f64;
    (0..h.rows()).map(|r| h.row(r).iter().sum::<f64>() / n).collect()
}

fn post_ln(fm: &FusedModel, mut c: Tensor) -> Tensor {
    for l in &fm.layers {
        let s = add(link(&l.into_m, &c), mha(fm, &l.heads, &c));
        let y = site(fm, &l.m, &s);
        let s = add(link(&l.into_f, &y), l.ffn.as_ref().map(|f| ffn(f, &y)));
        c = site(fm, &l.f, &s);
    }
    c
}

fn pre_rms(fm: &FusedModel, mut r: Tensor) -> Tensor {
    let mut pending: Option<Tensor> = None;
    for l in &fm.layers {
        let r_m = add(link(&l.into_m, &r), pending.take());
        let y = site(fm, &l.m, &r_m);
        let r_f = add(link(&l.into_f, &r_m), mha(fm, &l.heads, &y));
        let z = site(fm, &l.f, &r_f);
        pending = l.ffn.as_ref().map(|f| ffn(f, &z));
        r = r_f;
    }
    let (_, last) = fm.final_in.as_ref().expect("pre-RMSNorm fused model has a final link");
    let r = add(link(last, &r), pending);
    norm_columns(&r, fm.d_model as f64, NORM_EPS)
}

fn add(a: Tensor, b: Option<Tensor>) -> Tensor {
    match b {
        Some(b) => a.add(&b).expect("fused shapes agree"),
        None => a,
    }
}

fn link(l: &Link, x: &Tensor) -> Tensor {
    match l {
        Link::Select(map) => gather(map, x),
        Link::Dense { w, b } => {
            let y = w.mm(x);
            match b {
                Some(b) => y.add_col(b).expect("bias matches"),
                None => y,
            }
        }
    }
}

fn gather(map: &[Option<usize>], x: &Tensor) -> Tensor {
    Tensor::from_fn(map.len(), x.cols(), |r, c| map[r].map_or(0.0, |s| x.get(s, c)))
}

fn site(fm: &FusedModel, s: &FusedSite, x: &Tensor) -> Tensor {
    let n = norm_columns(x, fm.d_model as f64, NORM_EPS);
    gather(&s.out_from_in, &n)
}

fn affine(w: &Tensor, b: &Option<Tensor>, x: &Tensor) -> Tensor {
    let y = w.mm(x);
    match b {
        Some(b) => y.add_col(b).expect("bias matches"),
        None => y,
    }
}

fn mha(fm: &FusedModel, heads: &[FusedHead], x: &Tensor) -> Option<Tensor> {
    let scale = 1.0 / (fm.head_dim as f64).sqrt();
    heads
        .iter()
        .map(|h| {
            let q = affine(&h.w_q, &h.b_q, x);
            let k = affine(&h.w_k, &h.b_k, x);
            let v = affine(&h.w_v, &h.b_v, x);
            let (qi, ki): (Vec<usize>, Vec<usize>) = h.qk_pairs.iter().copied().unzip();
            let (vi, oi): (Vec<usize>, Vec<usize>) = h.vo_pairs.iter().copied().unzip();
            let scores = k.select_rows(&ki).tmm(&q.select_rows(&qi)).scale(scale);
            let attn = softmax_columns(&scores);
            h.w_o.select_cols(&oi).mm(&v.select_rows(&vi).mm(&attn))
        })
        .reduce(|a, b| a.add(&b).expect("head outputs agree"))
}

fn ffn(f: &FusedFfn, x: &Tensor) -> Tensor {
    f.w_d.mm(&affine(&f.w_u, &f.b_u, x).map(gelu))
}
