mod common;

use sp3_core::calibration::collect;
use sp3_core::model::{forward, forward_masked, Arch, Example, ModelConfig, TransformerModel};
use sp3_core::projection::{group_pca, inject};
use sp3_core::pruning::MaskSet;
use sp3_core::Tensor;

const EPS: f64 = 1e-12;

type Vector = Vec<f64>;

fn matvec(w: &Tensor, x: &[f64]) -> Vector {
    (0..w.rows())
        .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(w: &Tensor, y: &[f64]) -> Vector {
    (0..w.cols())
        .map(|c| (0..w.rows()).map(|r| w.get(r, c) * y[r]).sum())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vector {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn scaled_norm(x: &[f64], center: bool, gamma: &Tensor, beta: Option<&Tensor>) -> Vector {
    let d = x.len() as f64;
    let mean = if center { x.iter().sum::<f64>() / d } else { 0.0 };
    let c: Vector = x.iter().map(|v| v - mean).collect();
    let rms = (c.iter().map(|v| v * v).sum::<f64>() / d + EPS).sqrt();
    c.iter()
        .enumerate()
        .map(|(i, v)| v / rms * gamma.get(i, 0) + beta.map_or(0.0, |b| b.get(i, 0)))
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x.powi(3))).tanh())
}

fn attention(model: &TransformerModel, layer: usize, xs: &[Vector]) -> Vec<Vector> {
    let cfg = &model.config;
    let scale = (cfg.head_dim() as f64).sqrt();
    let mut out = vec![vec![0.0; cfg.d_model]; xs.len()];
    for hp in &model.params.layers[layer].heads {
        let q: Vec<Vector> = xs.iter().map(|x| matvec(&hp.w_q, x)).collect();
        let k: Vec<Vector> = xs.iter().map(|x| matvec(&hp.w_k, x)).collect();
        let v: Vec<Vector> = xs.iter().map(|x| matvec(&hp.w_v, x)).collect();
        for t in 0..xs.len() {
            let logits: Vector = k
                .iter()
                .map(|ks| ks.iter().zip(&q[t]).map(|(a, b)| a * b).sum::<f64>() / scale)
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vector = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut ctx = vec![0.0; v[0].len()];
            for (s, vs) in v.iter().enumerate() {
                for (c, x) in ctx.iter_mut().zip(vs) {
                    *c += w[s] / z * x;
                }
            }
            out[t] = add(&out[t], &matvec_t(&hp.w_o, &ctx));
        }
    }
    out
}

fn ffn(model: &TransformerModel, layer: usize, x: &[f64]) -> Vector {
    let l = &model.params.layers[layer];
    let h: Vector = matvec(&l.w_u, x).into_iter().map(gelu).collect();
    matvec_t(&l.w_d, &h)
}

/// Token-by-token reference for one sequence.
fn oracle(model: &TransformerModel, seq: &[usize]) -> Vector {
    let p = &model.params;
    let mut xs: Vec<Vector> = seq
        .iter()
        .enumerate()
        .map(|(t, &id)| add(p.tok_emb.row(id), p.pos_emb.row(t)))
        .collect();
    for (i, l) in p.layers.iter().enumerate() {
        match model.config.arch {
            Arch::PostLn => {
                let a = attention(model, i, &xs);
                let xm: Vec<Vector> = xs
                    .iter()
                    .zip(&a)
                    .map(|(x, a)| scaled_norm(&add(x, a), true, &l.gamma_m, l.beta_m.as_ref()))
                    .collect();
                xs = xm
                    .iter()
                    .map(|x| scaled_norm(&add(x, &ffn(model, i, x)), true, &l.gamma_f, l.beta_f.as_ref()))
                    .collect();
            }
            Arch::PreRms => {
                let u: Vec<Vector> = xs.iter().map(|x| scaled_norm(x, false, &l.gamma_m, None)).collect();
                let a = attention(model, i, &u);
                xs = xs.iter().zip(&a).map(|(x, a)| add(x, a)).collect();
                xs = xs
                    .iter()
                    .map(|x| add(x, &ffn(model, i, &scaled_norm(x, false, &l.gamma_f, None))))
                    .collect();
            }
        }
    }
    if let Some(g) = &p.final_gamma {
        xs = xs.iter().map(|x| scaled_norm(x, false, g, None)).collect();
    }
    let n = xs.len() as f64;
    let pooled: Vector = (0..model.config.d_model)
        .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n)
        .collect();
    add(&matvec(&p.classifier, &pooled), &p.cls_bias.col(0))
}

fn model(arch: Arch, seed: u64) -> TransformerModel {
    TransformerModel::random(ModelConfig {
        seed,
        ..ModelConfig::toy(arch)
    })
    .unwrap()
}

#[test]
fn batched_forward_matches_token_oracle() {
    let seqs = common::seqs(&common::task().generate(12, 40));
    for arch in [Arch::PostLn, Arch::PreRms] {
        let m = model(arch, 8);
        let logits = forward(&m, &seqs).unwrap();
        for (b, s) in seqs.iter().enumerate() {
            let want = oracle(&m, s);
            for (c, w) in want.iter().enumerate() {
                assert!((logits.get(c, b) - w).abs() < 1e-10, "{arch} seq {b}");
            }
        }
    }
}

#[test]
fn oracle_values_are_frozen() {
    let seq = [1, 5, 2, 7, 3, 3];
    let got: Vec<Vector> = [Arch::PostLn, Arch::PreRms]
        .iter()
        .map(|&a| oracle(&model(a, 0), &seq))
        .collect();
    let frozen = [FROZEN_POSTLN, FROZEN_RMS];
    for (g, f) in got.iter().zip(frozen) {
        for (a, b) in g.iter().zip(f) {
            assert!((a - b).abs() < 1e-12, "{g:?} vs {f:?}");
        }
    }
}

const FROZEN_POSTLN: [f64; 2] = [-0.037652969654151935, -0.1380125406386637];
const FROZEN_RMS: [f64; 2] = [-0.9460627677524991, 0.8413165924371142];

#[test]
fn all_ones_masks_are_a_no_op() {
    let seqs = common::seqs(&common::task().generate(10, 41));
    for arch in [Arch::PostLn, Arch::PreRms] {
        let m = model(arch, 9);
        let plain = forward(&m, &seqs).unwrap();
        let masked = forward_masked(&m, &MaskSet::ones(&m.config), &seqs).unwrap();
        assert!(plain.max_abs_diff(&masked) < 1e-12, "{arch}");
    }
}

#[test]
fn closing_a_head_equals_zeroing_its_output_weights() {
    let seqs = common::seqs(&common::task().generate(10, 42));
    for arch in [Arch::PostLn, Arch::PreRms] {
        let m = model(arch, 10);
        let mut masks = MaskSet::ones(&m.config);
        masks.layers[1].heads[2].z_head = Tensor::zeros(1, 1);
        let mut zeroed = m.clone();
        let w_o = &mut zeroed.params.layers[1].heads[2].w_o;
        *w_o = Tensor::zeros(w_o.rows(), w_o.cols());
        let a = forward_masked(&m, &masks, &seqs).unwrap();
        let b = forward(&zeroed, &seqs).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12, "{arch}");
    }
}

#[test]
fn calibration_columns_trace_by_hand() {
    let m = model(Arch::PreRms, 11);
    let data = vec![
        Example {
            tokens: vec![0, 3, 4],
            label: 0,
        },
        Example {
            tokens: vec![6, 1],
            label: 1,
        },
    ];
    let full = collect(&m, &data, 5, 0).unwrap();
    assert_eq!(full.positions, vec![0, 1, 2, 3, 4]);
    let p = &m.params;
    let l0 = &p.layers[0];
    // Column 3 is the first token of the second sequence.
    let x = add(p.tok_emb.row(6), p.pos_emb.row(0));
    assert_eq!(full.layers[0].x_m.col(3), x);
    let u = scaled_norm(&x, false, &l0.gamma_m, None);
    let q = matvec(&l0.heads[1].w_q, &u);
    for (a, b) in full.layers[0].heads[1].x_q.col(3).iter().zip(&q) {
        assert!((a - b).abs() < 1e-12);
    }
    let second = add(p.tok_emb.row(1), p.pos_emb.row(1));
    let attn = attention(&m, 0, &[u, scaled_norm(&second, false, &l0.gamma_m, None)]);
    let xf = add(&x, &attn[0]);
    for (a, b) in full.layers[0].x_f.col(3).iter().zip(&xf) {
        assert!((a - b).abs() < 1e-12);
    }

    let part = collect(&m, &data, 3, 7).unwrap();
    assert_eq!(part.positions.len(), 3);
    assert!(part.positions.windows(2).all(|w| w[0] < w[1]));
    for (j, &pos) in part.positions.iter().enumerate() {
        assert_eq!(part.layers[1].x_f.col(j), full.layers[1].x_f.col(pos));
        assert_eq!(
            part.x_final.as_ref().unwrap().col(j),
            full.x_final.as_ref().unwrap().col(pos)
        );
    }
}

#[test]
fn one_layer_groups_equal_per_layer_injection() {
    let m = model(Arch::PreRms, 12);
    let data = common::task().generate(40, 43);
    let f = collect(&m, &data, 64, 1).unwrap();
    assert_eq!(group_pca(&m, &f, 1).unwrap(), inject(&m, &f).unwrap());
}
