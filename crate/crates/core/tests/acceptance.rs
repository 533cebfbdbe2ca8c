//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::time::{Duration, Instant};

use rayon::prelude::*;
use sp3_core::calibration::collect;
use sp3_core::fusing::{fuse, fused_forward, FusedModel};
use sp3_core::model::{
    argmax_columns, build_graph, forward, forward_projected, leaves_on, train_toy, Arch, BatchInput, Example,
    ModelConfig, Plan, TrainSettings, TransformerModel,
};
use sp3_core::numerics::{grad, Tape};
use sp3_core::pipeline::{run_all, PruneSummary, RunConfig};
use sp3_core::projection::{group_pca, inject, qk_projection, ProjectionSet};
use sp3_core::pruning::{binarize, pruning_loss_var, LagrangeState, MaskSet, Topology};
use sp3_core::report::{cross_check, dims_csv, layer_rows, parse_dims_csv};
use sp3_core::{Result, Rng, Tensor};

/// Outcome of one criterion.
struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_seqs(n: usize, config: &ModelConfig, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let len = 1 + rng.below(config.max_seq_len);
            (0..len).map(|_| rng.below(config.vocab_size)).collect()
        })
        .collect()
}

fn projection_exactness() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut check_time = Duration::ZERO;
    for arch in [Arch::PostLn, Arch::PreRms] {
        let (model, train) = common::trained(arch);
        let start = Instant::now();
        let feats = collect(&model, &train[..64], 64, 3)?;
        let proj = inject(&model, &feats)?;
        let seqs = random_seqs(128, &model.config, 7);
        let ones = MaskSet::ones(&model.config);
        let plain = forward(&model, &seqs)?;
        let projected = forward_projected(&model, &proj, Some(&ones), &seqs)?;
        worst = worst.max(projected.max_rel_diff(&plain));
        check_time += start.elapsed();
    }
    let pass = worst <= 1e-6 && check_time < Duration::from_secs(10);
    Ok(outcome(
        pass,
        format!("max relative deviation {worst:.2e} (limit 1e-6), check {check_time:.2?} of 10s after training"),
    ))
}

fn frob(t: &Tensor) -> f64 {
    t.frobenius()
}

fn qk_truncation() -> Result<Outcome> {
    let mut worst_law = 0.0f64;
    let mut beaten = 0;
    let mut trials = 0;
    let mut rng = Rng::new(17);
    for dh in [2usize, 4, 8] {
        let x_q = rng.normal_tensor(dh, 40, 1.0);
        let x_k = rng.normal_tensor(dh, 40, 1.0).add(&x_q.scale(0.5))?;
        let qk = qk_projection(&x_q, &x_k)?;
        let scores = x_q.transpose().matmul(&x_k)?;
        for k in 0..=dh {
            let approx = x_q.transpose().matmul(&qk.truncated_metric(k))?.matmul(&x_k)?;
            let err = frob(&scores.sub(&approx)?);
            worst_law = worst_law.max((err - qk.predicted_error(k)).abs());
            if k == 0 {
                continue;
            }
            for _ in 0..50 {
                let m = rng.normal_tensor(dh, k, 1.0).matmul(&rng.normal_tensor(k, dh, 1.0))?;
                let random = x_q.transpose().matmul(&m)?.matmul(&x_k)?;
                trials += 1;
                if err <= frob(&scores.sub(&random)?) {
                    beaten += 1;
                }
            }
        }
    }
    let pass = worst_law <= 1e-8 && beaten == trials;
    Ok(outcome(
        pass,
        format!("law deviation {worst_law:.2e} (limit 1e-8), beats {beaten}/{trials} random rank-k baselines"),
    ))
}

fn fuse_equivalence() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut count_mismatch = 0;
    let mut sets = 0;
    for arch in [Arch::PostLn, Arch::PreRms] {
        let (model, train) = common::trained(arch);
        let proj = inject(&model, &collect(&model, &train[..64], 64, 3)?)?;
        let topo = Topology::new(&model.config, &proj.groups);
        let total = topo.total(&model.config);
        let seqs = random_seqs(32, &model.config, 9);
        let targets = [0.25, 0.5, 0.75];
        let results: Vec<Result<(f64, bool)>> = (0..100u64)
            .into_par_iter()
            .map(|n| {
                let t = targets[n as usize % 3];
                let soft = MaskSet::random_uniform(&model.config, &mut Rng::new(1000 + n));
                let masks = binarize(&soft, t, &model.config, &topo)?;
                let fused = fuse(&model, &proj, &masks)?;
                let want = forward_projected(&model, &proj, Some(&masks), &seqs)?;
                let dev = fused_forward(&fused, &seqs)?.max_rel_diff(&want);
                let s_hat = 1.0 - topo.retained(&masks) / total as f64;
                let expected = total as f64 * (1.0 - s_hat);
                Ok((dev, fused.prunable_params() as f64 == expected.round() && s_hat >= t))
            })
            .collect();
        for r in results {
            let (dev, count_ok) = r?;
            worst = worst.max(dev);
            count_mismatch += usize::from(!count_ok);
            sets += 1;
        }
    }
    Ok(outcome(
        worst <= 1e-6 && count_mismatch == 0,
        format!("{sets} mask sets, max relative deviation {worst:.2e}, {count_mismatch} count mismatches"),
    ))
}

/// Task plus pruning loss of a projected, softly masked pass.
fn total_loss(
    model: &TransformerModel,
    proj: &ProjectionSet,
    logits: &MaskSet,
    input: &BatchInput,
    labels: &[usize],
    lagrange: &LagrangeState,
    want_grad: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let topo = Topology::new(&model.config, &proj.groups);
    let total = topo.total(&model.config) as f64;
    let tape = Tape::new();
    let params = leaves_on(&tape, &model.params);
    let proj_var = proj.map(&mut |t| tape.leaf(t.clone()));
    let logit_var = logits.map(&mut |t| tape.leaf(t.clone()));
    let mask_var = logit_var.map(&mut |v| v.sigmoid());
    let plan = Plan::Projected {
        proj: &proj_var,
        masks: Some(&mask_var),
    };
    let out = build_graph(&tape, &model.config, &params, &plan, input, None);
    let s_hat = topo.expected_sparsity_var(&tape, &mask_var, total);
    let loss = out.cross_entropy(labels) + pruning_loss_var(s_hat, lagrange);
    if !want_grad {
        return Ok((loss.item(), Vec::new()));
    }
    let mut vars: Vec<_> = params.leaves().into_iter().map(|(_, v)| *v).collect();
    vars.extend(logit_var.leaves().into_iter().map(|(_, _, v)| *v));
    Ok((loss.item(), grad(loss, &vars)?))
}

/// Relative differences are measured against at least this magnitude.
const GRAD_FLOOR: f64 = 1e-5;

fn gradient_integrity() -> Result<Outcome> {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for arch in [Arch::PostLn, Arch::PreRms] {
        let model = TransformerModel::random(ModelConfig::toy(arch))?;
        let data: Vec<Example> = common::task().generate(32, 3);
        let proj = inject(&model, &collect(&model, &data, 64, 3)?)?;
        let logits = MaskSet::random_uniform(&model.config, &mut Rng::new(5)).map(&mut |t| t.map(|u| 4.0 * u - 2.0));
        let seqs: Vec<Vec<usize>> = data[..4].iter().map(|e| e.tokens.clone()).collect();
        let labels: Vec<usize> = data[..4].iter().map(|e| e.label).collect();
        let input = BatchInput::new(&model, &seqs)?;
        let lagrange = LagrangeState {
            lambda1: 1.5,
            lambda2: 4.0,
            target: 0.5,
        };
        let (_, analytic) = total_loss(&model, &proj, &logits, &input, &labels, &lagrange, true)?;

        let n_weights = model.params.leaves().len();
        let mut coords = Vec::new();
        for (leaf, g) in analytic.iter().enumerate() {
            coords.extend((0..g.len()).map(|e| (leaf, e)));
        }
        let errors: Vec<Result<f64>> = coords
            .par_iter()
            .map(|&(leaf, e)| {
                let eval = |delta: f64| -> Result<f64> {
                    let mut m = model.clone();
                    let mut l = logits.clone();
                    let t: &mut Tensor = if leaf < n_weights {
                        m.params.leaves_mut().swap_remove(leaf)
                    } else {
                        l.leaves_mut().swap_remove(leaf - n_weights).1
                    };
                    let (r, c) = (e / t.cols(), e % t.cols());
                    t.set(r, c, t.get(r, c) + delta);
                    Ok(total_loss(&m, &proj, &l, &input, &labels, &lagrange, false)?.0)
                };
                let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
                let a = analytic[leaf].data()[e];
                Ok((a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR))
            })
            .collect();
        for r in errors {
            worst = worst.max(r?);
            checked += 1;
        }
    }
    Ok(outcome(
        worst <= 1e-4,
        format!("{checked} coordinates, worst relative error {worst:.2e} (limit 1e-4)"),
    ))
}

fn fused_accuracy(fused: &FusedModel, held: &[Example]) -> Result<f64> {
    let seqs: Vec<Vec<usize>> = held.iter().map(|e| e.tokens.clone()).collect();
    let pred = argmax_columns(&fused_forward(fused, &seqs)?);
    Ok(pred.iter().zip(held).filter(|(p, e)| **p == e.label).count() as f64 / held.len() as f64)
}

struct PipelineRun {
    summary: PruneSummary,
    fused_acc: f64,
    model_bytes: Vec<u8>,
    fused: FusedModel,
    masks: MaskSet,
}

fn pipeline_run(rc: &RunConfig) -> Result<PipelineRun> {
    let (ck, fused, summary) = run_all(rc)?;
    let (_, held) = rc.datasets()?;
    Ok(PipelineRun {
        fused_acc: fused_accuracy(&fused, &held)?,
        summary,
        model_bytes: ck.to_bytes(),
        masks: ck.masks.clone().expect("pruned checkpoint has masks"),
        fused,
    })
}

fn end_to_end(first: &mut Option<(RunConfig, PipelineRun)>) -> Result<Outcome> {
    let mut lines = Vec::new();
    let mut all_pass = true;
    for arch in [Arch::PostLn, Arch::PreRms] {
        let mut votes = 0;
        for seed in 0..3u64 {
            let rc = RunConfig {
                arch,
                seed,
                ..RunConfig::default()
            };
            let run = pipeline_run(&rc)?;
            let s = &run.summary;
            let margin = run.fused_acc - s.baseline_accuracy;
            let ok = (0.48..=0.52).contains(&s.s_hat) && margin >= 0.05;
            votes += usize::from(ok);
            lines.push(format!(
                "{arch} seed {seed}: trained s {:.4}, binary s {:.4}, dense {:.3}, fused {:.3}, random {:.3} [{}]",
                s.s_hat_trained,
                s.s_hat,
                s.dense_accuracy,
                run.fused_acc,
                s.baseline_accuracy,
                if ok { "ok" } else { "miss" }
            ));
            if first.is_none() {
                *first = Some((rc, run));
            }
        }
        all_pass &= votes >= 2;
    }
    for l in &lines {
        println!("    {l}");
    }
    Ok(outcome(all_pass, "majority of 3 seeds per architecture".into()))
}

fn group_pca_fusing() -> Result<Outcome> {
    let config = ModelConfig {
        n_layers: 4,
        ..ModelConfig::toy(Arch::PreRms)
    };
    let mut model = TransformerModel::random(config)?;
    let train = common::task().generate(400, 11);
    let settings = TrainSettings {
        epochs: 4,
        batch_size: 32,
        lr: 1e-2,
        seed: 1,
    };
    train_toy(&mut model, &train, &settings)?;
    let feats = collect(&model, &train[..64], 64, 3)?;
    let seqs = random_seqs(64, &model.config, 13);
    let plain = forward(&model, &seqs)?;
    let ones = MaskSet::ones(&model.config);
    let mut worst = 0.0f64;
    let mut counts = Vec::new();
    for g in [2, 4] {
        let proj = group_pca(&model, &feats, g)?;
        worst = worst.max(forward_projected(&model, &proj, None, &seqs)?.max_rel_diff(&plain));
        let fused = fuse(&model, &proj, &ones)?;
        worst = worst.max(fused_forward(&fused, &seqs)?.max_rel_diff(&plain));
        counts.push(fused.n_residual_matrices());
    }
    Ok(outcome(
        worst <= 1e-6 && counts == [1, 0],
        format!(
            "max relative deviation {worst:.2e}, residual matrices g=2: {}, g=4: {}",
            counts[0], counts[1]
        ),
    ))
}

fn determinism(first: &Option<(RunConfig, PipelineRun)>) -> Result<Outcome> {
    let (rc, a) = first.as_ref().expect("criterion 5 ran first");
    let b = pipeline_run(rc)?;
    let same_model = a.model_bytes == b.model_bytes;
    let same_fused = a.fused.to_bytes() == b.fused.to_bytes();
    Ok(outcome(
        same_model && same_fused,
        format!("model checkpoint identical: {same_model}, fused checkpoint identical: {same_fused}"),
    ))
}

fn reports(first: &Option<(RunConfig, PipelineRun)>) -> Result<Outcome> {
    let (_, run) = first.as_ref().expect("criterion 5 ran first");
    let rows = layer_rows(&run.masks)?;
    let csv = dims_csv(&rows);
    let parsed = parse_dims_csv(&csv)?;
    let consistent = parsed == run.fused.layer_dims() && cross_check(&rows, &run.fused).is_ok();
    print!("{}", csv.lines().map(|l| format!("    {l}\n")).collect::<String>());
    Ok(outcome(
        consistent,
        format!("{} layer rows cross-checked against the fused model", rows.len()),
    ))
}

type Criterion = Box<dyn FnMut() -> Result<Outcome>>;

fn main() {
    let mut first = None;
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 projection exactness", Box::new(projection_exactness)),
        ("2 QK truncation law", Box::new(qk_truncation)),
        ("3 fuse equivalence", Box::new(fuse_equivalence)),
        ("4 gradient integrity", Box::new(gradient_integrity)),
    ];
    let mut failed = 0;
    let mut report = |name: &str, limit: Duration, f: &mut dyn FnMut() -> Result<Outcome>| {
        let start = Instant::now();
        let r = f();
        let took = start.elapsed();
        let (pass, detail) = match r {
            Ok(o) => (o.pass && took <= limit, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {name}: {} ({detail}; {took:.1?}, budget {limit:?})",
            if pass { "PASS" } else { "FAIL" }
        );
    };
    for ((name, mut f), secs) in criteria.into_iter().zip([60, 5, 60, 60]) {
        report(name, Duration::from_secs(secs), &mut *f);
    }
    report("5 end-to-end pruning", Duration::from_secs(600), &mut || {
        end_to_end(&mut first)
    });
    report("6 group PCA", Duration::from_secs(30), &mut group_pca_fusing);
    report("7 determinism", Duration::from_secs(300), &mut || determinism(&first));
    report("8 reports", Duration::from_secs(10), &mut || reports(&first));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
