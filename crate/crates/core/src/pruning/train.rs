use crate::error::{Error, Result};
use crate::model::{batches, build_graph, leaves_on, split, Adam, BatchInput, Example, Plan, TransformerModel};
use crate::numerics::{grad, Rng, Tape, Tensor};
use crate::projection::ProjectionSet;

use super::binarize::binarize;
use super::config::PruneConfig;
use super::masks::{MaskLevel, MaskSet};
use super::objective::{pruning_loss_var, LagrangeState};
use super::sparsity::Topology;

/// One optimizer step of mask training.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub stage: u8,
    /// Target in effect for this step.
    pub target: f64,
    pub task_loss: f64,
    pub s_hat: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Clone, Debug)]
pub struct MaskTraining {
    pub logits: MaskSet,
    /// Logit scale in effect at the end of training.
    pub sharpness: f64,
    pub lagrange: LagrangeState,
    pub history: Vec<StepLog>,
    /// Expected sparsity of `sigmoid(logits)` after the last step.
    pub s_hat: f64,
}

impl MaskTraining {
    pub fn masks(&self) -> MaskSet {
        self.logits.map(&mut |t| t.scale(self.sharpness)).sigmoid()
    }
}

/// Jointly trains mask logits and model weights under the sparsity
/// penalty, with frozen projections. The first `stage1_epochs` update only
/// dimension masks; head and layer logits keep their initial values.
pub fn train_masks(
    model: &mut TransformerModel,
    proj: &ProjectionSet,
    data: &[Example],
    cfg: &PruneConfig,
) -> Result<MaskTraining> {
    cfg.validate()?;
    proj.validate(&model.config)?;
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let topo = Topology::new(&model.config, &proj.groups);
    let total = topo.total(&model.config) as f64;
    let mut logits = MaskSet::filled(&model.config, cfg.init_logit);
    let mut lagrange = LagrangeState::new(cfg.target_sparsity)?;
    lagrange.lambda2 = cfg.lambda2_init.min(super::objective::LAMBDA2_MAX);
    let mut weight_opt = Adam::new(cfg.lr);
    let mut mask_opt = Adam::new(cfg.mask_lr);
    let mut rng = Rng::new(cfg.seed);
    let mut history = Vec::new();
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let warmup_steps = (cfg.warmup_epochs * per_epoch) as f64;
    let ramp_steps = (cfg.stage2_epochs.saturating_sub(1).max(1) * per_epoch) as f64;
    let mut sharpness = 1.0;

    for epoch in 0..cfg.stage1_epochs + cfg.stage2_epochs {
        let stage = if epoch < cfg.stage1_epochs { 1 } else { 2 };
        for batch in batches(data, cfg.batch_size, &mut rng) {
            let (seqs, labels) = split(&batch);
            let input = BatchInput::new(model, &seqs)?;
            let step = history.len() as f64;
            lagrange.target = if step < warmup_steps {
                cfg.target_sparsity * (step + 1.0) / (warmup_steps + 1.0)
            } else {
                cfg.target_sparsity
            };
            if stage == 2 {
                let done = (history.len() - cfg.stage1_epochs * per_epoch) as f64 + 1.0;
                sharpness = 1.0 + (cfg.final_sharpness - 1.0) * (done / ramp_steps).min(1.0);
            }
            let (task_loss, s_hat, weight_grads, mask_grads) = {
                let tape = Tape::new();
                let params = leaves_on(&tape, &model.params);
                let proj_var = proj.map(&mut |t| tape.leaf(t.clone()));
                let logit_var = logits.map(&mut |t| tape.leaf(t.clone()));
                let mut mask_var = logit_var.map(&mut |v| v.scale(sharpness).sigmoid());
                if stage == 1 {
                    for (level, v) in mask_var.leaves_mut() {
                        if level != MaskLevel::Dimension {
                            *v = tape.leaf(v.value());
                        }
                    }
                }
                let out = build_graph(
                    &tape,
                    &model.config,
                    &params,
                    &Plan::Projected {
                        proj: &proj_var,
                        masks: Some(&mask_var),
                    },
                    &input,
                    None,
                );
                let task = out.cross_entropy(&labels);
                let s_hat = topo.expected_sparsity_var(&tape, &mask_var, total);
                let loss = task + pruning_loss_var(s_hat, &lagrange);
                let weight_vars: Vec<_> = params.leaves().into_iter().map(|(_, v)| *v).collect();
                let logit_vars: Vec<_> = logit_var.leaves().into_iter().map(|(_, _, v)| *v).collect();
                let mut all = weight_vars;
                let n_weights = all.len();
                all.extend(logit_vars);
                let mut grads = grad(loss, &all)?;
                let mask_grads = grads.split_off(n_weights);
                (task.item(), s_hat.item(), grads, mask_grads)
            };
            if !task_loss.is_finite() || !s_hat.is_finite() {
                return Err(Error::Training(format!("loss diverged at step {}", history.len())));
            }
            weight_opt.step(&mut model.params.leaves_mut(), &weight_grads);
            let mut logit_refs: Vec<&mut Tensor> = logits.leaves_mut().into_iter().map(|(_, t)| t).collect();
            mask_opt.step(&mut logit_refs, &mask_grads);
            lagrange.ascend(s_hat, cfg.lambda_lr);
            history.push(StepLog {
                epoch,
                stage,
                target: lagrange.target,
                task_loss,
                s_hat,
                lambda1: lagrange.lambda1,
                lambda2: lagrange.lambda2,
            });
        }
    }
    let s_hat = 1.0 - topo.retained(&logits.map(&mut |t| t.scale(sharpness)).sigmoid()) / total;
    if (s_hat - cfg.target_sparsity).abs() > 0.02 {
        log::warn!(
            "expected sparsity {s_hat:.4} did not settle near the target {}",
            cfg.target_sparsity
        );
    }
    Ok(MaskTraining {
        logits,
        sharpness,
        lagrange,
        history,
        s_hat,
    })
}

/// Weight-only training with fixed masks and projections.
pub fn finetune(
    model: &mut TransformerModel,
    proj: &ProjectionSet,
    masks: &MaskSet,
    data: &[Example],
    cfg: &PruneConfig,
) -> Result<Vec<f64>> {
    masks.validate(&model.config)?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = Rng::new(cfg.seed ^ 0x5eed);
    let mut losses = Vec::new();
    for _ in 0..cfg.finetune_epochs {
        for batch in batches(data, cfg.batch_size, &mut rng) {
            let (seqs, labels) = split(&batch);
            let input = BatchInput::new(model, &seqs)?;
            let (loss, grads) = {
                let tape = Tape::new();
                let params = leaves_on(&tape, &model.params);
                let proj_var = proj.map(&mut |t| tape.leaf(t.clone()));
                let mask_var = masks.map(&mut |t| tape.leaf(t.clone()));
                let out = build_graph(
                    &tape,
                    &model.config,
                    &params,
                    &Plan::Projected {
                        proj: &proj_var,
                        masks: Some(&mask_var),
                    },
                    &input,
                    None,
                );
                let loss = out.cross_entropy(&labels);
                let vars: Vec<_> = params.leaves().into_iter().map(|(_, v)| *v).collect();
                (loss.item(), grad(loss, &vars)?)
            };
            if !loss.is_finite() {
                return Err(Error::Training(format!("finetune diverged at step {}", losses.len())));
            }
            opt.step(&mut model.params.leaves_mut(), &grads);
            losses.push(loss);
        }
    }
    Ok(losses)
}

/// Random dimension masks with every head and layer kept, binarized to
/// `target`; the untrained comparison point at equal sparsity.
pub fn random_baseline(model: &TransformerModel, proj: &ProjectionSet, target: f64, seed: u64) -> Result<MaskSet> {
    let config = &model.config;
    let mut rng = Rng::new(seed);
    let mut m = MaskSet::random_uniform(config, &mut rng);
    for (level, t) in m.leaves_mut() {
        if level != MaskLevel::Dimension {
            *t = Tensor::ones(t.rows(), t.cols());
        }
    }
    binarize(&m, target, config, &Topology::new(config, &proj.groups))
}
