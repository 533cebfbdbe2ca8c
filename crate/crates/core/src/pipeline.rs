//! The end-to-end pipeline as separately callable stages.
//!
//! Every stage reads and extends a [`Checkpoint`]; datasets are regenerated
//! from the run seed, so a stage needs nothing but the checkpoint and the
//! run configuration.

use std::path::Path;
use std::str::FromStr;

use crate::calibration::collect;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusing::{fuse, fused_forward, FusedModel};
use crate::model::{
    accuracy, forward, forward_projected, train_toy, Arch, Dataset, EvalPlan, MajorityTask, ModelConfig, TrainReport,
    TrainSettings, TransformerModel,
};
use crate::projection::{group_pca, inject};
use crate::pruning::{binarize, finetune, random_baseline, train_masks, MaskSet, PruneConfig, Topology};

/// Largest relative logit deviation `verify` accepts.
pub const VERIFY_TOLERANCE: f64 = 1e-6;

/// Everything a run needs, read from `key=value` lines. Keys not listed
/// here are passed to [`PruneConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Vocabulary size and sequence length of the majority task.
    pub vocab_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_held: usize,
    pub train_epochs: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    /// Examples run through the model for calibration and sampled tokens.
    pub calib_examples: usize,
    pub calib_tokens: usize,
    /// Layers per shared basis (pre-RMSNorm); 0 keeps one basis per layer.
    pub group_size: usize,
    pub prune: PruneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: Arch::PostLn,
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            vocab_size: 8,
            seq_len: 9,
            seed: 0,
            n_train: 800,
            n_held: 300,
            train_epochs: 8,
            train_batch: 32,
            train_lr: 1e-2,
            calib_examples: 64,
            calib_tokens: 64,
            group_size: 0,
            prune: PruneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            c.set(key.trim(), value.trim())?;
        }
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "arch" => self.arch = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "n_train" => self.n_train = parse(key, value)?,
            "n_held" => self.n_held = parse(key, value)?,
            "train_epochs" => self.train_epochs = parse(key, value)?,
            "train_batch" => self.train_batch = parse(key, value)?,
            "train_lr" => self.train_lr = parse(key, value)?,
            "calib_examples" => self.calib_examples = parse(key, value)?,
            "calib_tokens" => self.calib_tokens = parse(key, value)?,
            "group_size" => self.group_size = parse(key, value)?,
            "t" => self.prune.set("target_sparsity", value)?,
            _ => self.prune.set(key, value)?,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.task()?;
        self.prune.validate()?;
        for (k, v) in [
            ("n_train", self.n_train),
            ("n_held", self.n_held),
            ("train_batch", self.train_batch),
            ("calib_examples", self.calib_examples),
            ("calib_tokens", self.calib_tokens),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.calib_examples > self.n_train {
            return Err(Error::Config("calib_examples exceeds n_train".into()));
        }
        if self.group_size > 0 && self.arch != Arch::PreRms {
            return Err(Error::Config("group_size needs arch=rmsnorm".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size: self.vocab_size,
            max_seq_len: self.seq_len,
            n_classes: 2,
            seed: self.seed,
        }
    }

    pub fn task(&self) -> Result<MajorityTask> {
        MajorityTask::new(self.vocab_size, self.seq_len).map_err(|e| Error::Config(e.to_string()))
    }

    /// Training and held-out sets, both derived from the run seed.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let task = self.task()?;
        Ok((
            task.generate(self.n_train, self.seed_for(1)),
            task.generate(self.n_held, self.seed_for(2)),
        ))
    }

    fn seed_for(&self, stage: u64) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(stage)
    }

    fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            seed: self.seed_for(5),
            ..self.prune.clone()
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

pub fn gen_toy(rc: &RunConfig) -> Result<Checkpoint> {
    rc.validate()?;
    Ok(Checkpoint::new(TransformerModel::random(rc.model_config())?))
}

pub fn train(rc: &RunConfig, ck: &mut Checkpoint) -> Result<TrainReport> {
    let (data, _) = rc.datasets()?;
    let settings = TrainSettings {
        epochs: rc.train_epochs,
        batch_size: rc.train_batch,
        lr: rc.train_lr,
        seed: rc.seed_for(4),
    };
    let report = train_toy(&mut ck.model, &data, &settings)?;
    ck.features = None;
    ck.proj = None;
    ck.masks = None;
    Ok(report)
}

pub fn calibrate(rc: &RunConfig, ck: &mut Checkpoint) -> Result<()> {
    let (data, _) = rc.datasets()?;
    ck.features = Some(collect(
        &ck.model,
        &data[..rc.calib_examples],
        rc.calib_tokens,
        rc.seed_for(3),
    )?);
    Ok(())
}

pub fn project(rc: &RunConfig, ck: &mut Checkpoint) -> Result<()> {
    let features = ck
        .features
        .as_ref()
        .ok_or_else(|| Error::Input("checkpoint has no calibration features; run calibrate first".into()))?;
    ck.proj = Some(match rc.group_size {
        0 => inject(&ck.model, features)?,
        g => group_pca(&ck.model, features, g)?,
    });
    ck.masks = None;
    Ok(())
}

/// Outcome of the pruning stage, with accuracies on the held-out set.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneSummary {
    pub target: f64,
    /// Expected sparsity of the continuous masks when training stopped.
    pub s_hat_trained: f64,
    /// Exact sparsity of the binary masks.
    pub s_hat: f64,
    pub dense_accuracy: f64,
    pub pruned_accuracy: f64,
    /// Random dimension masks at the same sparsity on the same weights.
    pub baseline_accuracy: f64,
    pub steps: usize,
}

pub fn prune(rc: &RunConfig, ck: &mut Checkpoint) -> Result<PruneSummary> {
    let proj = ck
        .proj
        .clone()
        .ok_or_else(|| Error::Input("checkpoint has no projections; run project first".into()))?;
    let (data, held) = rc.datasets()?;
    let cfg = rc.prune_config();
    cfg.validate()?;
    let config = ck.model.config.clone();
    let topo = Topology::new(&config, &proj.groups);
    let total = topo.total(&config) as f64;
    let dense_accuracy = accuracy(&ck.model, EvalPlan::Plain, &held)?;

    let (masks, s_hat_trained, steps) = if cfg.target_sparsity == 0.0 {
        (MaskSet::ones(&config), 0.0, 0)
    } else {
        let run = train_masks(&mut ck.model, &proj, &data, &cfg)?;
        let masks = binarize(&run.masks(), cfg.target_sparsity, &config, &topo)?;
        finetune(&mut ck.model, &proj, &masks, &data, &cfg)?;
        (masks, run.s_hat, run.history.len())
    };
    let s_hat = 1.0 - topo.retained(&masks) / total;
    let pruned_accuracy = accuracy(&ck.model, EvalPlan::Projected(&proj, Some(&masks)), &held)?;
    let baseline = random_baseline(&ck.model, &proj, s_hat, cfg.seed)?;
    let baseline_accuracy = accuracy(&ck.model, EvalPlan::Projected(&proj, Some(&baseline)), &held)?;
    ck.masks = Some(masks);
    Ok(PruneSummary {
        target: cfg.target_sparsity,
        s_hat_trained,
        s_hat,
        dense_accuracy,
        pruned_accuracy,
        baseline_accuracy,
        steps,
    })
}

pub fn fuse_checkpoint(ck: &Checkpoint) -> Result<FusedModel> {
    let proj = ck
        .proj
        .as_ref()
        .ok_or_else(|| Error::Input("checkpoint has no projections".into()))?;
    let masks = ck
        .masks
        .as_ref()
        .ok_or_else(|| Error::Input("checkpoint has no masks; run prune first".into()))?;
    fuse(&ck.model, proj, masks)
}

/// Largest relative logit deviations found by [`verify`].
#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    /// Projected forward without masks against the plain forward.
    pub projection: Option<f64>,
    /// Fused forward against the projected, masked forward.
    pub fused: Option<f64>,
}

/// Compares logits on the held-out sequences and fails when any deviation
/// exceeds [`VERIFY_TOLERANCE`].
pub fn verify(rc: &RunConfig, ck: &Checkpoint, fused: Option<&FusedModel>) -> Result<Verification> {
    let (_, held) = rc.datasets()?;
    let seqs: Vec<Vec<usize>> = held.iter().map(|e| e.tokens.clone()).collect();
    let projection = match &ck.proj {
        Some(p) => {
            let plain = forward(&ck.model, &seqs)?;
            Some(forward_projected(&ck.model, p, None, &seqs)?.max_rel_diff(&plain))
        }
        None => None,
    };
    let fused_dev = match (fused, &ck.proj, &ck.masks) {
        (Some(f), Some(p), Some(m)) => {
            let want = forward_projected(&ck.model, p, Some(m), &seqs)?;
            Some(fused_forward(f, &seqs)?.max_rel_diff(&want))
        }
        (Some(_), _, _) => return Err(Error::Input("fused verification needs projections and masks".into())),
        _ => None,
    };
    let v = Verification {
        projection,
        fused: fused_dev,
    };
    if v.projection.is_none() && v.fused.is_none() {
        return Err(Error::Input("nothing to verify: checkpoint has no projections".into()));
    }
    for (what, dev) in [("projection", v.projection), ("fused", v.fused)] {
        if let Some(dev) = dev {
            if dev.is_nan() || dev > VERIFY_TOLERANCE {
                return Err(Error::Verification(format!(
                    "{what} deviation {dev:e} exceeds {VERIFY_TOLERANCE:e}"
                )));
            }
        }
    }
    Ok(v)
}

/// Runs every stage in order.
pub fn run_all(rc: &RunConfig) -> Result<(Checkpoint, FusedModel, PruneSummary)> {
    let mut ck = gen_toy(rc)?;
    train(rc, &mut ck)?;
    calibrate(rc, &mut ck)?;
    project(rc, &mut ck)?;
    let summary = prune(rc, &mut ck)?;
    let fused = fuse_checkpoint(&ck)?;
    Ok((ck, fused, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_run_and_prune_keys() {
        let c = RunConfig::parse("arch=rmsnorm\nt=0.3\ngroup_size=2\nmask_lr=0.1\n").unwrap();
        assert_eq!(c.arch, Arch::PreRms);
        assert_eq!(c.prune.target_sparsity, 0.3);
        assert_eq!(c.prune.mask_lr, 0.1);
        c.validate().unwrap();
        assert!(matches!(RunConfig::parse("colour=red"), Err(Error::Config(_))));
    }

    #[test]
    fn grouping_needs_rmsnorm() {
        let c = RunConfig::parse("group_size=2").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stages_refuse_missing_inputs() {
        let rc = RunConfig::default();
        let mut ck = gen_toy(&rc).unwrap();
        assert!(matches!(project(&rc, &mut ck), Err(Error::Input(_))));
        assert!(matches!(prune(&rc, &mut ck), Err(Error::Input(_))));
        assert!(matches!(fuse_checkpoint(&ck), Err(Error::Input(_))));
    }
}
