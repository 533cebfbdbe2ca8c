use std::time::Instant;

use rayon::prelude::*;

use super::{fused_forward, FusedModel, LayerDims};
use crate::error::Result;
use crate::model::{forward, TransformerModel};
use crate::pruning::Topology;

/// Parameter counts and measured inference time of a model and its fused
/// counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeReport {
    /// Prunable weight entries before and after fusing.
    pub prunable_before: usize,
    pub prunable_after: usize,
    /// Every stored number, embeddings and norms included.
    pub total_before: usize,
    pub total_after: usize,
    pub residual_matrices: usize,
    pub layers: Vec<LayerDims>,
    /// Mean seconds per forward pass over the timing batch.
    pub secs_before: f64,
    pub secs_after: f64,
}

impl SizeReport {
    pub fn sparsity(&self) -> f64 {
        1.0 - self.prunable_after as f64 / self.prunable_before as f64
    }

    pub fn speedup(&self) -> f64 {
        self.secs_before / self.secs_after
    }
}

impl FusedModel {
    pub fn total_params(&self) -> usize {
        let mut n = self.tok_emb.len() + self.pos_emb.len() + self.classifier.len() + self.cls_bias.len();
        for l in &self.layers {
            for h in &l.heads {
                n += [&h.b_q, &h.b_k, &h.b_v]
                    .iter()
                    .map(|b| b.as_ref().map_or(0, |b| b.len()))
                    .sum::<usize>();
            }
            if let Some(f) = &l.ffn {
                n += f.b_u.as_ref().map_or(0, |b| b.len());
            }
            for link in [&l.into_m, &l.into_f] {
                if let super::Link::Dense { b: Some(b), .. } = link {
                    n += b.len();
                }
            }
        }
        n + self.prunable_params()
    }
}

/// Counts parameters and times `reps` forward passes of both models over
/// `seqs`, one sequence per task on both sides.
pub fn size_report(
    model: &TransformerModel,
    fused: &FusedModel,
    groups: &[usize],
    seqs: &[Vec<usize>],
    reps: usize,
) -> Result<SizeReport> {
    let reps = reps.max(1);
    let time = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
        f()?;
        let start = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        Ok(start.elapsed().as_secs_f64() / reps as f64)
    };
    let secs_before = time(&|| {
        seqs.par_iter()
            .try_for_each(|s| forward(model, std::slice::from_ref(s)).map(drop))
    })?;
    let secs_after = time(&|| fused_forward(fused, seqs).map(drop))?;
    Ok(SizeReport {
        prunable_before: Topology::new(&model.config, groups).total(&model.config),
        prunable_after: fused.prunable_params(),
        total_before: model.n_params(),
        total_after: fused.total_params(),
        residual_matrices: fused.n_residual_matrices(),
        layers: fused.layer_dims(),
        secs_before,
        secs_after,
    })
}
