use rayon::prelude::*;

use super::forward::{build_graph, evaluate, leaves_on, BatchInput, EvalPlan, Plan};
use super::params::TransformerModel;
use super::task::{Dataset, Example};
use crate::error::{Error, Result};
use crate::numerics::{grad, Rng, Tape, Tensor};

const EVAL_CHUNK: usize = 64;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 32,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean training loss of every step.
    pub losses: Vec<f64>,
}

/// Splits `data` into shuffled mini-batches.
pub fn batches<'d>(data: &'d [Example], batch_size: usize, rng: &mut Rng) -> Vec<Vec<&'d Example>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.iter().map(|&i| &data[i]).collect())
        .collect()
}

pub fn split(batch: &[&Example]) -> (Vec<Vec<usize>>, Vec<usize>) {
    (
        batch.iter().map(|e| e.tokens.clone()).collect(),
        batch.iter().map(|e| e.label).collect(),
    )
}

/// Cross-entropy training of all weights with Adam.
pub fn train_toy(model: &mut TransformerModel, data: &Dataset, settings: &TrainSettings) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    if settings.epochs == 0 {
        return Ok(report);
    }
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut rng = Rng::new(settings.seed);
    let mut opt = Adam::new(settings.lr);
    for _ in 0..settings.epochs {
        for batch in batches(data, settings.batch_size, &mut rng) {
            let (seqs, labels) = split(&batch);
            let input = BatchInput::new(model, &seqs)?;
            let (loss, grads) = {
                let tape = Tape::new();
                let params = leaves_on(&tape, &model.params);
                let logits = build_graph(&tape, &model.config, &params, &Plan::Plain, &input, None);
                let loss = logits.cross_entropy(&labels);
                let vars: Vec<_> = params.leaves().into_iter().map(|(_, v)| *v).collect();
                (loss.item(), grad(loss, &vars)?)
            };
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged at step {}",
                    report.losses.len()
                )));
            }
            report.losses.push(loss);
            opt.step(&mut model.params.leaves_mut(), &grads);
        }
    }
    Ok(report)
}

/// Predicted classes, evaluated in parallel chunks.
pub fn predict(model: &TransformerModel, plan: EvalPlan<'_>, data: &[Example]) -> Result<Vec<usize>> {
    let chunks: Vec<Result<Vec<usize>>> = data
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|e| e.tokens.clone()).collect();
            let (logits, _) = evaluate(model, plan, &seqs, false)?;
            Ok(argmax_columns(&logits))
        })
        .collect();
    let mut out = Vec::with_capacity(data.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn accuracy(model: &TransformerModel, plan: EvalPlan<'_>, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let pred = predict(model, plan, data)?;
    let hits = pred.iter().zip(data).filter(|(p, e)| **p == e.label).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Index of the largest entry of every column; ties go to the lower index.
pub fn argmax_columns(logits: &Tensor) -> Vec<usize> {
    (0..logits.cols())
        .map(|c| {
            let mut best = 0;
            for r in 1..logits.rows() {
                if logits.get(r, c) > logits.get(best, c) {
                    best = r;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, MajorityTask, ModelConfig};

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = Tensor::column(&[3.0, -2.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = x.scale(2.0);
            opt.step(&mut [&mut x], &[g]);
        }
        assert!(x.max_abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = TransformerModel::random(ModelConfig::toy(Arch::PostLn)).unwrap();
        let before = m.clone();
        let data = MajorityTask::new(8, 9).unwrap().generate(16, 1);
        let settings = TrainSettings {
            epochs: 0,
            ..TrainSettings::default()
        };
        let r = train_toy(&mut m, &data, &settings).unwrap();
        assert!(r.losses.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(argmax_columns(&t), vec![0, 1]);
    }
}
