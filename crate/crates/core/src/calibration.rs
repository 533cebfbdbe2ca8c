//! Calibration features for the projections.
//!
//! Every token position of the calibration set contributes one column; a
//! single seeded sample of `T` positions is drawn once and applied to every
//! feature matrix so that all matrices describe the same tokens.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward_traced, Arch, Example, ForwardTrace, TransformerModel};
use crate::numerics::{svd_full, Rng, Tensor, PINV_RTOL};

const TRACE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadFeatures {
    /// `W_Q·x`, `W_K·x`, `W_V·x` on the head input, each `d_h×T`.
    pub x_q: Tensor,
    pub x_k: Tensor,
    pub x_v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    /// Stream entering the MHA-side norm, `d×T`.
    pub x_m: Tensor,
    /// Stream entering the FFN-side norm, `d×T`.
    pub x_f: Tensor,
    pub heads: Vec<HeadFeatures>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationFeatures {
    pub arch: Arch,
    pub layers: Vec<LayerFeatures>,
    /// Stream entering the final norm (pre-RMSNorm only), `d×T`.
    pub x_final: Option<Tensor>,
    /// Number of sampled token positions.
    pub t: usize,
    /// Indices of the sampled positions among all concatenated positions.
    pub positions: Vec<usize>,
}

/// Default sample size: four tokens per hidden dimension.
pub fn default_sample_size(d_model: usize) -> usize {
    4 * d_model
}

/// Runs the model over `data` and keeps `t` uniformly sampled token
/// positions (without replacement, in ascending order).
pub fn collect(model: &TransformerModel, data: &[Example], t: usize, seed: u64) -> Result<CalibrationFeatures> {
    if data.is_empty() {
        return Err(Error::Input("empty calibration set".into()));
    }
    if t == 0 {
        return Err(Error::Sampling("sample size must be at least 1".into()));
    }
    let total: usize = data.iter().map(|e| e.tokens.len()).sum();
    if t > total {
        return Err(Error::Sampling(format!(
            "requested {t} calibration tokens but the set has only {total}"
        )));
    }
    if t < model.config.d_model {
        log::warn!(
            "calibration sample of {t} tokens is below the hidden size {}",
            model.config.d_model
        );
    }
    let positions = Rng::new(seed).sample_sorted(total, t)?;

    let traces: Vec<Result<ForwardTrace>> = data
        .par_chunks(TRACE_CHUNK)
        .map(|chunk| {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|e| e.tokens.clone()).collect();
            Ok(forward_traced(model, &seqs)?.1)
        })
        .collect();
    let traces = traces.into_iter().collect::<Result<Vec<_>>>()?;

    let gather = |pick: &dyn Fn(&ForwardTrace) -> &Tensor| -> Result<Tensor> {
        let parts: Vec<&Tensor> = traces.iter().map(pick).collect();
        Ok(Tensor::hstack(&parts)?.select_cols(&positions))
    };
    let cfg = &model.config;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let heads = (0..cfg.n_heads)
            .map(|h| {
                Ok(HeadFeatures {
                    x_q: gather(&|tr| &tr.layers[i].heads[h].q)?,
                    x_k: gather(&|tr| &tr.layers[i].heads[h].k)?,
                    x_v: gather(&|tr| &tr.layers[i].heads[h].v)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(LayerFeatures {
            x_m: gather(&|tr| &tr.layers[i].x_m)?,
            x_f: gather(&|tr| &tr.layers[i].x_f)?,
            heads,
        });
    }
    let x_final = match cfg.arch {
        Arch::PreRms => Some(gather(&|tr| tr.x_final.as_ref().expect("final stream traced"))?),
        Arch::PostLn => None,
    };
    Ok(CalibrationFeatures {
        arch: cfg.arch,
        layers,
        x_final,
        t,
        positions,
    })
}

/// Singular-value energy profile of one feature stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumRow {
    pub layer: usize,
    /// `"M"` or `"F"`.
    pub site: &'static str,
    /// `σ_i² / Σσ²`, descending; all zero for a degenerate stream.
    pub energies: Vec<f64>,
    /// Number of singular values above the relative cutoff.
    pub rank: usize,
    /// Smallest `k` whose leading energies reach 90% and 99%.
    pub k90: usize,
    pub k99: usize,
}

/// Energy table of every norm-input stream, after the same centering the
/// projections use.
pub fn spectrum_report(features: &CalibrationFeatures) -> Result<Vec<SpectrumRow>> {
    let mut rows = Vec::new();
    for (i, l) in features.layers.iter().enumerate() {
        for (site, x) in [("M", &l.x_m), ("F", &l.x_f)] {
            rows.push(spectrum_row(i, site, x, features.arch)?);
        }
    }
    Ok(rows)
}

fn spectrum_row(layer: usize, site: &'static str, x: &Tensor, arch: Arch) -> Result<SpectrumRow> {
    let centered = match arch {
        Arch::PostLn => x.center_columns(),
        Arch::PreRms => x.clone(),
    };
    let svd = svd_full(&centered)?;
    let rank = svd.numeric_rank();
    let smax = svd.s.first().copied().unwrap_or(0.0);
    let kept: Vec<f64> = svd
        .s
        .iter()
        .map(|&s| if s > PINV_RTOL * smax { s * s } else { 0.0 })
        .collect();
    let total: f64 = kept.iter().sum();
    let energies: Vec<f64> = if total > 0.0 {
        kept.iter().map(|e| e / total).collect()
    } else {
        vec![0.0; kept.len()]
    };
    let k_for = |frac: f64| {
        if total == 0.0 {
            return 0;
        }
        let mut acc = 0.0;
        for (k, e) in energies.iter().enumerate() {
            acc += e;
            if acc >= frac - 1e-12 {
                return k + 1;
            }
        }
        energies.len()
    };
    Ok(SpectrumRow {
        layer,
        site,
        k90: k_for(0.90),
        k99: k_for(0.99),
        energies,
        rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_columns_have_no_energy() {
        let x = Tensor::filled(4, 6, 2.5);
        let r = spectrum_row(0, "M", &x, Arch::PostLn).unwrap();
        assert_eq!(r.rank, 0);
        assert!(r.energies.iter().all(|&e| e == 0.0));
        assert_eq!((r.k90, r.k99), (0, 0));
    }

    #[test]
    fn rank_two_stream_has_two_energies() {
        let mut rng = Rng::new(4);
        let x = rng.normal_tensor(5, 2, 1.0).mm(&rng.normal_tensor(2, 9, 1.0));
        let r = spectrum_row(1, "F", &x, Arch::PreRms).unwrap();
        assert_eq!(r.rank, 2);
        assert_eq!(r.energies.iter().filter(|&&e| e > 0.0).count(), 2);
        assert!((r.energies.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.k99 <= 2);
    }
}
