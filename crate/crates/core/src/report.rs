//! Text and CSV reports.

use std::fmt::Write;

use crate::calibration::SpectrumRow;
use crate::error::{Error, Result};
use crate::fusing::{FusedModel, LayerDims};
use crate::model::ModelConfig;
use crate::pruning::{keep_list, MaskSet, Topology};

/// Surviving widths of one layer, read off a binary mask set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub layer: usize,
    pub m_in: usize,
    pub m_out: usize,
    pub f_in: usize,
    pub f_out: usize,
    /// Heads whose gate and layer gate are both on.
    pub heads: usize,
    /// FFN filters, zero when the FFN is gated off.
    pub d_ff: usize,
    /// Per kept head: paired QK dimensions and VO dimensions.
    pub qk_dims: Vec<usize>,
    pub vo_dims: Vec<usize>,
}

impl LayerRow {
    pub fn dims(&self) -> LayerDims {
        LayerDims {
            m_in: self.m_in,
            m_out: self.m_out,
            f_in: self.f_in,
            f_out: self.f_out,
            heads: self.heads,
            d_ff: self.d_ff,
        }
    }
}

pub fn layer_rows(masks: &MaskSet) -> Result<Vec<LayerRow>> {
    if !masks.is_binary() {
        return Err(Error::Contract("layer tables need binary masks".into()));
    }
    let on = |z: &crate::Tensor| z.get(0, 0) == 1.0;
    let count = |z: &crate::Tensor| keep_list(z).len();
    Ok(masks
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let kept: Vec<_> = l.heads.iter().filter(|h| on(&l.z_mha) && on(&h.z_head)).collect();
            let both = |a: &crate::Tensor, b: &crate::Tensor| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .filter(|(x, y)| **x == 1.0 && **y == 1.0)
                    .count()
            };
            LayerRow {
                layer: i,
                m_in: count(&l.m.z_in),
                m_out: count(&l.m.z_out),
                f_in: count(&l.f.z_in),
                f_out: count(&l.f.z_out),
                heads: kept.len(),
                d_ff: if on(&l.z_ffn) { count(&l.z_f) } else { 0 },
                qk_dims: kept.iter().map(|h| both(&h.z_q, &h.z_k)).collect(),
                vo_dims: kept.iter().map(|h| both(&h.z_v, &h.z_o)).collect(),
            }
        })
        .collect())
}

/// Per-layer hidden dimensions and head counts as CSV.
pub fn dims_csv(rows: &[LayerRow]) -> String {
    let mut s = String::from("layer,mha_in,mha_out,ffn_in,ffn_out,heads,d_ff,qk_dims,vo_dims\n");
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.layer,
            r.m_in,
            r.m_out,
            r.f_in,
            r.f_out,
            r.heads,
            r.d_ff,
            join(&r.qk_dims),
            join(&r.vo_dims)
        )
        .expect("writing to a String");
    }
    s
}

/// Parses the CSV written by [`dims_csv`] back into layer dimensions.
pub fn parse_dims_csv(text: &str) -> Result<Vec<LayerDims>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |k: usize| -> Result<usize> {
            f.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Input(format!("dims table line {}: bad field {k}", n + 1)))
        };
        out.push(LayerDims {
            m_in: num(1)?,
            m_out: num(2)?,
            f_in: num(3)?,
            f_out: num(4)?,
            heads: num(5)?,
            d_ff: num(6)?,
        });
    }
    Ok(out)
}

/// Checks the mask-derived table against the fused model's actual shapes.
pub fn cross_check(rows: &[LayerRow], fused: &FusedModel) -> Result<()> {
    let want: Vec<LayerDims> = rows.iter().map(LayerRow::dims).collect();
    let got = fused.layer_dims();
    if want != got {
        return Err(Error::Verification(format!(
            "mask table {want:?} disagrees with fused model {got:?}"
        )));
    }
    for (r, l) in rows.iter().zip(&fused.layers) {
        let qk: Vec<usize> = l.heads.iter().map(|h| h.qk_pairs.len()).collect();
        let vo: Vec<usize> = l.heads.iter().map(|h| h.vo_pairs.len()).collect();
        if qk != r.qk_dims || vo != r.vo_dims {
            return Err(Error::Verification(format!("layer {}: head widths disagree", r.layer)));
        }
    }
    Ok(())
}

/// Fixed-width bars of the fraction of weights each layer keeps.
pub fn sparsity_histogram(masks: &MaskSet, config: &ModelConfig, groups: &[usize]) -> String {
    let topo = Topology::new(config, groups);
    let full = topo.terms(&MaskSet::ones(config));
    let now = topo.terms(masks);
    let mut s = String::new();
    for ((name, all), (_, kept)) in full.iter().zip(&now) {
        let frac = if *all > 0.0 { kept / all } else { 0.0 };
        let bar = "#".repeat((frac * 40.0).round() as usize);
        writeln!(s, "{name:<12} {:>6.1}% |{bar:<40}|", 100.0 * frac).expect("writing to a String");
    }
    s
}

/// Energy profile of every calibrated stream as CSV.
pub fn spectrum_csv(rows: &[SpectrumRow]) -> String {
    let mut s = String::from("layer,site,rank,k90,k99,energies\n");
    for r in rows {
        let e: Vec<String> = r.energies.iter().map(|e| format!("{e:.6}")).collect();
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.layer,
            r.site,
            r.rank,
            r.k90,
            r.k99,
            e.join(" ")
        )
        .expect("writing to a String");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    #[test]
    fn full_masks_give_full_widths() {
        let c = ModelConfig::toy(Arch::PreRms);
        let rows = layer_rows(&MaskSet::ones(&c)).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].m_in, rows[0].heads, rows[0].d_ff), (16, 4, 32));
        assert_eq!(rows[1].qk_dims, vec![4; 4]);
        let back = parse_dims_csv(&dims_csv(&rows)).unwrap();
        assert_eq!(back, rows.iter().map(LayerRow::dims).collect::<Vec<_>>());
    }

    #[test]
    fn gated_blocks_report_zero() {
        let c = ModelConfig::toy(Arch::PostLn);
        let mut m = MaskSet::ones(&c);
        m.layers[1].z_ffn = crate::Tensor::zeros(1, 1);
        m.layers[0].heads[2].z_head = crate::Tensor::zeros(1, 1);
        let rows = layer_rows(&m).unwrap();
        assert_eq!((rows[0].heads, rows[1].d_ff), (3, 0));
        let h = sparsity_histogram(&m, &c, &[0, 1]);
        assert!(h.contains("L1.ffn") && h.contains("0.0%"));
    }
}
