use crate::error::{Error, Result};
use crate::model::ModelConfig;

use super::masks::{MaskLevel, MaskSet};
use super::objective::check_target;
use super::sparsity::Topology;

#[derive(Clone, Copy, Debug)]
struct Entry {
    phase: u8,
    value: f64,
    leaf: usize,
    index: usize,
}

/// Turns continuous masks into a binary set whose sparsity first reaches
/// `target`.
///
/// Starting from all ones, entries are zeroed in this order until `ŝ ≥ t`:
/// head/layer gates already below one half, then dimension entries, then
/// the remaining gates, each group by ascending value. Among equal values
/// the lower flat index wins and is kept, so leading principal components
/// outlast trailing ones. Entries whose removal does not change `ŝ` are
/// skipped. A layer always keeps its attention or its FFN path, and no
/// hidden mask loses its last entry.
pub fn binarize(masks: &MaskSet, target: f64, config: &ModelConfig, topo: &Topology) -> Result<MaskSet> {
    check_target(target)?;
    masks.validate(config)?;
    let total = topo.total(config) as f64;
    let s_hat = |m: &MaskSet| 1.0 - topo.retained(m) / total;
    if masks.is_binary() && s_hat(masks) >= target {
        return Ok(masks.clone());
    }

    let leaves = masks.leaves();
    let hidden: Vec<bool> = leaves
        .iter()
        .map(|(name, _, _)| name.ends_with("z_in") || name.ends_with("z_out"))
        .collect();
    let mut entries = Vec::new();
    for (leaf, (_, level, t)) in leaves.iter().enumerate() {
        for (index, &value) in t.data().iter().enumerate() {
            let phase = match (level, value < 0.5) {
                (MaskLevel::Dimension, _) => 1,
                (_, true) => 0,
                (_, false) => 2,
            };
            entries.push(Entry {
                phase,
                value,
                leaf,
                index,
            });
        }
    }
    entries.sort_by(|a, b| {
        a.phase
            .cmp(&b.phase)
            .then(a.value.total_cmp(&b.value))
            .then((b.leaf, b.index).cmp(&(a.leaf, a.index)))
    });

    let mut out = MaskSet::ones(config);
    let mut current = s_hat(&out);
    for e in entries {
        if current >= target {
            break;
        }
        if hidden[e.leaf] && out.leaves()[e.leaf].2.sum() <= 1.0 {
            continue;
        }
        set_entry(&mut out, e.leaf, e.index, 0.0);
        if !every_layer_has_a_path(&out) {
            set_entry(&mut out, e.leaf, e.index, 1.0);
            continue;
        }
        let next = s_hat(&out);
        if next <= current {
            set_entry(&mut out, e.leaf, e.index, 1.0);
            continue;
        }
        current = next;
    }
    if current < target {
        return Err(Error::Contract(format!(
            "target sparsity {target} unreachable; the guarded maximum is {current:.4}"
        )));
    }
    Ok(out)
}

fn set_entry(m: &mut MaskSet, leaf: usize, index: usize, v: f64) {
    let mut leaves = m.leaves_mut();
    let t = &mut leaves[leaf].1;
    let cols = t.cols();
    t.set(index / cols, index % cols, v);
}

fn every_layer_has_a_path(m: &MaskSet) -> bool {
    m.layers.iter().all(|l| {
        let mha = l.z_mha.get(0, 0) != 0.0 && l.heads.iter().any(|h| h.z_head.get(0, 0) != 0.0);
        mha || l.z_ffn.get(0, 0) != 0.0
    })
}
