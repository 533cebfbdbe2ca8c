use crate::error::{Error, Result};
use crate::model::{Arch, ModelConfig};
use crate::numerics::{sigmoid, Rng, Tensor};

/// Granularity of a mask entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskLevel {
    /// Hidden, FFN-intermediate and per-head QK/VO dimensions.
    Dimension,
    /// Whole attention heads.
    Head,
    /// Whole MHA or FFN blocks.
    Layer,
}

/// Masks around one normalization site: `z_in` gates the projected input
/// before the norm, `z_out` gates the normalized output before `P_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteMasks<T> {
    pub z_in: T,
    pub z_out: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadMasks<T> {
    pub z_q: T,
    pub z_k: T,
    pub z_v: T,
    pub z_o: T,
    /// `1×1`.
    pub z_head: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerMasks<T> {
    pub m: SiteMasks<T>,
    pub f: SiteMasks<T>,
    pub heads: Vec<HeadMasks<T>>,
    pub z_f: T,
    pub z_mha: T,
    pub z_ffn: T,
}

/// Every mask of a model. Vectors are columns (`d×1`, `d_h×1`, `d_f×1`),
/// scalars are `1×1`. `final_in` exists only for pre-RMSNorm stacks, where
/// it gates the input of the final norm.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTree<T> {
    pub layers: Vec<LayerMasks<T>>,
    pub final_in: Option<T>,
}

/// Mask values (or logits) held as tensors.
pub type MaskSet = MaskTree<Tensor>;

impl<T> MaskTree<T> {
    /// Named leaves with their level, in a fixed order.
    pub fn leaves(&self) -> Vec<(String, MaskLevel, &T)> {
        use MaskLevel::*;
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("L{i}.M.z_in"), Dimension, &l.m.z_in));
            out.push((format!("L{i}.M.z_out"), Dimension, &l.m.z_out));
            out.push((format!("L{i}.F.z_in"), Dimension, &l.f.z_in));
            out.push((format!("L{i}.F.z_out"), Dimension, &l.f.z_out));
            out.push((format!("L{i}.z_f"), Dimension, &l.z_f));
            for (h, hm) in l.heads.iter().enumerate() {
                out.push((format!("L{i}.H{h}.z_q"), Dimension, &hm.z_q));
                out.push((format!("L{i}.H{h}.z_k"), Dimension, &hm.z_k));
                out.push((format!("L{i}.H{h}.z_v"), Dimension, &hm.z_v));
                out.push((format!("L{i}.H{h}.z_o"), Dimension, &hm.z_o));
                out.push((format!("L{i}.H{h}.z_head"), Head, &hm.z_head));
            }
            out.push((format!("L{i}.z_mha"), Layer, &l.z_mha));
            out.push((format!("L{i}.z_ffn"), Layer, &l.z_ffn));
        }
        if let Some(f) = &self.final_in {
            out.push(("final.z_in".to_string(), Dimension, f));
        }
        out
    }

    /// Mutable leaves in the order of [`leaves`](Self::leaves).
    pub fn leaves_mut(&mut self) -> Vec<(MaskLevel, &mut T)> {
        use MaskLevel::*;
        let mut out: Vec<(MaskLevel, &mut T)> = Vec::new();
        for l in &mut self.layers {
            out.push((Dimension, &mut l.m.z_in));
            out.push((Dimension, &mut l.m.z_out));
            out.push((Dimension, &mut l.f.z_in));
            out.push((Dimension, &mut l.f.z_out));
            out.push((Dimension, &mut l.z_f));
            for hm in &mut l.heads {
                out.push((Dimension, &mut hm.z_q));
                out.push((Dimension, &mut hm.z_k));
                out.push((Dimension, &mut hm.z_v));
                out.push((Dimension, &mut hm.z_o));
                out.push((Head, &mut hm.z_head));
            }
            out.push((Layer, &mut l.z_mha));
            out.push((Layer, &mut l.z_ffn));
        }
        if let Some(f) = &mut self.final_in {
            out.push((Dimension, f));
        }
        out
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MaskTree<U> {
        let site = |s: &SiteMasks<T>, f: &mut dyn FnMut(&T) -> U| SiteMasks {
            z_in: f(&s.z_in),
            z_out: f(&s.z_out),
        };
        MaskTree {
            layers: self
                .layers
                .iter()
                .map(|l| LayerMasks {
                    m: site(&l.m, f),
                    f: site(&l.f, f),
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadMasks {
                            z_q: f(&h.z_q),
                            z_k: f(&h.z_k),
                            z_v: f(&h.z_v),
                            z_o: f(&h.z_o),
                            z_head: f(&h.z_head),
                        })
                        .collect(),
                    z_f: f(&l.z_f),
                    z_mha: f(&l.z_mha),
                    z_ffn: f(&l.z_ffn),
                })
                .collect(),
            final_in: self.final_in.as_ref().map(&mut *f),
        }
    }
}

impl MaskSet {
    /// Every mask filled with `value`.
    pub fn filled(config: &ModelConfig, value: f64) -> Self {
        let (d, dh, df) = (config.d_model, config.head_dim(), config.d_ff);
        let v = |n: usize| Tensor::filled(n, 1, value);
        let site = || SiteMasks {
            z_in: v(d),
            z_out: v(d),
        };
        MaskTree {
            layers: (0..config.n_layers)
                .map(|_| LayerMasks {
                    m: site(),
                    f: site(),
                    heads: (0..config.n_heads)
                        .map(|_| HeadMasks {
                            z_q: v(dh),
                            z_k: v(dh),
                            z_v: v(dh),
                            z_o: v(dh),
                            z_head: v(1),
                        })
                        .collect(),
                    z_f: v(df),
                    z_mha: v(1),
                    z_ffn: v(1),
                })
                .collect(),
            final_in: (config.arch == Arch::PreRms).then(|| v(d)),
        }
    }

    pub fn ones(config: &ModelConfig) -> Self {
        Self::filled(config, 1.0)
    }

    /// The baseline form with one hidden mask pair reused at every site.
    pub fn shared(config: &ModelConfig, z_in: &Tensor, z_out: &Tensor) -> Result<Self> {
        let d = config.d_model;
        for z in [z_in, z_out] {
            if z.shape() != (d, 1) {
                return Err(Error::dim("shared hidden mask", z.shape(), (d, 1)));
            }
        }
        let mut m = Self::ones(config);
        for l in &mut m.layers {
            for s in [&mut l.m, &mut l.f] {
                s.z_in = z_in.clone();
                s.z_out = z_out.clone();
            }
        }
        if let Some(f) = &mut m.final_in {
            *f = z_in.clone();
        }
        Ok(m)
    }

    /// Independent uniform values in `[0, 1)` for every entry.
    pub fn random_uniform(config: &ModelConfig, rng: &mut Rng) -> Self {
        Self::ones(config).map(&mut |t| rng.uniform_tensor(t.rows(), t.cols(), 0.0, 1.0))
    }

    /// `sigmoid` of every entry; used to turn logits into mask values.
    pub fn sigmoid(&self) -> Self {
        self.map(&mut |t| t.map(sigmoid))
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let reference = Self::ones(config);
        if self.layers.len() != reference.layers.len() {
            return Err(Error::Input(format!(
                "mask set has {} layers, model has {}",
                self.layers.len(),
                reference.layers.len()
            )));
        }
        if self.final_in.is_some() != reference.final_in.is_some() {
            return Err(Error::Input(
                "final_in mask presence does not match the architecture".into(),
            ));
        }
        for (l, r) in self.layers.iter().zip(&reference.layers) {
            if l.heads.len() != r.heads.len() {
                return Err(Error::Input("mask head count does not match config".into()));
            }
        }
        for ((name, _, a), (_, _, b)) in self.leaves().into_iter().zip(reference.leaves()) {
            if a.shape() != b.shape() {
                return Err(Error::Input(format!(
                    "mask {name} has shape {}x{}, expected {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                )));
            }
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.leaves()
            .iter()
            .all(|(_, _, t)| t.data().iter().all(|&v| v == 0.0 || v == 1.0))
    }

    /// Number of entries equal to one, by level.
    pub fn count_ones(&self, level: MaskLevel) -> usize {
        self.leaves()
            .iter()
            .filter(|(_, l, _)| *l == level)
            .map(|(_, _, t)| t.data().iter().filter(|&&v| v == 1.0).count())
            .sum()
    }
}

/// Indices of the entries equal to one.
pub fn keep_list(z: &Tensor) -> Vec<usize> {
    z.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_orders_agree() {
        for arch in [Arch::PostLn, Arch::PreRms] {
            let c = ModelConfig::toy(arch);
            let mut m = MaskSet::ones(&c);
            let a: Vec<_> = m.leaves().iter().map(|(_, l, t)| (*l, t.shape())).collect();
            let b: Vec<_> = m.leaves_mut().iter().map(|(l, t)| (*l, t.shape())).collect();
            assert_eq!(a, b);
            m.validate(&c).unwrap();
        }
    }

    #[test]
    fn final_mask_only_for_rmsnorm() {
        assert!(MaskSet::ones(&ModelConfig::toy(Arch::PostLn)).final_in.is_none());
        assert!(MaskSet::ones(&ModelConfig::toy(Arch::PreRms)).final_in.is_some());
    }

    #[test]
    fn binary_detection_and_keep_lists() {
        let c = ModelConfig::toy(Arch::PostLn);
        let mut m = MaskSet::ones(&c);
        assert!(m.is_binary());
        m.layers[0].z_f.set(3, 0, 0.0);
        assert!(m.is_binary());
        assert_eq!(keep_list(&m.layers[0].z_f).len(), c.d_ff - 1);
        m.layers[0].z_f.set(4, 0, 0.3);
        assert!(!m.is_binary());
    }

    #[test]
    fn shared_masks_fill_every_site() {
        let c = ModelConfig::toy(Arch::PostLn);
        let zi = Tensor::from_fn(16, 1, |r, _| (r % 2) as f64);
        let zo = Tensor::ones(16, 1);
        let m = MaskSet::shared(&c, &zi, &zo).unwrap();
        assert!(m.layers.iter().all(|l| l.m.z_in == zi && l.f.z_in == zi));
        assert!(MaskSet::shared(&c, &Tensor::ones(3, 1), &zo).is_err());
    }

    #[test]
    fn mismatched_masks_are_rejected() {
        let c = ModelConfig::toy(Arch::PostLn);
        let mut m = MaskSet::ones(&c);
        m.layers[1].z_f = Tensor::ones(5, 1);
        assert!(matches!(m.validate(&c), Err(Error::Input(_))));
    }
}
