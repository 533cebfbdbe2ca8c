use crate::error::{Error, Result};
use crate::model::{Arch, ModelConfig};
use crate::numerics::{centering_matrix, Tensor};

/// Projections around one normalization site. `p_in` is `UᵀR` (post-LN) or
/// `Uᵀ` (RMSNorm); the output side is `diag(γ)·basis`, formed at use so the
/// norm scale stays a model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteProj<T> {
    pub p_in: T,
    pub basis: T,
}

/// Per-head intermediate projections, all `d_h×d_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProj<T> {
    pub p_q: T,
    pub p_k: T,
    pub p_v: T,
    pub p_o: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerProj<T> {
    pub m: SiteProj<T>,
    pub f: SiteProj<T>,
    pub heads: Vec<HeadProj<T>>,
}

/// All projections of a model. For pre-RMSNorm stacks both sites of a layer
/// share one basis and `groups[i]` names the basis group of layer `i`;
/// consecutive layers in one group share the same basis, and the final norm
/// uses the last layer's basis.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjTree<T> {
    pub arch: Arch,
    pub layers: Vec<LayerProj<T>>,
    pub groups: Vec<usize>,
}

pub type ProjectionSet = ProjTree<Tensor>;

impl<T> ProjTree<T> {
    pub fn leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("L{i}.M.in"), &l.m.p_in));
            out.push((format!("L{i}.M.out"), &l.m.basis));
            out.push((format!("L{i}.F.in"), &l.f.p_in));
            out.push((format!("L{i}.F.out"), &l.f.basis));
            for (h, hp) in l.heads.iter().enumerate() {
                out.push((format!("L{i}.H{h}.q"), &hp.p_q));
                out.push((format!("L{i}.H{h}.k"), &hp.p_k));
                out.push((format!("L{i}.H{h}.v"), &hp.p_v));
                out.push((format!("L{i}.H{h}.o"), &hp.p_o));
            }
        }
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.m.p_in);
            out.push(&mut l.m.basis);
            out.push(&mut l.f.p_in);
            out.push(&mut l.f.basis);
            for hp in &mut l.heads {
                out.push(&mut hp.p_q);
                out.push(&mut hp.p_k);
                out.push(&mut hp.p_v);
                out.push(&mut hp.p_o);
            }
        }
        out
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ProjTree<U> {
        ProjTree {
            arch: self.arch,
            layers: self
                .layers
                .iter()
                .map(|l| LayerProj {
                    m: SiteProj {
                        p_in: f(&l.m.p_in),
                        basis: f(&l.m.basis),
                    },
                    f: SiteProj {
                        p_in: f(&l.f.p_in),
                        basis: f(&l.f.basis),
                    },
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadProj {
                            p_q: f(&h.p_q),
                            p_k: f(&h.p_k),
                            p_v: f(&h.p_v),
                            p_o: f(&h.p_o),
                        })
                        .collect(),
                })
                .collect(),
            groups: self.groups.clone(),
        }
    }

    /// True when layers `i` and `i + 1` use different bases.
    pub fn crosses_group(&self, i: usize) -> bool {
        i + 1 < self.groups.len() && self.groups[i] != self.groups[i + 1]
    }

    pub fn n_groups(&self) -> usize {
        let mut n = 0;
        for (i, g) in self.groups.iter().enumerate() {
            if i == 0 || self.groups[i - 1] != *g {
                n += 1;
            }
        }
        n
    }
}

impl ProjectionSet {
    /// Projections that leave the model unchanged without any PCA: the basis
    /// is the identity and post-LN inputs are only centered. All pre-RMSNorm
    /// layers form a single group.
    pub fn identity(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let dh = config.head_dim();
        let p_in = match config.arch {
            Arch::PostLn => centering_matrix(d),
            Arch::PreRms => Tensor::eye(d),
        };
        let site = || SiteProj {
            p_in: p_in.clone(),
            basis: Tensor::eye(d),
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerProj {
                m: site(),
                f: site(),
                heads: (0..config.n_heads)
                    .map(|_| HeadProj {
                        p_q: Tensor::eye(dh),
                        p_k: Tensor::eye(dh),
                        p_v: Tensor::eye(dh),
                        p_o: Tensor::eye(dh),
                    })
                    .collect(),
            })
            .collect();
        let groups = match config.arch {
            Arch::PostLn => (0..config.n_layers).collect(),
            Arch::PreRms => vec![0; config.n_layers],
        };
        ProjTree {
            arch: config.arch,
            layers,
            groups,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.arch != config.arch {
            return Err(Error::Input(format!(
                "projections built for {} but model is {}",
                self.arch, config.arch
            )));
        }
        if self.layers.len() != config.n_layers || self.groups.len() != config.n_layers {
            return Err(Error::Input("projection layer count does not match config".into()));
        }
        let (d, dh) = (config.d_model, config.head_dim());
        for (i, l) in self.layers.iter().enumerate() {
            for t in [&l.m.p_in, &l.m.basis, &l.f.p_in, &l.f.basis] {
                if t.shape() != (d, d) {
                    return Err(Error::dim("hidden projection", t.shape(), (d, d)));
                }
            }
            if l.heads.len() != config.n_heads {
                return Err(Error::Input(format!("layer {i} projection head count mismatch")));
            }
            for h in &l.heads {
                for t in [&h.p_q, &h.p_k, &h.p_v, &h.p_o] {
                    if t.shape() != (dh, dh) {
                        return Err(Error::dim("head projection", t.shape(), (dh, dh)));
                    }
                }
            }
            if self.arch == Arch::PreRms && l.m.basis != l.f.basis {
                return Err(Error::Input(format!(
                    "layer {i}: both RMSNorm sites of a layer must share one basis"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_projection_shapes() {
        for arch in [Arch::PostLn, Arch::PreRms] {
            let c = ModelConfig::toy(arch);
            let mut p = ProjectionSet::identity(&c);
            p.validate(&c).unwrap();
            assert_eq!(p.leaves().len(), p.leaves_mut().len());
        }
    }

    #[test]
    fn group_counting() {
        let mut p = ProjectionSet::identity(&ModelConfig::toy(Arch::PreRms));
        assert_eq!(p.n_groups(), 1);
        assert!(!p.crosses_group(0));
        p.groups = vec![0, 1];
        assert_eq!(p.n_groups(), 2);
        assert!(p.crosses_group(0));
        assert!(!p.crosses_group(1));
    }

    #[test]
    fn arch_mismatch_is_rejected() {
        let p = ProjectionSet::identity(&ModelConfig::toy(Arch::PreRms));
        assert!(p.validate(&ModelConfig::toy(Arch::PostLn)).is_err());
    }
}
