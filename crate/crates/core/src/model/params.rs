use super::config::{Arch, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Per-head attention weights, each `d_h×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
}

/// One transformer layer. `w_u` and `w_d` are both `d_f×d`; the FFN computes
/// `W_Dᵀ gelu(W_U x)`. Norm scales are `d×1` columns; biases exist only for
/// LayerNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub heads: Vec<HeadParams<T>>,
    pub w_u: T,
    pub w_d: T,
    pub gamma_m: T,
    pub beta_m: Option<T>,
    pub gamma_f: T,
    pub beta_f: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// `vocab×d`.
    pub tok_emb: T,
    /// `max_seq_len×d`, learned absolute positions.
    pub pos_emb: T,
    pub layers: Vec<LayerParams<T>>,
    /// Final RMSNorm scale (pre-RMSNorm stacks only).
    pub final_gamma: Option<T>,
    /// `n_classes×d`, applied to the mean-pooled final hidden state.
    pub classifier: T,
    pub cls_bias: T,
}

impl<T> ModelParams<T> {
    /// Named leaves in a fixed order.
    pub fn leaves(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (h, hp) in l.heads.iter().enumerate() {
                out.push((format!("L{i}.H{h}.w_q"), &hp.w_q));
                out.push((format!("L{i}.H{h}.w_k"), &hp.w_k));
                out.push((format!("L{i}.H{h}.w_v"), &hp.w_v));
                out.push((format!("L{i}.H{h}.w_o"), &hp.w_o));
            }
            out.push((format!("L{i}.w_u"), &l.w_u));
            out.push((format!("L{i}.w_d"), &l.w_d));
            out.push((format!("L{i}.M.gamma"), &l.gamma_m));
            if let Some(b) = &l.beta_m {
                out.push((format!("L{i}.M.beta"), b));
            }
            out.push((format!("L{i}.F.gamma"), &l.gamma_f));
            if let Some(b) = &l.beta_f {
                out.push((format!("L{i}.F.beta"), b));
            }
        }
        if let Some(g) = &self.final_gamma {
            out.push(("final.gamma".to_string(), g));
        }
        out.push(("cls.w".to_string(), &self.classifier));
        out.push(("cls.b".to_string(), &self.cls_bias));
        out
    }

    /// Mutable leaves in the same order as [`leaves`](Self::leaves).
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            for hp in &mut l.heads {
                out.push(&mut hp.w_q);
                out.push(&mut hp.w_k);
                out.push(&mut hp.w_v);
                out.push(&mut hp.w_o);
            }
            out.push(&mut l.w_u);
            out.push(&mut l.w_d);
            out.push(&mut l.gamma_m);
            if let Some(b) = &mut l.beta_m {
                out.push(b);
            }
            out.push(&mut l.gamma_f);
            if let Some(b) = &mut l.beta_f {
                out.push(b);
            }
        }
        if let Some(g) = &mut self.final_gamma {
            out.push(g);
        }
        out.push(&mut self.classifier);
        out.push(&mut self.cls_bias);
        out
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadParams {
                            w_q: f(&h.w_q),
                            w_k: f(&h.w_k),
                            w_v: f(&h.w_v),
                            w_o: f(&h.w_o),
                        })
                        .collect(),
                    w_u: f(&l.w_u),
                    w_d: f(&l.w_d),
                    gamma_m: f(&l.gamma_m),
                    beta_m: l.beta_m.as_ref().map(&mut *f),
                    gamma_f: f(&l.gamma_f),
                    beta_f: l.beta_f.as_ref().map(&mut *f),
                })
                .collect(),
            final_gamma: self.final_gamma.as_ref().map(&mut *f),
            classifier: f(&self.classifier),
            cls_bias: f(&self.cls_bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl TransformerModel {
    /// Random initialization from `config.seed`. Norm scales and biases are
    /// perturbed away from 1 and 0 so that folding identities are exercised
    /// from the start.
    pub fn random(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let d = config.d_model;
        let dh = config.head_dim();
        let post_ln = config.arch == Arch::PostLn;
        let attn_std = 1.0 / (d as f64).sqrt();
        let norm_scale = |rng: &mut Rng| Tensor::from_fn(d, 1, |_, _| 1.0 + 0.1 * rng.normal());

        let tok_emb = rng.normal_tensor(config.vocab_size, d, 1.0);
        let pos_emb = rng.normal_tensor(config.max_seq_len, d, 0.3);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let heads = (0..config.n_heads)
                .map(|_| HeadParams {
                    w_q: rng.normal_tensor(dh, d, attn_std),
                    w_k: rng.normal_tensor(dh, d, attn_std),
                    w_v: rng.normal_tensor(dh, d, attn_std),
                    w_o: rng.normal_tensor(dh, d, attn_std),
                })
                .collect();
            let w_u = rng.normal_tensor(config.d_ff, d, attn_std);
            let w_d = rng.normal_tensor(config.d_ff, d, 1.0 / (config.d_ff as f64).sqrt());
            let gamma_m = norm_scale(&mut rng);
            let beta_m = post_ln.then(|| rng.normal_tensor(d, 1, 0.1));
            let gamma_f = norm_scale(&mut rng);
            let beta_f = post_ln.then(|| rng.normal_tensor(d, 1, 0.1));
            layers.push(LayerParams {
                heads,
                w_u,
                w_d,
                gamma_m,
                beta_m,
                gamma_f,
                beta_f,
            });
        }
        let final_gamma = (!post_ln).then(|| norm_scale(&mut rng));
        let classifier = rng.normal_tensor(config.n_classes, d, attn_std);
        let cls_bias = Tensor::zeros(config.n_classes, 1);
        let params = ModelParams {
            tok_emb,
            pos_emb,
            layers,
            final_gamma,
            classifier,
            cls_bias,
        };
        Ok(Self { config, params })
    }

    /// Checks every parameter's shape against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, dh, df) = (c.d_model, c.head_dim(), c.d_ff);
        let want = |name: &str, t: &Tensor, shape: (usize, usize)| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Input(format!(
                    "parameter {name} has shape {}x{}, expected {}x{}",
                    t.rows(),
                    t.cols(),
                    shape.0,
                    shape.1
                )));
            }
            Ok(())
        };
        let p = &self.params;
        want("tok_emb", &p.tok_emb, (c.vocab_size, d))?;
        want("pos_emb", &p.pos_emb, (c.max_seq_len, d))?;
        if p.layers.len() != c.n_layers {
            return Err(Error::Input(format!(
                "model has {} layers, config says {}",
                p.layers.len(),
                c.n_layers
            )));
        }
        for l in &p.layers {
            if l.heads.len() != c.n_heads {
                return Err(Error::Input("head count does not match config".into()));
            }
            for h in &l.heads {
                for (n, t) in [("w_q", &h.w_q), ("w_k", &h.w_k), ("w_v", &h.w_v), ("w_o", &h.w_o)] {
                    want(n, t, (dh, d))?;
                }
            }
            want("w_u", &l.w_u, (df, d))?;
            want("w_d", &l.w_d, (df, d))?;
            want("gamma_m", &l.gamma_m, (d, 1))?;
            want("gamma_f", &l.gamma_f, (d, 1))?;
            let post_ln = c.arch == Arch::PostLn;
            if l.beta_m.is_some() != post_ln || l.beta_f.is_some() != post_ln {
                return Err(Error::Input("norm biases must exist exactly for post-LN".into()));
            }
        }
        if p.final_gamma.is_some() != (c.arch == Arch::PreRms) {
            return Err(Error::Input("final norm must exist exactly for pre-RMSNorm".into()));
        }
        want("cls.w", &p.classifier, (c.n_classes, d))?;
        want("cls.b", &p.cls_bias, (c.n_classes, 1))?;
        Ok(())
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        self.config.check_tokens(tokens)
    }

    pub fn n_params(&self) -> usize {
        self.params.leaves().iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_model_is_consistent() {
        for arch in [Arch::PostLn, Arch::PreRms] {
            let m = TransformerModel::random(ModelConfig::toy(arch)).unwrap();
            m.validate().unwrap();
            assert_eq!(m.params.layers.len(), 2);
        }
    }

    #[test]
    fn leaves_and_leaves_mut_agree() {
        let mut m = TransformerModel::random(ModelConfig::toy(Arch::PostLn)).unwrap();
        let shapes: Vec<_> = m.params.leaves().iter().map(|(_, t)| t.shape()).collect();
        let mut_shapes: Vec<_> = m.params.leaves_mut().iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, mut_shapes);
        let names: Vec<String> = m.params.leaves().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }

    #[test]
    fn token_checks() {
        let m = TransformerModel::random(ModelConfig::toy(Arch::PostLn)).unwrap();
        assert!(m.check_tokens(&[0, 7]).is_ok());
        assert!(matches!(m.check_tokens(&[8]), Err(Error::Input(_))));
        assert!(m.check_tokens(&[0; 10]).is_err());
        assert!(m.check_tokens(&[]).is_err());
    }

    #[test]
    fn same_seed_same_model() {
        let a = TransformerModel::random(ModelConfig::toy(Arch::PreRms)).unwrap();
        let b = TransformerModel::random(ModelConfig::toy(Arch::PreRms)).unwrap();
        assert_eq!(a, b);
    }
}
