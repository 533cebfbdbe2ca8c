//! Binary checkpoints.
//!
//! A file is a 4-byte magic, a `u32` version, a `u32` count of header words
//! followed by that many `u64` words, a `u64` record count, and the
//! records. Each record is a `u32` name length, the UTF-8 name, `rows` and
//! `cols` as `u64`, and `rows·cols` row-major `f64` values. Everything is
//! little-endian.

use std::collections::HashMap;
use std::path::Path;

use crate::calibration::{CalibrationFeatures, HeadFeatures, LayerFeatures};
use crate::error::{Error, Result};
use crate::fusing::{FusedFfn, FusedHead, FusedLayer, FusedModel, FusedSite, LayerDims, Link};
use crate::model::{Arch, ModelConfig, TransformerModel};
use crate::numerics::Tensor;
use crate::projection::ProjectionSet;
use crate::pruning::MaskSet;

pub const MODEL_MAGIC: [u8; 4] = *b"SP3M";
pub const FUSED_MAGIC: [u8; 4] = *b"SP3F";
pub const VERSION: u32 = 1;

/// Raw contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub header: Vec<u64>,
    pub records: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        for w in &self.header {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses `bytes`, requiring the given magic.
    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if found != magic {
            return Err(r.error_at(0, format!("bad magic {found:?}, expected {magic:?}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let n_header = r.u32()? as usize;
        let header = (0..n_header).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n_records = r.u64()?;
        let mut records = Vec::new();
        for _ in 0..n_records {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = match std::str::from_utf8(r.take(len)?) {
                Ok(n) => n.to_string(),
                Err(_) => return Err(r.error_at(at, "record name is not UTF-8".into())),
            };
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.error_at(at, format!("record {name:?} claims {rows}x{cols} values")))?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            records.push((name, Tensor::new(rows, cols, data)?));
        }
        if r.remaining() != 0 {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { magic, header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path, magic: [u8; 4]) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, magic)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn error_at(&self, offset: usize, msg: String) -> Error {
        Error::Format {
            offset: offset as u64,
            msg,
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.remaining() < n {
            return Err(self.error_at(self.pos, format!("unexpected end of file, wanted {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

/// Records by name, for decoding.
struct Records {
    map: HashMap<String, Tensor>,
    end: u64,
}

impl Records {
    fn new(c: Container, end: usize) -> Result<Self> {
        let mut map = HashMap::new();
        for (name, t) in c.records {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::Format {
                    offset: end as u64,
                    msg: format!("duplicate record {name:?}"),
                });
            }
        }
        Ok(Self { map, end: end as u64 })
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.map.keys().any(|k| k.starts_with(prefix))
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    fn need(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::Format {
            offset: self.end,
            msg: format!("missing record {name:?}"),
        })
    }

    fn shaped(&self, name: &str, like: &Tensor) -> Result<Tensor> {
        let t = self.need(name)?;
        if t.shape() != like.shape() {
            return Err(Error::Format {
                offset: self.end,
                msg: format!("record {name:?} is {:?}, expected {:?}", t.shape(), like.shape()),
            });
        }
        Ok(t.clone())
    }

    fn indices(&self, name: &str) -> Result<Vec<Option<usize>>> {
        Ok(self
            .need(name)?
            .data()
            .iter()
            .map(|&v| (v >= 0.0).then_some(v as usize))
            .collect())
    }

    fn bad(&self, msg: String) -> Error {
        Error::Format { offset: self.end, msg }
    }
}

fn index_row(v: &[Option<usize>]) -> Tensor {
    Tensor::new(1, v.len(), v.iter().map(|i| i.map_or(-1.0, |i| i as f64)).collect()).expect("row shape")
}

fn config_words(c: &ModelConfig) -> Vec<u64> {
    vec![
        c.arch.code(),
        c.n_layers as u64,
        c.d_model as u64,
        c.n_heads as u64,
        c.d_ff as u64,
        c.vocab_size as u64,
        c.max_seq_len as u64,
        c.n_classes as u64,
        c.seed,
    ]
}

fn config_from_words(w: &[u64]) -> Result<ModelConfig> {
    if w.len() != 9 {
        return Err(Error::Format {
            offset: 12,
            msg: format!("model header has {} words, expected 9", w.len()),
        });
    }
    let config = ModelConfig {
        arch: Arch::from_code(w[0]).map_err(|e| Error::Format {
            offset: 12,
            msg: e.to_string(),
        })?,
        n_layers: w[1] as usize,
        d_model: w[2] as usize,
        n_heads: w[3] as usize,
        d_ff: w[4] as usize,
        vocab_size: w[5] as usize,
        max_seq_len: w[6] as usize,
        n_classes: w[7] as usize,
        seed: w[8],
    };
    config.validate().map_err(|e| Error::Format {
        offset: 12,
        msg: e.to_string(),
    })?;
    Ok(config)
}

/// A model with whatever later stages have attached to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TransformerModel,
    pub features: Option<CalibrationFeatures>,
    pub proj: Option<ProjectionSet>,
    pub masks: Option<MaskSet>,
}

impl Checkpoint {
    pub fn new(model: TransformerModel) -> Self {
        Self {
            model,
            features: None,
            proj: None,
            masks: None,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut records: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.model.params.leaves() {
            records.push((format!("model.{name}"), t.clone()));
        }
        if let Some(f) = &self.features {
            for (i, l) in f.layers.iter().enumerate() {
                records.push((format!("calib.L{i}.M"), l.x_m.clone()));
                records.push((format!("calib.L{i}.F"), l.x_f.clone()));
                for (h, hf) in l.heads.iter().enumerate() {
                    records.push((format!("calib.L{i}.H{h}.q"), hf.x_q.clone()));
                    records.push((format!("calib.L{i}.H{h}.k"), hf.x_k.clone()));
                    records.push((format!("calib.L{i}.H{h}.v"), hf.x_v.clone()));
                }
            }
            if let Some(x) = &f.x_final {
                records.push(("calib.final".into(), x.clone()));
            }
            let pos: Vec<Option<usize>> = f.positions.iter().map(|&p| Some(p)).collect();
            records.push(("calib.positions".into(), index_row(&pos)));
        }
        if let Some(p) = &self.proj {
            for (name, t) in p.leaves() {
                records.push((format!("proj.{name}"), t.clone()));
            }
            let groups: Vec<Option<usize>> = p.groups.iter().map(|&g| Some(g)).collect();
            records.push(("proj.groups".into(), index_row(&groups)));
        }
        if let Some(m) = &self.masks {
            for (name, _, t) in m.leaves() {
                records.push((format!("mask.{name}"), t.clone()));
            }
        }
        Container {
            magic: MODEL_MAGIC,
            header: config_words(&self.model.config),
            records,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes, MODEL_MAGIC)?;
        let config = config_from_words(&c.header)?;
        let recs = Records::new(c, bytes.len())?;

        let mut model = TransformerModel::random(config.clone())?;
        let names: Vec<String> = model.params.leaves().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.params.leaves_mut()) {
            *slot = recs.shaped(&format!("model.{name}"), slot)?;
        }

        let features = if recs.has_prefix("calib.") {
            let mut layers = Vec::new();
            for i in 0..config.n_layers {
                let heads = (0..config.n_heads)
                    .map(|h| {
                        Ok(HeadFeatures {
                            x_q: recs.need(&format!("calib.L{i}.H{h}.q"))?.clone(),
                            x_k: recs.need(&format!("calib.L{i}.H{h}.k"))?.clone(),
                            x_v: recs.need(&format!("calib.L{i}.H{h}.v"))?.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                layers.push(LayerFeatures {
                    x_m: recs.need(&format!("calib.L{i}.M"))?.clone(),
                    x_f: recs.need(&format!("calib.L{i}.F"))?.clone(),
                    heads,
                });
            }
            let positions: Vec<usize> = recs.indices("calib.positions")?.into_iter().flatten().collect();
            Some(CalibrationFeatures {
                arch: config.arch,
                layers,
                x_final: recs.get("calib.final").cloned(),
                t: positions.len(),
                positions,
            })
        } else {
            None
        };

        let proj = if recs.has_prefix("proj.") {
            let mut p = ProjectionSet::identity(&config);
            let names: Vec<String> = p.leaves().into_iter().map(|(n, _)| n).collect();
            for (name, slot) in names.iter().zip(p.leaves_mut()) {
                *slot = recs.shaped(&format!("proj.{name}"), slot)?;
            }
            p.groups = recs.indices("proj.groups")?.into_iter().flatten().collect();
            p.validate(&config).map_err(|e| recs.bad(e.to_string()))?;
            Some(p)
        } else {
            None
        };

        let masks = if recs.has_prefix("mask.") {
            let mut m = MaskSet::ones(&config);
            let names: Vec<String> = m.leaves().into_iter().map(|(n, _, _)| n).collect();
            for (name, (_, slot)) in names.iter().zip(m.leaves_mut()) {
                *slot = recs.shaped(&format!("mask.{name}"), slot)?;
            }
            Some(m)
        } else {
            None
        };

        Ok(Self {
            model,
            features,
            proj,
            masks,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const FUSED_FIXED_WORDS: usize = 7;
const NO_FINAL: u64 = u64::MAX;

impl FusedModel {
    pub fn to_container(&self) -> Container {
        let mut header = vec![
            self.arch.code(),
            self.d_model as u64,
            self.head_dim as u64,
            self.vocab_size as u64,
            self.max_seq_len as u64,
            self.layers.len() as u64,
            self.final_in.as_ref().map_or(NO_FINAL, |(k, _)| *k as u64),
        ];
        for d in self.layer_dims() {
            header.extend([d.m_in, d.m_out, d.f_in, d.f_out, d.heads, d.d_ff].map(|v| v as u64));
        }
        let mut records = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
            ("cls.w".to_string(), self.classifier.clone()),
            ("cls.b".to_string(), self.cls_bias.clone()),
        ];
        let link = |name: String, l: &Link, records: &mut Vec<(String, Tensor)>| match l {
            Link::Select(map) => records.push((format!("{name}.select"), index_row(map))),
            Link::Dense { w, b } => {
                records.push((format!("{name}.w"), w.clone()));
                if let Some(b) = b {
                    records.push((format!("{name}.b"), b.clone()));
                }
            }
        };
        for (i, l) in self.layers.iter().enumerate() {
            records.push((format!("L{i}.M.sites"), site_row(&l.m)));
            records.push((format!("L{i}.F.sites"), site_row(&l.f)));
            link(format!("L{i}.into_m"), &l.into_m, &mut records);
            link(format!("L{i}.into_f"), &l.into_f, &mut records);
            for (k, h) in l.heads.iter().enumerate() {
                let p = format!("L{i}.H{k}");
                records.push((format!("{p}.index"), Tensor::scalar(h.index as f64)));
                for (n, w, b) in [("q", &h.w_q, &h.b_q), ("k", &h.w_k, &h.b_k), ("v", &h.w_v, &h.b_v)] {
                    records.push((format!("{p}.w_{n}"), w.clone()));
                    if let Some(b) = b {
                        records.push((format!("{p}.b_{n}"), b.clone()));
                    }
                }
                records.push((format!("{p}.w_o"), h.w_o.clone()));
                records.push((format!("{p}.qk"), pair_table(&h.qk_pairs)));
                records.push((format!("{p}.vo"), pair_table(&h.vo_pairs)));
            }
            if let Some(f) = &l.ffn {
                records.push((format!("L{i}.ffn.w_u"), f.w_u.clone()));
                if let Some(b) = &f.b_u {
                    records.push((format!("L{i}.ffn.b_u"), b.clone()));
                }
                records.push((format!("L{i}.ffn.w_d"), f.w_d.clone()));
            }
        }
        if let Some((_, l)) = &self.final_in {
            link("final".to_string(), l, &mut records);
        }
        Container {
            magic: FUSED_MAGIC,
            header,
            records,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes, FUSED_MAGIC)?;
        let header_error = |msg: String| Error::Format { offset: 12, msg };
        let h = c.header.clone();
        if h.len() < FUSED_FIXED_WORDS {
            return Err(header_error("fused header too short".into()));
        }
        let n_layers = h[5] as usize;
        if h.len() != FUSED_FIXED_WORDS + 6 * n_layers {
            return Err(header_error(format!(
                "fused header has {} words for {n_layers} layers",
                h.len()
            )));
        }
        let arch = Arch::from_code(h[0]).map_err(|e| header_error(e.to_string()))?;
        let recs = Records::new(c, bytes.len())?;
        let link = |name: &str| -> Result<Link> {
            if recs.get(&format!("{name}.select")).is_some() {
                return Ok(Link::Select(recs.indices(&format!("{name}.select"))?));
            }
            Ok(Link::Dense {
                w: recs.need(&format!("{name}.w"))?.clone(),
                b: recs.get(&format!("{name}.b")).cloned(),
            })
        };
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let dims = &h[FUSED_FIXED_WORDS + 6 * i..FUSED_FIXED_WORDS + 6 * (i + 1)];
            let n_heads = dims[4] as usize;
            let heads = (0..n_heads)
                .map(|k| {
                    let p = format!("L{i}.H{k}");
                    let w = |n: &str| recs.need(&format!("{p}.{n}")).cloned();
                    let b = |n: &str| recs.get(&format!("{p}.{n}")).cloned();
                    Ok(FusedHead {
                        index: recs.need(&format!("{p}.index"))?.get(0, 0) as usize,
                        w_q: w("w_q")?,
                        w_k: w("w_k")?,
                        w_v: w("w_v")?,
                        b_q: b("b_q"),
                        b_k: b("b_k"),
                        b_v: b("b_v"),
                        w_o: w("w_o")?,
                        qk_pairs: pairs_from(recs.need(&format!("{p}.qk"))?),
                        vo_pairs: pairs_from(recs.need(&format!("{p}.vo"))?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let ffn = match recs.get(&format!("L{i}.ffn.w_u")) {
                Some(w_u) => Some(FusedFfn {
                    w_u: w_u.clone(),
                    b_u: recs.get(&format!("L{i}.ffn.b_u")).cloned(),
                    w_d: recs.need(&format!("L{i}.ffn.w_d"))?.clone(),
                }),
                None => None,
            };
            let layer = FusedLayer {
                m: site_from(&recs, &format!("L{i}.M.sites"))?,
                f: site_from(&recs, &format!("L{i}.F.sites"))?,
                heads,
                ffn,
                into_m: link(&format!("L{i}.into_m"))?,
                into_f: link(&format!("L{i}.into_f"))?,
            };
            let got = LayerDims {
                m_in: layer.m.dim_in,
                m_out: layer.m.dim_out(),
                f_in: layer.f.dim_in,
                f_out: layer.f.dim_out(),
                heads: layer.heads.len(),
                d_ff: layer.ffn.as_ref().map_or(0, |f| f.w_u.rows()),
            };
            let want = [got.m_in, got.m_out, got.f_in, got.f_out, got.heads, got.d_ff].map(|v| v as u64);
            if want != dims {
                return Err(recs.bad(format!("layer {i} records disagree with the dims table")));
            }
            layers.push(layer);
        }
        let final_in = match h[6] {
            NO_FINAL => None,
            k => Some((k as usize, link("final")?)),
        };
        Ok(FusedModel {
            arch,
            d_model: h[1] as usize,
            head_dim: h[2] as usize,
            vocab_size: h[3] as usize,
            max_seq_len: h[4] as usize,
            tok_emb: recs.need("tok_emb")?.clone(),
            pos_emb: recs.need("pos_emb")?.clone(),
            layers,
            final_in,
            classifier: recs.need("cls.w")?.clone(),
            cls_bias: recs.need("cls.b")?.clone(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `[dim_in, out_from_in...]` as one row.
fn site_row(s: &FusedSite) -> Tensor {
    let mut v = vec![Some(s.dim_in)];
    v.extend(s.out_from_in.iter().copied());
    index_row(&v)
}

fn site_from(recs: &Records, name: &str) -> Result<FusedSite> {
    let v = recs.indices(name)?;
    match v.split_first() {
        Some((Some(dim_in), rest)) => Ok(FusedSite {
            dim_in: *dim_in,
            out_from_in: rest.to_vec(),
        }),
        _ => Err(recs.bad(format!("record {name:?} lacks the input width"))),
    }
}

fn pair_table(p: &[(usize, usize)]) -> Tensor {
    Tensor::from_fn(p.len(), 2, |r, c| if c == 0 { p[r].0 as f64 } else { p[r].1 as f64 })
}

fn pairs_from(t: &Tensor) -> Vec<(usize, usize)> {
    (0..t.rows())
        .map(|r| (t.get(r, 0) as usize, t.get(r, 1) as usize))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let c = Container {
            magic: MODEL_MAGIC,
            header: vec![1, u64::MAX, 0],
            records: vec![
                (
                    "a".into(),
                    Tensor::new(1, 3, vec![0.1, -0.0, f64::MIN_POSITIVE]).unwrap(),
                ),
                ("empty".into(), Tensor::zeros(0, 4)),
            ],
        };
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, MODEL_MAGIC).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.records[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn wrong_magic_reports_offset_zero() {
        let c = Container {
            magic: FUSED_MAGIC,
            header: vec![],
            records: vec![],
        };
        match Container::from_bytes(&c.to_bytes(), MODEL_MAGIC) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_is_a_format_error() {
        let m = TransformerModel::random(ModelConfig::toy(Arch::PreRms)).unwrap();
        let bytes = Checkpoint::new(m).to_bytes();
        for cut in [3, 10, 40, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn model_with_masks_round_trips() {
        let m = TransformerModel::random(ModelConfig::toy(Arch::PostLn)).unwrap();
        let mut ck = Checkpoint::new(m);
        ck.proj = Some(ProjectionSet::identity(&ck.model.config));
        ck.masks = Some(MaskSet::filled(&ck.model.config, 0.25));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }
}
