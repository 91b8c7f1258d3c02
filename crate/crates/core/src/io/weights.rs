//! Weight container.
//!
//! ```text
//! 8 bytes   magic "INSTFWT\0"
//! u32 LE    format version (1)
//! u64 LE    header length H
//! H bytes   JSON header
//! ...       tensor payload
//! ```
//!
//! The header holds the decoder convention and, for every tensor, its dtype
//! (`f32` or `f64`), shape and byte offset into the payload. Linear layers
//! are stored as `<name>.weight` (`out x in`, row-major) and `<name>.bias`;
//! MLP layers as `<name>.<i>.weight`/`.bias`; layer norms as `.gamma` and
//! `.beta`. Sections are optional:
//!
//! - `geo_pool.local.*`, `geo_pool.weight.*`
//! - `decoder.layer<l>.{cross,self}.{q,k,v,out}`, `decoder.layer<l>.ffn.*`,
//!   `decoder.layer<l>.norm_{cross,self,ffn}`, `decoder.mask_head`
//! - `heads.cls`, `heads.box.*`, `heads.contrastive.*`, `heads.semantic.*`

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decoder::{AttentionWeights, DecoderConvention, DecoderLayerWeights, DecoderWeights, NUM_LAYERS};
use crate::error::{Error, Result};
use crate::merging::HeadWeights;
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::superpoint::GeoPoolWeights;

pub const MAGIC: &[u8; 8] = b"INSTFWT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    convention: DecoderConvention,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named tensors plus the decoder convention.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    pub convention: DecoderConvention,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorStore {
    pub fn parse(path: &Path, bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::parse(path, offset as u64, msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err(0, "not a weight container (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(err(8, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_start = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err(12, format!("header length {hlen} runs past the end of the file")))?;
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])
            .map_err(|e| err(20 + e.column().saturating_sub(1), format!("bad header: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            let count = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let end = count
                .and_then(|c| c.checked_mul(e.dtype.size()))
                .and_then(|n| n.checked_add(e.offset))
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| {
                    err(
                        payload_start + e.offset.min(payload.len()),
                        format!("tensor {name} with shape {:?} exceeds the payload", e.shape),
                    )
                })?;
            let raw = &payload[e.offset..end];
            let data = match e.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            };
            tensors.insert(name, Tensor { shape: e.shape, data });
        }
        Ok(TensorStore {
            convention: header.convention,
            tensors,
        })
    }

    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut entries = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    dtype,
                    shape: t.shape.clone(),
                    offset: payload.len(),
                },
            );
            for &v in &t.data {
                match dtype {
                    DType::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let header = serde_json::to_vec(&Header {
            convention: self.convention,
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    fn get(&self, name: &str, dims: usize) -> Result<&Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("weight file is missing tensor {name}")))?;
        if t.shape.len() != dims {
            return Err(Error::config(format!("tensor {name} should have {dims} dimensions, has {:?}", t.shape)));
        }
        Ok(t)
    }

    fn vector(&self, name: &str) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.get(name, 1)?.data.clone()))
    }

    fn linear(&self, name: &str) -> Result<Linear> {
        let w = self.get(&format!("{name}.weight"), 2)?;
        let weight = DMatrix::from_row_slice(w.shape[0], w.shape[1], &w.data);
        Linear::new(weight, self.vector(&format!("{name}.bias"))?)
    }

    fn mlp(&self, name: &str) -> Result<Mlp> {
        let mut layers = Vec::new();
        while self.tensors.contains_key(&format!("{name}.{}.weight", layers.len())) {
            layers.push(self.linear(&format!("{name}.{}", layers.len()))?);
        }
        if layers.is_empty() {
            return Err(Error::config(format!("weight file is missing {name}.0.weight")));
        }
        Mlp::new(layers)
    }

    fn layer_norm(&self, name: &str) -> Result<LayerNorm> {
        LayerNorm::new(self.vector(&format!("{name}.gamma"))?, self.vector(&format!("{name}.beta"))?)
    }

    fn put(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.insert(name, Tensor { shape, data });
    }

    fn put_linear(&mut self, name: &str, l: &Linear) {
        let w = &l.weight;
        let data = (0..w.nrows()).flat_map(|i| (0..w.ncols()).map(move |j| w[(i, j)])).collect();
        self.put(format!("{name}.weight"), vec![w.nrows(), w.ncols()], data);
        self.put(format!("{name}.bias"), vec![l.bias.len()], l.bias.iter().copied().collect());
    }

    fn put_mlp(&mut self, name: &str, m: &Mlp) {
        for (i, l) in m.layers().iter().enumerate() {
            self.put_linear(&format!("{name}.{i}"), l);
        }
    }

    fn put_layer_norm(&mut self, name: &str, n: &LayerNorm) {
        self.put(format!("{name}.gamma"), vec![n.dim()], n.gamma.iter().copied().collect());
        self.put(format!("{name}.beta"), vec![n.dim()], n.beta.iter().copied().collect());
    }
}

/// Every trainable part of the pipeline; absent parts use fallbacks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelWeights {
    pub geo_pool: Option<GeoPoolWeights>,
    pub decoder: Option<DecoderWeights>,
    pub heads: HeadWeights,
}

const ATTN: [&str; 4] = ["q", "k", "v", "out"];

impl ModelWeights {
    pub fn from_store(store: &TensorStore) -> Result<Self> {
        let geo_pool = if store.has_prefix("geo_pool.") {
            Some(GeoPoolWeights::new(store.mlp("geo_pool.local")?, store.mlp("geo_pool.weight")?)?)
        } else {
            None
        };
        let cls_head = if store.has_prefix("heads.cls.") {
            Some(store.linear("heads.cls")?)
        } else {
            None
        };
        let decoder = if store.has_prefix("decoder.") {
            let attn = |p: &str| -> Result<AttentionWeights> {
                let [q, k, v, out] = ATTN.map(|n| store.linear(&format!("{p}.{n}")));
                Ok(AttentionWeights {
                    q: q?,
                    k: k?,
                    v: v?,
                    out: out?,
                })
            };
            let layers = (0..NUM_LAYERS)
                .map(|l| {
                    let p = format!("decoder.layer{l}");
                    Ok(DecoderLayerWeights {
                        cross: attn(&format!("{p}.cross"))?,
                        self_attn: attn(&format!("{p}.self"))?,
                        ffn: store.mlp(&format!("{p}.ffn"))?,
                        norm_cross: store.layer_norm(&format!("{p}.norm_cross"))?,
                        norm_self: store.layer_norm(&format!("{p}.norm_self"))?,
                        norm_ffn: store.layer_norm(&format!("{p}.norm_ffn"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(DecoderWeights::new(
                layers,
                store.linear("decoder.mask_head")?,
                cls_head,
                store.convention,
            )?)
        } else {
            None
        };
        let optional_mlp = |name: &str| -> Result<Option<Mlp>> {
            if store.has_prefix(&format!("{name}.")) {
                store.mlp(name).map(Some)
            } else {
                Ok(None)
            }
        };
        let heads = HeadWeights {
            bbox: optional_mlp("heads.box")?,
            contrastive: optional_mlp("heads.contrastive")?,
            semantic: optional_mlp("heads.semantic")?,
        };
        if let Some(d) = &decoder {
            heads.validate(d.channels())?;
        }
        Ok(ModelWeights {
            geo_pool,
            decoder,
            heads,
        })
    }

    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::default();
        if let Some(g) = &self.geo_pool {
            s.put_mlp("geo_pool.local", &g.mlp_local);
            s.put_mlp("geo_pool.weight", &g.mlp_weight);
        }
        if let Some(d) = &self.decoder {
            s.convention = d.convention;
            for (l, layer) in d.layers.iter().enumerate() {
                let p = format!("decoder.layer{l}");
                for (kind, a) in [("cross", &layer.cross), ("self", &layer.self_attn)] {
                    for (n, lin) in ATTN.iter().zip([&a.q, &a.k, &a.v, &a.out]) {
                        s.put_linear(&format!("{p}.{kind}.{n}"), lin);
                    }
                }
                s.put_mlp(&format!("{p}.ffn"), &layer.ffn);
                s.put_layer_norm(&format!("{p}.norm_cross"), &layer.norm_cross);
                s.put_layer_norm(&format!("{p}.norm_self"), &layer.norm_self);
                s.put_layer_norm(&format!("{p}.norm_ffn"), &layer.norm_ffn);
            }
            s.put_linear("decoder.mask_head", &d.mask_head);
            if let Some(c) = &d.cls_head {
                s.put_linear("heads.cls", c);
            }
        }
        for (name, head) in [
            ("heads.box", &self.heads.bbox),
            ("heads.contrastive", &self.heads.contrastive),
            ("heads.semantic", &self.heads.semantic),
        ] {
            if let Some(m) = head {
                s.put_mlp(name, m);
            }
        }
        s
    }
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelWeights::from_store(&TensorStore::parse(path, &bytes)?)
}

pub fn save_weights(path: &Path, weights: &ModelWeights, dtype: DType) -> Result<()> {
    std::fs::write(path, weights.to_store().to_bytes(dtype)).map_err(|e| Error::io(path, e))
}
