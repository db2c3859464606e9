//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "HIMDLCKP"
//! version     u32
//! header_len  u64
//! header      JSON: configs, objective echo, history, array shapes
//! arrays      f64: norm mean, norm std, then weights and bias per layer
//! checksum    u64      FNV-1a over every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dense, HeadOutputs, Mlp, NetConfig, TrainConfig, TrainHistory};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"HIMDLCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-feature standardisation fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    /// Population mean and standard deviation per column; a constant column
    /// gets unit scale.
    pub fn fit<T: Real>(features: &[T], dim: usize) -> Result<Self> {
        if dim == 0 || features.is_empty() || features.len() % dim != 0 {
            return Err(Error::Dimension { expected: dim, got: features.len() });
        }
        let n = (features.len() / dim) as f64;
        let mut mean = vec![0.0; dim];
        for row in features.chunks(dim) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v.as_f64());
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in features.chunks(dim) {
            var.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v.as_f64() - m).powi(2));
        }
        let std = var.iter().map(|s| (s / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Ok(FeatureNorm { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply<T: Real>(&self, features: &[T]) -> Result<Vec<T>> {
        let dim = self.dim();
        if features.len() % dim != 0 {
            return Err(Error::Dimension { expected: dim, got: features.len() % dim });
        }
        let mean: Vec<T> = self.mean.iter().map(|&m| T::lit(m)).collect();
        let std: Vec<T> = self.std.iter().map(|&s| T::lit(s)).collect();
        Ok(features
            .chunks(dim)
            .flat_map(|row| row.iter().zip(&mean).zip(&std).map(|((&x, &m), &s)| (x - m) / s))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub inputs: usize,
    pub outputs: usize,
    #[serde(skip)]
    pub weights: Vec<f64>,
    #[serde(skip)]
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub objective: serde_json::Value,
    pub norm: FeatureNorm,
    pub layers: Vec<LayerParams>,
    pub history: TrainHistory,
}

#[derive(Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    train: TrainConfig,
    objective: serde_json::Value,
    history: TrainHistory,
    norm_dim: usize,
    layers: Vec<LayerParams>,
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("array too large".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn from_model<T: Real>(
        net: &Mlp<T>,
        norm: FeatureNorm,
        train: TrainConfig,
        objective: serde_json::Value,
        history: TrainHistory,
    ) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| LayerParams {
                inputs: l.inputs,
                outputs: l.outputs,
                weights: l.weights.iter().map(|w| w.as_f64()).collect(),
                bias: l.bias.iter().map(|b| b.as_f64()).collect(),
            })
            .collect();
        Checkpoint { net: net.config().clone(), train, objective, norm, layers, history }
    }

    pub fn to_model<T: Real>(&self) -> Result<Model<T>> {
        let layers = self
            .layers
            .iter()
            .map(|l| Dense {
                inputs: l.inputs,
                outputs: l.outputs,
                weights: l.weights.iter().map(|&w| T::lit(w)).collect(),
                bias: l.bias.iter().map(|&b| T::lit(b)).collect(),
            })
            .collect();
        Ok(Model { net: Mlp::from_layers(self.net.clone(), layers)?, norm: self.norm.clone() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            net: self.net.clone(),
            train: self.train.clone(),
            objective: self.objective.clone(),
            history: self.history.clone(),
            norm_dim: self.norm.dim(),
            layers: self.layers.clone(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let arrays = self
            .norm
            .mean
            .iter()
            .chain(&self.norm.std)
            .chain(self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)));
        for v in arrays {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("bad magic bytes".into()));
        }
        let mut r = Reader { buf: bytes, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let header_len = usize::try_from(r.u64()?).map_err(|_| Error::Corrupt("header length".into()))?;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let mean = r.f64s(header.norm_dim)?;
        let std = r.f64s(header.norm_dim)?;
        let mut layers = header.layers;
        for l in &mut layers {
            l.weights = r.f64s(l.inputs.saturating_mul(l.outputs))?;
            l.bias = r.f64s(l.outputs)?;
        }
        let body_end = r.pos;
        let stored = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if fnv1a(&bytes[..body_end]) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        Ok(Checkpoint {
            net: header.net,
            train: header.train,
            objective: header.objective,
            norm: FeatureNorm { mean, std },
            layers,
            history: header.history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// A trained network bundled with its input standardisation.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub net: Mlp<T>,
    pub norm: FeatureNorm,
}

impl<T: Real> Model<T> {
    /// Forward pass on raw (unstandardised) features.
    pub fn forward(&self, raw_features: &[T]) -> Result<HeadOutputs<T>> {
        self.net.forward(&self.norm.apply(raw_features)?)
    }
}
