//! `TGNN` model snapshot encoding.
//!
//! ```text
//! "TGNN" | version u16 | layer count u32
//! per layer: out_dim u32 | in_dim u32 | activation tag u8 (0 linear, 1 prelu)
//! per layer: weights (row-major) f32 | biases f32 | slopes f32 (prelu only)
//! trailer:   dropout f64 | has_config u8
//!            [learning_rate f64 | epochs u32 | batch_size u32 | seed u64 |
//!             optimizer tag u8 (0 sgd, 1 momentum) | momentum f64]
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, DenseLayer, Mlp, OptimizerKind, TrainConfig};
use crate::catalog::{write_atomic, ByteReader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TGNN";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub net: Mlp,
    pub config: Option<TrainConfig>,
}

impl ModelSnapshot {
    pub fn new(net: Mlp, config: Option<TrainConfig>) -> Self {
        Self { net, config }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.net.layers.len() as u32).to_le_bytes());
        for l in &self.net.layers {
            out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
            out.push(match l.activation {
                Activation::Linear => 0,
                Activation::PRelu(_) => 1,
            });
        }
        let put = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        for l in &self.net.layers {
            l.weights.iter().for_each(|&v| put(out, v));
            l.bias.iter().for_each(|&v| put(out, v));
            if let Activation::PRelu(s) = &l.activation {
                s.iter().for_each(|&v| put(out, v));
            }
        }
        out.extend_from_slice(&self.net.dropout_prob.to_le_bytes());
        match &self.config {
            None => out.push(0),
            Some(c) => {
                out.push(1);
                out.extend_from_slice(&c.learning_rate.to_le_bytes());
                out.extend_from_slice(&(c.epochs as u32).to_le_bytes());
                out.extend_from_slice(&(c.batch_size as u32).to_le_bytes());
                out.extend_from_slice(&c.seed.to_le_bytes());
                let (tag, momentum) = match c.optimizer {
                    OptimizerKind::Sgd => (0u8, 0.0f64),
                    OptimizerKind::SgdMomentum(m) => (1, m),
                };
                out.push(tag);
                out.extend_from_slice(&momentum.to_le_bytes());
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let snap = Self::decode_from(&mut r)?;
        if r.remaining() != 0 {
            return Err(r.corrupt("trailing bytes after model snapshot".into()));
        }
        Ok(snap)
    }

    pub(crate) fn decode_from(r: &mut ByteReader<'_>) -> Result<Self> {
        if r.take(4)? != MAGIC {
            return Err(r.corrupt("bad magic, expected TGNN".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(r.corrupt("snapshot has no layers".into()));
        }
        let mut shapes = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let out = r.u32()? as usize;
            let inp = r.u32()? as usize;
            let tag = r.u8()?;
            if tag > 1 {
                return Err(r.corrupt(format!("unknown activation tag {tag}")));
            }
            shapes.push((out, inp, tag));
        }
        let mut layers = Vec::with_capacity(count);
        for &(out, inp, tag) in &shapes {
            let n = out
                .checked_mul(inp)
                .ok_or_else(|| r.corrupt("layer size overflow".into()))?;
            let to64 = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
            let weights = Array2::from_shape_vec((out, inp), to64(r.f32_vec(n)?))
                .expect("shape matches length");
            let bias = Array1::from(to64(r.f32_vec(out)?));
            let activation = if tag == 1 {
                Activation::PRelu(Array1::from(to64(r.f32_vec(out)?)))
            } else {
                Activation::Linear
            };
            let at = r.offset;
            layers.push(DenseLayer::new(weights, bias, activation).map_err(|e| Error::Corrupt {
                offset: at,
                message: e.to_string(),
            })?);
        }
        let dropout = r.f64()?;
        let at = r.offset;
        let net = Mlp::new(layers, dropout).map_err(|e| Error::Corrupt {
            offset: at,
            message: e.to_string(),
        })?;
        let config = match r.u8()? {
            0 => None,
            1 => {
                let learning_rate = r.f64()?;
                let epochs = r.u32()? as usize;
                let batch_size = r.u32()? as usize;
                let seed = r.u64()?;
                let tag = r.u8()?;
                let momentum = r.f64()?;
                let optimizer = match tag {
                    0 => OptimizerKind::Sgd,
                    1 => OptimizerKind::SgdMomentum(momentum),
                    t => return Err(r.corrupt(format!("unknown optimizer tag {t}"))),
                };
                Some(TrainConfig {
                    learning_rate,
                    epochs,
                    batch_size,
                    seed,
                    optimizer,
                })
            }
            t => return Err(r.corrupt(format!("bad config flag {t}"))),
        };
        Ok(Self { net, config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ActivationKind;

    #[test]
    fn round_trip_is_bitwise() {
        let net = Mlp::init(&[7, 5, 3], ActivationKind::PRelu, ActivationKind::Linear, 0.5, 21).unwrap();
        let snap = ModelSnapshot::new(net, Some(TrainConfig::default()));
        let bytes = snap.encode();
        assert_eq!(&bytes[..4], b"TGNN");
        let back = ModelSnapshot::decode(&bytes).unwrap();
        assert_eq!(back, snap);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncation_is_an_error() {
        let net = Mlp::init(&[4, 2], ActivationKind::Linear, ActivationKind::Linear, 0.0, 1).unwrap();
        let bytes = ModelSnapshot::new(net, None).encode();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(
                ModelSnapshot::decode(&bytes[..cut]),
                Err(Error::Corrupt { .. })
            ));
        }
    }
}
