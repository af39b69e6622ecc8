//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "RBNN" | version u32 | config_len u32 | config JSON
//! input rank u32 | input dims u32.. | classes u32 | n_layers u32
//! per layer: kind u8 | fields
//! ```
//!
//! Binary conv layers store latent weights, `α`, `γ`, both sign snapshots and
//! an optional packed copy of the current signs, which is checked against the
//! latent weights on load. There is no timestamp, so equal models give equal
//! bytes.

use std::fs;
use std::path::Path;

use crate::binarize::BinaryLayer;
use crate::bitkernel::PackedBitTensor;
use crate::model::{BinaryConv, Layer, Linear, Model, RealConv};
use crate::numcore::{BatchNormParams, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RBNN";
pub const VERSION: u32 = 1;

const KIND_CONV: u8 = 0;
const KIND_BINARY: u8 = 1;
const KIND_BATCHNORM: u8 = 2;
const KIND_HARDTANH: u8 = 3;
const KIND_FLATTEN: u8 = 4;
const KIND_LINEAR: u8 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub model: Model,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f32s(&mut self, v: &[f32]) {
        self.u32(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len());
        for &d in t.shape() {
            self.u32(d);
        }
        for x in t.data() {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn words(&mut self, p: &PackedBitTensor) {
        self.u32(p.words().len());
        for w in p.words() {
            self.0.extend_from_slice(&w.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, expected: impl Into<String>, actual: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(
                format!("{n} more bytes at offset {}", self.pos),
                format!("{} bytes left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s_n(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err("sane length", n.to_string()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()?;
        self.f32s_n(n)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| self.err("tensor size that fits in memory", format!("{shape:?}")))?;
        let data = self.f32s_n(n)?;
        Tensor::new(shape, data)
    }

    fn words(&mut self) -> Result<Vec<u64>> {
        let n = self.u32()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("sane length", n.to_string()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Serialises `model` with the run configuration. `include_packed` adds the
/// bit-packed signs of every binary layer.
pub fn to_bytes(model: &Model, config: &serde_json::Value, include_packed: bool) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    let cfg = serde_json::to_vec(config)?;
    w.u32(cfg.len());
    w.0.extend_from_slice(&cfg);
    w.u32(model.input_shape().len());
    for &d in model.input_shape() {
        w.u32(d);
    }
    w.u32(model.num_classes());
    w.u32(model.layers().len());
    for layer in model.layers() {
        match layer {
            Layer::Conv(c) => {
                w.u8(KIND_CONV);
                w.u32(c.stride);
                w.u32(c.padding);
                w.tensor(&c.weight);
            }
            Layer::BinaryConv(b) => {
                w.u8(KIND_BINARY);
                w.u32(b.stride);
                w.u32(b.padding);
                w.tensor(&b.layer.latent_weight);
                w.f32s(&b.layer.alpha);
                w.f32s(&b.layer.gamma);
                w.words(&b.layer.prev_sign);
                w.words(&b.layer.prev_prev_sign);
                w.u8(include_packed as u8);
                if include_packed {
                    w.words(&b.layer.current_signs());
                }
            }
            Layer::BatchNorm(bn) => {
                w.u8(KIND_BATCHNORM);
                w.f32s(&bn.weight);
                w.f32s(&bn.bias);
                w.f32s(&bn.running_mean);
                w.f32s(&bn.running_var);
                w.f32s(&[bn.eps, bn.momentum]);
            }
            Layer::Hardtanh => w.u8(KIND_HARDTANH),
            Layer::Flatten => w.u8(KIND_FLATTEN),
            Layer::Linear(l) => {
                w.u8(KIND_LINEAR);
                w.tensor(&l.weight);
                w.f32s(&l.bias);
            }
        }
    }
    Ok(w.0)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(r.err("magic \"RBNN\"", format!("{magic:?}")));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let cfg_len = r.u32()?;
    let config: serde_json::Value = serde_json::from_slice(r.take(cfg_len)?)?;
    let rank = r.u32()?;
    let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let classes = r.u32()?;
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for idx in 0..n_layers {
        let kind = r.u8()?;
        let layer = match kind {
            KIND_CONV => {
                let (stride, padding) = (r.u32()?, r.u32()?);
                Layer::Conv(RealConv {
                    weight: r.tensor()?,
                    stride,
                    padding,
                })
            }
            KIND_BINARY => {
                let (stride, padding) = (r.u32()?, r.u32()?);
                let weight = r.tensor()?;
                if weight.shape().len() != 4 {
                    return Err(r.err("rank-4 binary weight", format!("{:?}", weight.shape())));
                }
                let mut layer = BinaryLayer::new(weight, 0.0)?;
                layer.alpha = r.f32s()?;
                layer.gamma = r.f32s()?;
                let shape = layer.prev_sign.logical_shape().to_vec();
                layer.prev_sign = PackedBitTensor::from_words(shape.clone(), r.words()?)?;
                layer.prev_prev_sign = PackedBitTensor::from_words(shape.clone(), r.words()?)?;
                if r.u8()? == 1 {
                    let packed = PackedBitTensor::from_words(shape, r.words()?)?;
                    if packed != layer.current_signs() {
                        return Err(r.err(
                            format!("packed signs of layer {idx} matching sign(latent)"),
                            "mismatched packed signs",
                        ));
                    }
                }
                layer.check_invariants()?;
                Layer::BinaryConv(BinaryConv { layer, stride, padding })
            }
            KIND_BATCHNORM => {
                let weight = r.f32s()?;
                let bias = r.f32s()?;
                let running_mean = r.f32s()?;
                let running_var = r.f32s()?;
                let hyper = r.f32s()?;
                let c = weight.len();
                if [bias.len(), running_mean.len(), running_var.len()] != [c; 3] || hyper.len() != 2 {
                    return Err(r.err(format!("batchnorm vectors of length {c}"), "ragged vectors"));
                }
                Layer::BatchNorm(BatchNormParams {
                    weight,
                    bias,
                    running_mean,
                    running_var,
                    eps: hyper[0],
                    momentum: hyper[1],
                })
            }
            KIND_HARDTANH => Layer::Hardtanh,
            KIND_FLATTEN => Layer::Flatten,
            KIND_LINEAR => Layer::Linear(Linear {
                weight: r.tensor()?,
                bias: r.f32s()?,
            }),
            other => return Err(r.err("layer kind 0..=5", other.to_string())),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} bytes", r.pos), format!("{} bytes", bytes.len())));
    }
    Ok(Checkpoint {
        config,
        model: Model::new(input_shape, classes, layers)?,
    })
}

pub fn save(path: &Path, model: &Model, config: &serde_json::Value, include_packed: bool) -> Result<()> {
    fs::write(path, to_bytes(model, config, include_packed)?)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        Model::desk_cnn(
            [1, 8, 8],
            3,
            &ModelSpec::default(),
            1e-4,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_with_and_without_packed() {
        let m = model();
        let cfg = serde_json::json!({"seed": 1});
        for packed in [false, true] {
            let bytes = to_bytes(&m, &cfg, packed).unwrap();
            let ck = from_bytes(&bytes, Path::new("mem")).unwrap();
            assert_eq!(ck.model, m);
            assert_eq!(ck.config, cfg);
            assert_eq!(to_bytes(&ck.model, &ck.config, packed).unwrap(), bytes);
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = to_bytes(&model(), &serde_json::Value::Null, false).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            from_bytes(&bytes, Path::new("mem")),
            Err(Error::Version { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let bytes = to_bytes(&model(), &serde_json::Value::Null, true).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad, Path::new("m")), Err(Error::Format { .. })));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3], Path::new("m")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn tampered_packed_signs_are_rejected() {
        let m = model();
        let bytes = to_bytes(&m, &serde_json::Value::Null, true).unwrap();
        let mut tampered = bytes.clone();
        // Last occurrence of the first binary layer's sign words is its packed copy.
        let Layer::BinaryConv(b) = &m.layers()[3] else { panic!() };
        let signs = b.layer.current_signs();
        let needle: Vec<u8> = signs.words().iter().flat_map(|w| w.to_le_bytes()).collect();
        let at = bytes
            .windows(needle.len())
            .rposition(|w| w == needle.as_slice())
            .unwrap();
        tampered[at] ^= 1;
        assert!(matches!(
            from_bytes(&tampered, Path::new("m")),
            Err(Error::Format { .. })
        ));
    }
}
