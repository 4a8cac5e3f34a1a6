//! Binary model files. Everything is little-endian.
//!
//! Anchor (`SVRM`): magic, version u8, M u32, N u32, init range 2×f64, λ f64,
//! seed u64, steps u64, velocity f64, the two annealing ceilings 2×f64,
//! tensor count u32, then per tensor a name (u16 length + UTF-8), rank u8,
//! extents u32 each and the values as f64; finally the main and hyper
//! quantizer records (`STNH`).
//!
//! Derivation (`SDRV`): magic, version u8, anchor id u16, derivation id u16,
//! λ f64, seed u64, steps u64, velocity f64, the two ceilings 2×f64, then
//! the main and hyper quantizer records.

use super::model::{layer_specs, AnchorModel, LayerPair, ModelConfig, TrainingMeta};
use super::train::Derivation;
use crate::entropy::{FactorizedModel, PARAMS_PER_CHANNEL};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quantizer::StanhLayer;

pub const ANCHOR_MAGIC: &[u8; 4] = b"SVRM";
pub const DERIVATION_MAGIC: &[u8; 4] = b"SDRV";
pub const FORMAT_VERSION: u8 = 1;
const ANCHOR_FIXED: usize = 4 + 1 + 4 + 4 + 8 * 8 + 4;
/// Bytes of a derivation file before its quantizer records.
pub const DERIVATION_HEADER_LEN: usize = 4 + 1 + 2 + 2 + 8 * 6;

fn tensor_names(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for spec in layer_specs(cfg) {
        out.push((format!("{}.weight", spec.name), spec.weight_shape()));
        out.push((format!("{}.bias", spec.name), vec![spec.out_channels]));
    }
    out.push(("prior".to_string(), vec![cfg.n, PARAMS_PER_CHANNEL]));
    out
}

/// Size of an anchor file for a configuration:
/// fixed header + Σ_tensors (2 + |name| + 1 + 4·rank + 8·values) + two
/// quantizer records of `7 + 16(L-1)` bytes.
pub fn anchor_file_len(cfg: &ModelConfig) -> usize {
    let tensors: usize = tensor_names(cfg)
        .iter()
        .map(|(name, shape)| 2 + name.len() + 1 + 4 * shape.len() + 8 * shape.iter().product::<usize>())
        .sum();
    ANCHOR_FIXED + tensors + StanhLayer::encoded_len(cfg.levels_main) + StanhLayer::encoded_len(cfg.levels_hyper)
}

/// Size of a derivation file.
pub fn derivation_file_len(levels_main: usize, levels_hyper: usize) -> usize {
    DERIVATION_HEADER_LEN + StanhLayer::encoded_len(levels_main) + StanhLayer::encoded_len(levels_hyper)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn meta(&mut self, lambda: f64, m: &TrainingMeta) {
        self.f64(lambda);
        self.u64(m.seed);
        self.u64(m.steps);
        self.f64(m.velocity);
        self.f64(m.beta_max_main);
        self.f64(m.beta_max_hyper);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Truncated(format!("model file ends at byte {}", self.bytes.len())))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn preamble(&mut self, magic: &'static [u8; 4], name: &'static str) -> Result<()> {
        if self.take(4).map_err(|_| Error::BadMagic { expected: name })? != magic {
            return Err(Error::BadMagic { expected: name });
        }
        let version = self.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }
    fn meta(&mut self) -> Result<(f64, TrainingMeta)> {
        Ok((
            self.f64()?,
            TrainingMeta {
                seed: self.u64()?,
                steps: self.u64()?,
                velocity: self.f64()?,
                beta_max_main: self.f64()?,
                beta_max_hyper: self.f64()?,
            },
        ))
    }
    fn layer(&mut self) -> Result<StanhLayer> {
        let (layer, used) = StanhLayer::from_bytes(&self.bytes[self.pos..])?;
        self.pos += used;
        Ok(layer)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Corrupted(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn anchor_to_bytes(model: &AnchorModel) -> Vec<u8> {
    let cfg = &model.config;
    let mut w = Writer(Vec::with_capacity(anchor_file_len(cfg)));
    w.0.extend_from_slice(ANCHOR_MAGIC);
    w.u8(FORMAT_VERSION);
    w.u32(cfg.m as u32);
    w.u32(cfg.n as u32);
    w.f64(cfg.init_lo);
    w.f64(cfg.init_hi);
    w.meta(model.lambda, &model.meta);
    let names = tensor_names(cfg);
    w.u32(names.len() as u32);
    let tensors = model.transforms.iter().chain(std::iter::once(model.prior.params()));
    for ((name, _), t) in names.iter().zip(tensors) {
        w.u16(name.len() as u16);
        w.0.extend_from_slice(name.as_bytes());
        w.u8(t.shape().len() as u8);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    w.0.extend(model.layers.main.to_bytes());
    w.0.extend(model.layers.hyper.to_bytes());
    w.0
}

pub fn anchor_from_bytes(bytes: &[u8]) -> Result<AnchorModel> {
    let mut r = Reader { bytes, pos: 0 };
    r.preamble(ANCHOR_MAGIC, "SVRM")?;
    let (m, n) = (r.u32()? as usize, r.u32()? as usize);
    let (init_lo, init_hi) = (r.f64()?, r.f64()?);
    let (lambda, meta) = r.meta()?;
    let count = r.u32()? as usize;
    // levels are only known after the records; validate them below
    let mut cfg = ModelConfig {
        m,
        n,
        levels_main: 2,
        levels_hyper: 2,
        init_lo,
        init_hi,
    };
    cfg.validate()?;
    let expected = tensor_names(&cfg);
    if count != expected.len() {
        return Err(Error::Corrupted(format!("{count} tensors, expected {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let len = r.u16()? as usize;
        let name = r.take(len)?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != want_name.as_bytes() || &shape != want_shape {
            return Err(Error::Corrupted(format!(
                "tensor {:?} {shape:?}, expected {want_name} {want_shape:?}",
                String::from_utf8_lossy(name)
            )));
        }
        let values = (0..shape.iter().product::<usize>()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(shape, values)?);
    }
    let prior = FactorizedModel::from_params(tensors.pop().expect("prior tensor"))?;
    let layers = LayerPair {
        main: r.layer()?,
        hyper: r.layer()?,
    };
    r.finish()?;
    cfg.levels_main = layers.main.num_levels();
    cfg.levels_hyper = layers.hyper.num_levels();
    Ok(AnchorModel {
        config: cfg,
        lambda,
        transforms: tensors,
        prior,
        layers,
        meta,
    })
}

pub fn derivation_to_bytes(d: &Derivation) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(derivation_file_len(
        d.layers.main.num_levels(),
        d.layers.hyper.num_levels(),
    )));
    w.0.extend_from_slice(DERIVATION_MAGIC);
    w.u8(FORMAT_VERSION);
    w.u16(d.anchor_id);
    w.u16(d.id);
    w.meta(d.lambda, &d.meta);
    w.0.extend(d.layers.main.to_bytes());
    w.0.extend(d.layers.hyper.to_bytes());
    w.0
}

pub fn derivation_from_bytes(bytes: &[u8]) -> Result<Derivation> {
    let mut r = Reader { bytes, pos: 0 };
    r.preamble(DERIVATION_MAGIC, "SDRV")?;
    let anchor_id = r.u16()?;
    let id = r.u16()?;
    let (lambda, meta) = r.meta()?;
    let layers = LayerPair {
        main: r.layer()?,
        hyper: r.layer()?,
    };
    r.finish()?;
    Ok(Derivation {
        anchor_id,
        id,
        lambda,
        layers,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            m: 5,
            n: 2,
            levels_main: 11,
            levels_hyper: 6,
            init_lo: -5.0,
            init_hi: 5.0,
        }
    }

    #[test]
    fn anchor_round_trip_and_size() {
        let model = AnchorModel::init(small(), 0.0067, 4).unwrap();
        let bytes = anchor_to_bytes(&model);
        assert_eq!(bytes.len(), anchor_file_len(&small()));
        let back = anchor_from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(anchor_to_bytes(&back), bytes);
    }

    #[test]
    fn anchor_rejects_damage() {
        let bytes = anchor_to_bytes(&AnchorModel::init(small(), 0.01, 1).unwrap());
        assert!(matches!(anchor_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        let mut v = bytes.clone();
        v[4] = 7;
        assert!(matches!(anchor_from_bytes(&v), Err(Error::Version { found: 7, .. })));
        let mut longer = bytes;
        longer.push(0);
        assert!(matches!(anchor_from_bytes(&longer), Err(Error::Corrupted(_))));
    }

    #[test]
    fn derivation_round_trip() {
        let layers = LayerPair {
            main: StanhLayer::init_uniform(60, -30.0, 30.0).unwrap(),
            hyper: StanhLayer::init_uniform(60, -30.0, 30.0).unwrap(),
        };
        let d = Derivation {
            anchor_id: 1,
            id: 12,
            lambda: 0.0025,
            layers,
            meta: TrainingMeta::default(),
        };
        let bytes = derivation_to_bytes(&d);
        assert_eq!(bytes.len(), derivation_file_len(60, 60));
        assert_eq!(derivation_from_bytes(&bytes).unwrap(), d);
    }
}
