//! Binary model container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "OGD1" | u32 version | u64 seed | u32 len + arch JSON (len 0 = none)
//! u32 input rank | u32 dims... | u32 layer count | layer records...
//! ```
//!
//! Each layer record starts with a one-byte kind tag. Dense and conv records
//! carry the weight shape, the weights, the mask as LSB-first packed bits and
//! the bias; conv records prefix stride and padding; dropout carries its rate.

use std::fs;
use std::path::Path;

use super::{Architecture, Conv2d, Dense, Layer, Model, Params};
use crate::error::{Error, Result};
use crate::pruning::PruneMask;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OGD1";
const VERSION: u32 = 1;

const TAG_FLATTEN: u8 = 0;
const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_POOL: u8 = 4;
const TAG_DROPOUT: u8 = 5;

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_params(out: &mut Vec<u8>, p: &Params) {
    put_u32(out, p.weights.rank());
    for &d in p.weights.shape() {
        put_u32(out, d);
    }
    for w in p.weights.data() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&p.mask.to_packed_bits());
    put_u32(out, p.bias.len());
    for b in p.bias.data() {
        out.extend_from_slice(&b.to_le_bytes());
    }
}

pub fn write_model(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    out.extend_from_slice(&model.seed.to_le_bytes());
    let arch = model
        .arch
        .as_ref()
        .map(|a| serde_json::to_vec(a).expect("architecture serializes"))
        .unwrap_or_default();
    put_u32(&mut out, arch.len());
    out.extend_from_slice(&arch);
    put_u32(&mut out, model.input_shape.len());
    for &d in &model.input_shape {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, model.layers.len());
    for layer in &model.layers {
        match layer {
            Layer::Flatten => out.push(TAG_FLATTEN),
            Layer::Relu => out.push(TAG_RELU),
            Layer::MaxPool2d => out.push(TAG_POOL),
            Layer::Dropout { rate } => {
                out.push(TAG_DROPOUT);
                out.extend_from_slice(&rate.to_le_bytes());
            }
            Layer::Dense(d) => {
                out.push(TAG_DENSE);
                put_params(&mut out, &d.params);
            }
            Layer::Conv2d(c) => {
                out.push(TAG_CONV);
                put_u32(&mut out, c.stride);
                put_u32(&mut out, c.padding);
                put_params(&mut out, &c.params);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!("truncated while reading {what} ({n} bytes needed)"),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::format(self.pos as u64, "size overflow"))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn shape(&mut self, what: &str) -> Result<Vec<usize>> {
        let at = self.pos as u64;
        let rank = self.u32(what)?;
        if rank == 0 || rank > 8 {
            return Err(Error::format(at, format!("implausible rank {rank} for {what}")));
        }
        (0..rank).map(|_| self.u32(what)).collect()
    }

    fn params(&mut self) -> Result<Params> {
        let at = self.pos as u64;
        let shape = self.shape("weight shape")?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n <= self.bytes.len())
            .ok_or_else(|| Error::format(at, format!("bad weight shape {shape:?}")))?;
        let weights = self.f32s(n, "weights")?;
        let mask_at = self.pos as u64;
        let mask = PruneMask::from_packed_bits(self.take(n.div_ceil(8), "mask")?, n);
        if weights.iter().zip(mask.as_slice()).any(|(&w, &keep)| !keep && w != 0.0) {
            return Err(Error::format(mask_at, "masked weight is non-zero"));
        }
        let bias_len = self.u32("bias length")?;
        let bias = self.f32s(bias_len, "bias")?;
        Ok(Params {
            weights: Tensor::new(shape, weights).map_err(|e| Error::format(at, e.to_string()))?,
            bias: Tensor::new(vec![bias_len], bias).map_err(|e| Error::format(at, e.to_string()))?,
            mask,
        })
    }
}

pub fn read_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"OGD1\""));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let seed = r.u64("seed")?;
    let arch_at = r.pos as u64;
    let arch_len = r.u32("architecture length")?;
    let arch_bytes = r.take(arch_len, "architecture")?;
    let arch: Option<Architecture> = if arch_len == 0 {
        None
    } else {
        Some(
            serde_json::from_slice(arch_bytes)
                .map_err(|e| Error::format(arch_at, format!("architecture: {e}")))?,
        )
    };
    let input_shape = r.shape("input shape")?;
    let count = r.u32("layer count")?;
    let mut layers = Vec::new();
    for _ in 0..count {
        let at = r.pos as u64;
        layers.push(match r.u8("layer tag")? {
            TAG_FLATTEN => Layer::Flatten,
            TAG_RELU => Layer::Relu,
            TAG_POOL => Layer::MaxPool2d,
            TAG_DROPOUT => Layer::Dropout {
                rate: r.f32s(1, "dropout rate")?[0],
            },
            TAG_DENSE => Layer::Dense(Dense { params: r.params()? }),
            TAG_CONV => {
                let stride = r.u32("stride")?;
                let padding = r.u32("padding")?;
                Layer::Conv2d(Conv2d {
                    params: r.params()?,
                    stride,
                    padding,
                })
            }
            tag => return Err(Error::format(at, format!("unknown layer tag {tag}"))),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last layer"));
    }
    let end = r.pos as u64;
    let mut model = Model::from_layers(input_shape, layers, seed)
        .map_err(|e| Error::format(end, e.to_string()))?;
    model.arch = arch;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, Architecture};
    use crate::pruning::prune_model;

    #[test]
    fn round_trip_preserves_counts_and_outputs() {
        let mut m = build_model(&Architecture::tabular(7, 3), 11).unwrap();
        prune_model(&mut m, 0.3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ogd");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.count_active(), m.count_active());
        assert_eq!(back.architecture(), m.architecture());
        let x = Tensor::full(&[2, 7], 0.5f32);
        let (a, b) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn conv_models_round_trip() {
        let m = build_model(&Architecture::CifarCnn, 2).unwrap();
        assert_eq!(read_model(&write_model(&m)).unwrap(), m);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = write_model(&build_model(&Architecture::tabular(4, 2), 0).unwrap());
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = read_model(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(&bad), Err(Error::Format { offset: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(read_model(&long), Err(Error::Format { .. })));
    }
}
