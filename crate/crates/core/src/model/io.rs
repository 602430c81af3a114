//! Versioned little-endian model file.
//!
//! ```text
//! "GMLP"            4 bytes
//! version           u32 (= 1)
//! activation tag    u32 (0 silu, 1 relu, 2 tanh)
//! n_layers          u32
//! widths            n_layers x u32
//! layer_spacing     f64
//! coords            per layer, per neuron: x f64, y f64
//! per gap g         weights widths[g+1] x widths[g] f64 row-major, then bias widths[g+1] f64
//! crc32             u32 over every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, GeomMlp, LayerSpec};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"GMLP";
pub const MODEL_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("model file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl GeomMlp {
    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.spec();
        let mut out = Vec::with_capacity(64 + 8 * (spec.parameter_count() + 2 * spec.widths.iter().sum::<usize>()));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&self.activation().tag().to_le_bytes());
        out.extend_from_slice(&(spec.widths.len() as u32).to_le_bytes());
        for &w in &spec.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&spec.layer_spacing.to_le_bytes());
        for c in self.coords().iter().flatten() {
            out.extend_from_slice(&c.x.to_le_bytes());
            out.extend_from_slice(&c.y.to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter().chain(b.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::Format("not a GMLP model file".into()));
        }
        let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { bytes: payload, pos: 4 };
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "model format version {version}, this build reads {MODEL_VERSION}"
            )));
        }
        let expected = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(payload) != expected {
            return Err(Error::Format("model checksum mismatch (truncated or corrupt)".into()));
        }
        let activation = Activation::from_tag(r.u32()?)
            .ok_or_else(|| Error::Format("unknown activation tag".into()))?;
        let n_layers = r.u32()? as usize;
        if n_layers > 1024 {
            return Err(Error::Format(format!("implausible layer count {n_layers}")));
        }
        let widths = (0..n_layers).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let spec = LayerSpec::new(widths, r.f64()?).map_err(|e| Error::Format(e.to_string()))?;

        let grid = spec.grid();
        for (l, layer) in grid.iter().enumerate() {
            for (i, c) in layer.iter().enumerate() {
                let (x, y) = (r.f64()?, r.f64()?);
                if x.to_bits() != c.x.to_bits() || y.to_bits() != c.y.to_bits() {
                    return Err(Error::Format(format!(
                        "neuron {i} of layer {l} is off the coordinate grid"
                    )));
                }
            }
        }
        let mut weights = Vec::with_capacity(spec.n_gaps());
        let mut biases = Vec::with_capacity(spec.n_gaps());
        for g in 0..spec.n_gaps() {
            let (rows, cols) = (spec.widths[g + 1], spec.widths[g]);
            let w = Array2::from_shape_vec((rows, cols), r.f64s(rows * cols)?)
                .map_err(|e| Error::Format(e.to_string()))?;
            weights.push(w);
            biases.push(Array1::from_vec(r.f64s(rows)?));
        }
        if r.pos != payload.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after parameters",
                payload.len() - r.pos
            )));
        }
        GeomMlp::from_parts(spec, activation, weights, biases)
    }

    /// Write the model file (via a temporary sibling and rename) and return
    /// its size in bytes.
    pub fn save(&self, path: &Path) -> Result<u64> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("gmlp.tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
