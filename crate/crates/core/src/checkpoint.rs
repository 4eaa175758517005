//! Binary parameter checkpoints.
//!
//! Self-describing little-endian container, bit-stable across platforms.
//! Layout (all integers little-endian, all floats IEEE-754 binary64):
//!
//! ```text
//! file     := magic artifact body
//! magic    := the 8 bytes "MOOSECP1"           (format version 1)
//! artifact := u8                               (1 mlp, 2 ensemble, 3 vae, 4 policy)
//! mlp      := u32 n_layers, layer*
//! layer    := u32 fan_in, u32 fan_out, u8 activation,
//!             f64[fan_out*fan_in] v (row-major), f64[fan_out] g, f64[fan_out] b
//! activation := 0 linear | 1 relu | 2 tanh
//! ```
//!
//! Ensemble, VAE, and policy bodies are composed from these primitives by
//! their owning modules; see `docs/formats.md` in the repository root for the
//! full byte-level layouts.

use crate::nn::{Activation, LayerParams, MlpParams};
use crate::{Error, Result};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MOOSECP1";

pub const TAG_MLP: u8 = 1;
pub const TAG_ENSEMBLE: u8 = 2;
pub const TAG_VAE: u8 = 3;
pub const TAG_POLICY: u8 = 4;

pub fn artifact_name(tag: u8) -> &'static str {
    match tag {
        TAG_MLP => "mlp",
        TAG_ENSEMBLE => "ensemble",
        TAG_VAE => "vae",
        TAG_POLICY => "policy",
        _ => "unknown",
    }
}

// ── writing ──────────────────────────────────────────────────────────

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(artifact: u8) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(artifact);
        Writer { buf }
    }

    pub fn u8(&mut self, x: u8) {
        self.buf.push(x);
    }

    pub fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn f64(&mut self, x: f64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    /// Raw float run without a length prefix; the reader knows the count
    /// from dimensions written earlier.
    pub fn f64_run(&mut self, xs: &[f64]) {
        for &x in xs {
            self.f64(x);
        }
    }

    pub fn mlp(&mut self, mlp: &MlpParams) {
        self.u32(mlp.layers.len() as u32);
        for l in &mlp.layers {
            self.u32(l.fan_in as u32);
            self.u32(l.fan_out as u32);
            self.u8(l.activation.tag());
            self.f64_run(&l.v);
            self.f64_run(&l.g);
            self.f64_run(&l.b);
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn save(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
            }
        }
        std::fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}

// ── reading ──────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    /// Validate the magic and artifact tag, then position after the header.
    pub fn new(bytes: &'a [u8], expected_artifact: u8, path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: path.display().to_string(),
        };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(r.format_err(
                "bad magic; not a checkpoint of this format version".to_string(),
            ));
        }
        let tag = r.u8()?;
        if tag != expected_artifact {
            return Err(r.format_err(format!(
                "artifact is '{}', expected '{}'",
                artifact_name(tag),
                artifact_name(expected_artifact)
            )));
        }
        Ok(r)
    }

    fn format_err(&self, reason: String) -> Error {
        Error::Format {
            path: self.path.clone(),
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.format_err("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64_run(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn mlp(&mut self) -> Result<MlpParams> {
        let n_layers = self.u32()? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(self.format_err(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let fan_in = self.u32()? as usize;
            let fan_out = self.u32()? as usize;
            let act_tag = self.u8()?;
            let activation = Activation::from_tag(act_tag)
                .ok_or_else(|| self.format_err(format!("unknown activation tag {act_tag}")))?;
            let v = self.f64_run(fan_in * fan_out)?;
            let g = self.f64_run(fan_out)?;
            let b = self.f64_run(fan_out)?;
            layers.push(LayerParams {
                fan_in,
                fan_out,
                activation,
                v,
                g,
                b,
            });
        }
        let mlp = MlpParams { layers };
        mlp.check().map_err(|e| self.format_err(e.to_string()))?;
        Ok(mlp)
    }

    /// Error unless the whole file has been consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.format_err(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpParams};
    use crate::seeding;

    #[test]
    fn mlp_round_trips_bit_exactly() {
        let mut rng = seeding::stream(21, "ckpt-test", 0);
        let mlp = MlpParams::new(&[4, 8, 2], Activation::Relu, Activation::Tanh, &mut rng);

        let mut w = Writer::new(TAG_MLP);
        w.mlp(&mlp);
        let bytes = w.into_bytes();

        let mut r = Reader::new(&bytes, TAG_MLP, Path::new("mem")).unwrap();
        let back = r.mlp().unwrap();
        r.finish().unwrap();
        assert_eq!(mlp, back);

        // Writing again yields identical bytes.
        let mut w2 = Writer::new(TAG_MLP);
        w2.mlp(&back);
        assert_eq!(bytes, w2.into_bytes());
    }

    #[test]
    fn wrong_artifact_tag_is_refused() {
        let mut rng = seeding::stream(21, "ckpt-test", 1);
        let mlp = MlpParams::new(&[2, 2], Activation::Relu, Activation::Linear, &mut rng);
        let mut w = Writer::new(TAG_POLICY);
        w.mlp(&mlp);
        let bytes = w.into_bytes();
        let err = Reader::new(&bytes, TAG_ENSEMBLE, Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("expected 'ensemble'"), "{err}");
    }

    #[test]
    fn bad_magic_is_refused() {
        let err = Reader::new(b"NOTMAGIC\x01", TAG_MLP, Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn truncation_is_detected() {
        let mut rng = seeding::stream(21, "ckpt-test", 2);
        let mlp = MlpParams::new(&[2, 2], Activation::Relu, Activation::Linear, &mut rng);
        let mut w = Writer::new(TAG_MLP);
        w.mlp(&mlp);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes[..bytes.len() - 3], TAG_MLP, Path::new("mem")).unwrap();
        assert!(r.mlp().is_err());
    }
}
