//! Binary parameter snapshots.
//!
//! Linear weights: `GNLW`, u32 version, u64 dimension, u32 hash length,
//! hash bytes, then the weights as little-endian f64.
//!
//! Deep networks: `GNDP`, u32 version, u32 header length, a JSON header
//! with the architecture (layer sizes, embedding, inputs) and the scaling
//! flag, u64 parameter count, then the flat parameter vector as
//! little-endian f64 (embedding map, then each layer's row-major weight
//! matrix followed by its bias).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deep::{Architecture, DeepGammaNet};
use crate::error::{Error, Result};

const LINEAR_MAGIC: &[u8; 4] = b"GNLW";
const DEEP_MAGIC: &[u8; 4] = b"GNDP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DeepHeader {
    architecture: Architecture,
    loss_scaling: bool,
}

pub fn write_linear(path: impl AsRef<Path>, weights: &[f64], config_hash: &str) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + config_hash.len() + 8 * weights.len());
    buf.extend_from_slice(LINEAR_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(config_hash.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_hash.as_bytes());
    for w in weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    write_file(path.as_ref(), &buf)
}

/// Returns the weights and the config hash they were saved with.
pub fn read_linear(path: impl AsRef<Path>) -> Result<(Vec<f64>, String)> {
    let bytes = read_file(path.as_ref())?;
    let mut r = Cursor::new(&bytes);
    r.magic(LINEAR_MAGIC)?;
    let dim = r.u64()? as usize;
    let hash_len = r.u32()? as usize;
    let hash = String::from_utf8(r.take(hash_len)?.to_vec())
        .map_err(|_| Error::Format("config hash is not UTF-8".into()))?;
    let weights = r.f64s(dim)?;
    r.finish()?;
    Ok((weights, hash))
}

pub fn write_deep(path: impl AsRef<Path>, net: &DeepGammaNet) -> Result<()> {
    let header = serde_json::to_vec(&DeepHeader {
        architecture: net.architecture().clone(),
        loss_scaling: net.loss_scaling(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(24 + header.len() + 8 * net.n_params());
    buf.extend_from_slice(DEEP_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(net.n_params() as u64).to_le_bytes());
    for p in net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    write_file(path.as_ref(), &buf)
}

pub fn read_deep(path: impl AsRef<Path>) -> Result<DeepGammaNet> {
    let bytes = read_file(path.as_ref())?;
    let mut r = Cursor::new(&bytes);
    r.magic(DEEP_MAGIC)?;
    let header_len = r.u32()? as usize;
    let header: DeepHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    let n = r.u64()? as usize;
    let params = r.f64s(n)?;
    r.finish()?;
    DeepGammaNet::from_params(header.architecture, header.loss_scaling, params)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format("bad magic".into()));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deep::{EmbeddingKind, InitMode, InputSpec};
    use crate::timescale::{InputMode, Timescale};
    use rand::SeedableRng;

    #[test]
    fn linear_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        let w = vec![0.1, -2.5, f64::MIN_POSITIVE, 1e300];
        write_linear(&p, &w, "abc123").unwrap();
        let (back, hash) = read_linear(&p).unwrap();
        assert_eq!(back, w);
        assert_eq!(hash, "abc123");
        std::fs::write(&p, b"GNLW\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_linear(&p), Err(Error::Format(_))));
    }

    #[test]
    fn deep_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.bin");
        let arch = Architecture {
            phi_dim: 3,
            input: Some(InputSpec { mode: InputMode::Both, tau_max: 100.0 }),
            embedding: EmbeddingKind::matrix(),
            layer_sizes: vec![5, 1],
        };
        let net = DeepGammaNet::new(arch, true, InitMode::Standard, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        write_deep(&p, &net).unwrap();
        let back = read_deep(&p).unwrap();
        assert_eq!(back, net);
        let ts = Timescale::from_tau(7.0).unwrap();
        assert_eq!(back.forward(&[0.1, 0.2, 0.3], ts).unwrap(), net.forward(&[0.1, 0.2, 0.3], ts).unwrap());
        assert!(matches!(read_linear(&p), Err(Error::Format(_))));
    }
}
