//! Checkpoint container for a trained encoder/decoder pair.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        8 bytes   "PAECKPT\0"
//! version      u32       1
//! config_len   u32
//! config       config_len bytes of UTF-8 JSON (see `CheckpointConfig`)
//! n_tensors    u32
//! per tensor:
//!   name_len   u32, name (UTF-8, "encoder." or "decoder." prefixed)
//!   ndim       u32, dims u64 × ndim
//!   data       f32 × prod(dims), row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Param, ParamStore};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PAECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Configuration echo stored in the checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub pretrained: bool,
    /// Hex SHA-256 of the encoder architecture, as stored in bank files.
    pub encoder_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn config(&self) -> CheckpointConfig {
        CheckpointConfig {
            encoder: self.encoder.config().clone(),
            decoder: self.decoder.config().clone(),
            pretrained: self.encoder.is_pretrained(),
            encoder_hash: hex::encode(self.encoder.config().hash()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config()).expect("config serializes");
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);

        let tensors: Vec<(String, &Param)> = self
            .encoder
            .params()
            .iter()
            .map(|p| (format!("encoder.{}", p.name), p))
            .chain(self.decoder.params().iter().map(|p| (p.name.clone(), p)))
            .collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, p) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.value {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic number: not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let config: CheckpointConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;

        // Rebuild the architecture to learn tensor order, groups and flags.
        let template_enc = Encoder::build(&config.encoder, crate::encoder::Init::Random, 0)?;
        let template_dec = Decoder::build(&config.decoder, 0)?;
        let mut enc_store = template_enc.params().clone();
        let mut dec_store = template_dec.params().clone();

        let n = r.u32()? as usize;
        if n != enc_store.len() + dec_store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {n} tensors, architecture needs {}",
                enc_store.len() + dec_store.len()
            )));
        }
        let fill = |store: &mut ParamStore, prefix: &str, r: &mut Reader<'_>| -> Result<()> {
            for p in store.iter_mut() {
                let name_len = r.u32()? as usize;
                let name = std::str::from_utf8(r.take(name_len)?).map_err(|e| Error::Format(e.to_string()))?;
                let expected = format!("{prefix}{}", p.name);
                if name != expected {
                    return Err(Error::Format(format!("expected tensor `{expected}`, found `{name}`")));
                }
                let ndim = r.u32()? as usize;
                let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                if dims != p.shape {
                    return Err(Error::Format(format!("tensor `{name}` has dims {dims:?}, expected {:?}", p.shape)));
                }
                let data = r.take(4 * p.len())?;
                p.value = data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            }
            Ok(())
        };
        fill(&mut enc_store, "encoder.", &mut r)?;
        fill(&mut dec_store, "", &mut r)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }

        let encoder = Encoder::from_parts(config.encoder.clone(), enc_store, config.pretrained)?;
        if hex::encode(encoder.config().hash()) != config.encoder_hash {
            return Err(Error::Format("checkpoint encoder hash does not match its configuration".into()));
        }
        let decoder = Decoder::from_parts(config.decoder, dec_store)?;
        Ok(Checkpoint { encoder, decoder })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Init;
    use crate::image::Image;

    fn checkpoint() -> Checkpoint {
        let enc_cfg = EncoderConfig::scratch_tiny();
        let encoder = Encoder::build(&enc_cfg, Init::Random, 3).unwrap();
        let decoder = Decoder::build(&DecoderConfig::for_encoder(&enc_cfg, None), 4).unwrap();
        Checkpoint { encoder, decoder }
    }

    #[test]
    fn round_trip_preserves_features_bitwise() {
        let ck = checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pae");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let img = Image::from_fn(64, 64, 3, |(y, x, c)| ((x * 7 + y * 3 + c) % 17) as f32 / 16.0);
        let a = ck.encoder.encode(&img).unwrap();
        let b = back.encoder.encode(&img).unwrap();
        assert!(a.data().iter().zip(b.data().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = checkpoint().to_bytes();
        let mut bad = bytes.clone();
        bad[1] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));
    }
}
