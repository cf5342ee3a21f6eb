//! Versioned binary checkpoints: magic "UPIX", a u32 format version, the
//! model configuration, and the named parameter tensors with explicit
//! little-endian f64 payloads (portable across endianness, bit-exact
//! round-trip).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::attention::RopeParams;
use crate::error::{Error, Result};
use crate::model::{validate_params, ModelConfig};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UPIX";
pub const VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.at,
                self.data.len()
            )));
        }
        let out = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Config layout: ten u32 fields then the rope base as f64.
fn encode_config(buf: &mut Vec<u8>, cfg: &ModelConfig) {
    for v in [
        cfg.layers,
        cfg.dim,
        cfg.heads,
        cfg.mlp_expansion,
        cfg.patch_size,
        cfg.channels,
        cfg.vocab,
        cfg.cond_stride,
    ] {
        push_u32(buf, v as u32);
    }
    for v in cfg.rope.split {
        push_u32(buf, v as u32);
    }
    push_f64(buf, cfg.rope.base);
}

fn decode_config(r: &mut Reader) -> Result<ModelConfig> {
    let mut fields = [0usize; 8];
    for f in &mut fields {
        *f = r.u32()? as usize;
    }
    let split = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let base = r.f64()?;
    let cfg = ModelConfig {
        layers: fields[0],
        dim: fields[1],
        heads: fields[2],
        mlp_expansion: fields[3],
        patch_size: fields[4],
        channels: fields[5],
        vocab: fields[6],
        cond_stride: fields[7],
        rope: RopeParams { base, split },
    };
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("embedded config invalid: {e}")))?;
    Ok(cfg)
}

/// Serializes config and parameters to the checkpoint byte layout.
pub fn encode_checkpoint(cfg: &ModelConfig, params: &ParamTree) -> Result<Vec<u8>> {
    validate_params(cfg, params)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    encode_config(&mut buf, cfg);
    push_u32(&mut buf, params.len() as u32);
    for (name, tensor) in params.iter() {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, tensor.shape().len() as u32);
        for &axis in tensor.shape() {
            push_u64(&mut buf, axis as u64);
        }
        for &v in tensor.data() {
            push_f64(&mut buf, v);
        }
    }
    Ok(buf)
}

/// Parses checkpoint bytes; refuses bad magic, unknown versions, malformed
/// or truncated payloads, and any tensor set inconsistent with the embedded
/// config. Never partially loads.
pub fn decode_checkpoint(data: &[u8]) -> Result<(ModelConfig, ParamTree)> {
    let mut r = Reader { data, at: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, this build reads {VERSION}"
        )));
    }
    let cfg = decode_config(&mut r)?;
    let count = r.u32()? as usize;
    let mut params = ParamTree::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!("implausible name length {name_len}")));
        }
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let axis = r.u64()? as usize;
            if axis == 0 || axis > 1 << 32 {
                return Err(Error::Checkpoint(format!("implausible axis length {axis}")));
            }
            numel = numel
                .checked_mul(axis)
                .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
            shape.push(axis);
        }
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(r.f64()?);
        }
        let tensor = Tensor::from_vec(shape, values)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        params.insert(name, tensor);
    }
    if r.at != data.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            data.len() - r.at
        )));
    }
    validate_params(&cfg, &params)?;
    Ok((cfg, params))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ParamTree) -> Result<()> {
    let bytes = encode_checkpoint(cfg, params)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamTree)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ModelConfig, ParamTree) {
        let cfg = ModelConfig::gradcheck_tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = init_params(&cfg, &mut rng);
        (cfg, params)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let (cfg, params) = toy();
        let bytes = encode_checkpoint(&cfg, &params).unwrap();
        let (cfg2, params2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert!(params.bitwise_eq(&params2));
    }

    #[test]
    fn magic_is_first_four_bytes() {
        let (cfg, params) = toy();
        let bytes = encode_checkpoint(&cfg, &params).unwrap();
        assert_eq!(&bytes[0..4], b"UPIX");
    }

    #[test]
    fn bad_magic_and_version_are_refused() {
        let (cfg, params) = toy();
        let mut bytes = encode_checkpoint(&cfg, &params).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_checkpoint(&wrong).is_err());
        bytes[4] = 9;
        assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn truncation_at_every_prefix_is_a_clean_refusal() {
        let (cfg, params) = toy();
        let bytes = encode_checkpoint(&cfg, &params).unwrap();
        for cut in [3, 7, 11, 40, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut {cut}");
        }
        // Trailing garbage is also refused.
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(decode_checkpoint(&extended).is_err());
    }

    #[test]
    fn tensor_set_must_match_embedded_config() {
        let (cfg, mut params) = toy();
        params.insert("rogue.w", Tensor::zeros(&[2]));
        assert!(encode_checkpoint(&cfg, &params).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let (cfg, params) = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.upix");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert!(params.bitwise_eq(&params2));
    }
}
