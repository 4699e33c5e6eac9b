//! Binary checkpoint format.
//!
//! ```text
//! "DKCP"  u32 version  u32 len  config JSON
//! repeated: u32 len  name  u32 rank  u64 dims[rank]  f64 payload
//! u32 CRC32 of every byte after the magic
//! ```
//!
//! Integers and floats are little-endian. The checksum is verified before
//! anything is decoded, so a damaged file never yields partial parameters.

use std::fs;
use std::io::Write;
use std::path::Path;

use deltakit_core::model::{init_parameters, ModelConfig, Parameters};

pub const MAGIC: &[u8; 4] = b"DKCP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    Version { found: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint config: {0}")]
    Config(#[from] serde_json::Error),
    #[error("checkpoint was written for a different model: {found}")]
    ConfigMismatch { found: String },
    #[error("checkpoint tensors: {0}")]
    Tensors(#[from] deltakit_core::Error),
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

pub fn encode(params: &Parameters, config: &ModelConfig) -> Result<Vec<u8>, CheckpointError> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, VERSION);
    put_bytes(&mut out, &serde_json::to_vec(config)?);
    for t in params.tensors() {
        put_bytes(&mut out, t.name.as_bytes());
        put_u32(&mut out, t.shape.len() as u32);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[MAGIC.len()..]);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, Parameters), CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated);
    }
    let (body, tail) = bytes[4..].split_at(bytes.len() - 8);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    let mut r = Reader { buf: body };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let config: ModelConfig = serde_json::from_slice(r.bytes()?)?;
    let mut tensors = Vec::new();
    while !r.buf.is_empty() {
        let name = String::from_utf8_lossy(r.bytes()?).into_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    let mut params = init_parameters(&config)?;
    params.assign_from(&tensors)?;
    Ok((config, params))
}

/// Writes through a temporary file and a rename, so an interrupted save
/// leaves the previous checkpoint intact.
pub fn save_checkpoint(path: &Path, params: &Parameters, config: &ModelConfig) -> Result<(), CheckpointError> {
    let bytes = encode(params, config)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut file = fs::File::create(tmp)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    drop(file);
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Parameters), CheckpointError> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint that must have been written for `expected`.
pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Parameters, CheckpointError> {
    let (config, params) = load_checkpoint(path)?;
    if &config != expected {
        return Err(CheckpointError::ConfigMismatch {
            found: serde_json::to_string(&config)?,
        });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use deltakit_core::RuleKind;

    fn sample() -> (ModelConfig, Parameters) {
        let config = ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            head_dim: 4,
            hybrid_ratio: 1,
            rule: RuleKind::Fg2Gdn,
            mlp_mult: 2,
            seed: 4,
        };
        let params = init_parameters(&config).unwrap();
        (config, params)
    }

    #[test]
    fn layout_matches_the_documented_format() {
        let (config, params) = sample();
        let bytes = encode(&params, &config).unwrap();
        assert_eq!(&bytes[..4], b"DKCP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[12..12 + json_len]).unwrap();
        assert_eq!(json["rule"], "fg2gdn");
        let mut at = 12 + json_len;
        let name_len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        at += 4;
        assert_eq!(&bytes[at..at + name_len], b"embedding");
        at += name_len;
        assert_eq!(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()), 2);
        let rows = u64::from_le_bytes(bytes[at + 4..at + 12].try_into().unwrap());
        assert_eq!(rows, 10);
        let first = f64::from_le_bytes(bytes[at + 20..at + 28].try_into().unwrap());
        assert_eq!(first.to_bits(), params.embedding.data()[0].to_bits());
        let payload: usize = params.tensors().iter().map(|t| t.data.len() * 8).sum();
        assert!(bytes.len() > payload);
    }

    #[test]
    fn truncation_and_magic() {
        let (config, params) = sample();
        let bytes = encode(&params, &config).unwrap();
        assert!(matches!(decode(b"DKC"), Err(CheckpointError::Truncated)));
        assert!(matches!(
            decode(b"NOPE...........").unwrap_err(),
            CheckpointError::BadMagic
        ));
        // Cutting the tail shifts the stored checksum, so either error is
        // acceptable as long as nothing decodes.
        for cut in [5, 11, 40, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn version_is_checked() {
        let (config, params) = sample();
        let mut bytes = encode(&params, &config).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(CheckpointError::Version { found: 2 })));
    }
}
