//! Binary checkpoint format.
//!
//! ```text
//! "GDIT"  magic
//! u32     version
//! u32     config length, then the config as JSON
//! repeated until EOF:
//!   u16 name length, name bytes, u8 rank, u32 dims..., f32 data (little endian)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelConfig, NetError, Params};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GDIT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn config_json(config: &ModelConfig) -> Vec<u8> {
    serde_json::to_vec(config).expect("config serializes")
}

/// Exact file size [`save_checkpoint`] produces for `config`.
pub fn checkpoint_size(config: &ModelConfig) -> Result<u64, NetError> {
    let p = Params::<f32>::init(config, 0)?;
    let header = 4 + 4 + 4 + config_json(config).len();
    let tensors: usize = p.tensors.iter().map(|t| 2 + t.name.len() + 1 + 4 * t.shape.len() + 4 * t.numel()).sum();
    Ok((header + tensors) as u64)
}

pub fn encode_checkpoint(params: &Params<f32>) -> Vec<u8> {
    let json = config_json(&params.config);
    let mut out = Vec::with_capacity(12 + json.len() + 4 * params.num_params() + 64 * params.tensors.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(&json);
    for t in &params.tensors {
        out.extend((t.name.len() as u16).to_le_bytes());
        out.extend(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &dim in &t.shape {
            out.extend((dim as u32).to_le_bytes());
        }
        for &x in &t.data {
            out.extend(x.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(params: &Params<f32>, path: &Path) -> Result<(), NetError> {
    let bytes = encode_checkpoint(params);
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.buf.len() {
            return Err(NetError::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Params<f32>, NetError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(NetError::Format { offset: 0, msg: "bad magic".into() });
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NetError::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let json_len = c.u32("config length")? as usize;
    let at = c.pos as u64;
    let config: ModelConfig = serde_json::from_slice(c.take(json_len, "config")?)
        .map_err(|e| NetError::Format { offset: at, msg: format!("config: {e}") })?;
    let mut params = Params::<f32>::init(&config, 0)?;
    for t in params.tensors.iter_mut() {
        let at = c.pos as u64;
        let name_len = u16::from_le_bytes(c.take(2, "tensor name length")?.try_into().unwrap()) as usize;
        let name = c.take(name_len, "tensor name")?;
        if name != t.name.as_bytes() {
            return Err(NetError::Format {
                offset: at,
                msg: format!("expected tensor {}, found {}", t.name, String::from_utf8_lossy(name)),
            });
        }
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dimension")? as usize);
        }
        if shape != t.shape {
            return Err(NetError::Format {
                offset: at,
                msg: format!("tensor {} has shape {:?}, expected {:?}", t.name, shape, t.shape),
            });
        }
        let data = c.take(4 * t.numel(), &format!("tensor {}", t.name))?;
        for (dst, src) in t.data.iter_mut().zip(data.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().unwrap());
        }
    }
    if c.pos != bytes.len() {
        return Err(NetError::Format { offset: c.pos as u64, msg: "trailing bytes after last tensor".into() });
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<Params<f32>, NetError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::{forward, AttentionMode};
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_v: 16,
            n_patches: 64,
            max_text_len: 40,
            vocab_size: 132,
            attention_mode: AttentionMode::Bidirectional,
            vocab_hash: None,
        }
    }

    #[test]
    fn round_trip_gives_identical_forward() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = Params::<f32>::init(&config(), 11).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        let text = [2, 5, 1, 1, 1, 9];
        let a = forward(&p, None, &text, AttentionMode::Bidirectional).unwrap();
        let b = forward(&q, None, &text, AttentionMode::Bidirectional).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn size_matches_layout_formula() {
        let c = config();
        let bytes = encode_checkpoint(&Params::<f32>::init(&c, 0).unwrap());
        assert_eq!(bytes.len() as u64, checkpoint_size(&c).unwrap());
        // Independent count: header + per-tensor metadata + 4 bytes per parameter.
        let json = serde_json::to_vec(&c).unwrap().len();
        let p = Params::<f32>::init(&c, 0).unwrap();
        let meta: usize = p.tensors.iter().map(|t| 3 + t.name.len() + 4 * t.shape.len()).sum();
        assert_eq!(bytes.len(), 12 + json + meta + 4 * c.param_count());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_checkpoint(&Params::<f32>::init(&config(), 0).unwrap());
        let err = decode_checkpoint(&bytes[..bytes.len() - 10]).unwrap_err();
        assert!(matches!(err, NetError::Format { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(NetError::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(NetError::Format { offset: 4, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }
}
