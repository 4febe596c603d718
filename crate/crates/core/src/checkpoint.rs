//! Binary checkpoint: little-endian, magic `DIPF`, version, tensor count,
//! length-prefixed config block, then named tensors in layout order.

use std::fs;
use std::path::Path;

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::{DipFormer, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"DIPF";
pub const VERSION: u32 = 1;

/// Serializes `cfg` and `store` to bytes.
pub fn encode<T: Element>(cfg: &ModelConfig, store: &ParamStore<T>) -> Vec<u8> {
    let mut kv = cfg.to_kv();
    kv.insert("config_hash", cfg.hash());
    let config = kv.render();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE_CODE);
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Reads only the header and config block.
pub fn decode_config(bytes: &[u8]) -> Result<(ModelConfig, usize, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        r.pos = 0;
        return Err(r.fail(format!("bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let len = r.u32("config length")? as usize;
    let start = r.pos;
    let raw = r.take(len, "config block")?;
    let text = std::str::from_utf8(raw).map_err(|e| Error::Format {
        offset: (start + e.valid_up_to()) as u64,
        msg: "config block is not UTF-8".into(),
    })?;
    let config_err = |e: Error| Error::Format {
        offset: start as u64,
        msg: format!("config block: {e}"),
    };
    let mut kv = KvMap::parse(text).map_err(config_err)?;
    let stored = kv.remove("config_hash").ok_or_else(|| Error::Format {
        offset: start as u64,
        msg: "config block has no config_hash".into(),
    })?;
    let cfg = ModelConfig::from_kv(&kv).map_err(config_err)?;
    if cfg.hash() != stored {
        return Err(Error::Format {
            offset: start as u64,
            msg: format!("config hash mismatch: stored {stored}, computed {}", cfg.hash()),
        });
    }
    Ok((cfg, count, r.pos))
}

/// Parses a checkpoint. Nothing is returned unless every byte checks out.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(ModelConfig, ParamStore<T>)> {
    let (cfg, count, pos) = decode_config(bytes)?;
    let model = DipFormer::new(cfg.clone()).map_err(|e| Error::Format {
        offset: 16,
        msg: format!("stored config does not build a model: {e}"),
    })?;
    let specs = model.layout().specs();
    let mut r = Reader { bytes, pos };
    if count != specs.len() {
        return Err(Error::Format {
            offset: 8,
            msg: format!("tensor count {count} but the config defines {}", specs.len()),
        });
    }
    let mut named = Vec::with_capacity(count);
    for spec in specs {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        if name != spec.name {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!("expected tensor {:?}, found {name:?}", spec.name),
            });
        }
        let dtype = r.u8("dtype")?;
        if dtype != T::DTYPE_CODE {
            r.pos -= 1;
            return Err(r.fail(format!(
                "{name}: dtype code {dtype}, reader expects {}",
                T::DTYPE_CODE
            )));
        }
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        if shape != spec.shape {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!("{name}: shape {shape:?}, config implies {:?}", spec.shape),
            });
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * T::BYTES, "tensor payload")?;
        let data: Vec<T> = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        named.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let store = ParamStore::from_tensors(model.layout(), named)?;
    Ok((cfg, store))
}

pub fn save_checkpoint<T: Element>(store: &ParamStore<T>, cfg: &ModelConfig, path: &Path) -> Result<()> {
    write_atomic(path, &encode(cfg, store))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(ModelConfig, ParamStore<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Config of a checkpoint file, e.g. to pick the precision before loading.
pub fn peek_config(path: &Path) -> Result<ModelConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_config(&bytes).map(|(cfg, _, _)| cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pe::PeKind;

    fn cfg() -> ModelConfig {
        ModelConfig {
            stage_channels: vec![8, 16],
            stage_heads: vec![2, 2],
            decoder_channels: 8,
            decoder_hidden: 8,
            pe_kind: PeKind::DepthSao,
            input_height: 32,
            input_width: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn encode_decode_encode_is_identical() {
        let model = DipFormer::new(cfg()).unwrap();
        let store = model.init_params::<f32>(4);
        let bytes = encode(&cfg(), &store);
        let (c2, s2) = decode::<f32>(&bytes).unwrap();
        assert_eq!(c2, cfg());
        assert_eq!(s2.flat_values(), store.flat_values());
        assert_eq!(encode(&c2, &s2), bytes);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let model = DipFormer::new(cfg()).unwrap();
        let bytes = encode(&cfg(), &model.init_params::<f32>(4));
        for cut in (0..bytes.len()).step_by(97) {
            match decode::<f32>(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn corrupt_header_and_hash_are_rejected() {
        let model = DipFormer::new(cfg()).unwrap();
        let bytes = encode(&cfg(), &model.init_params::<f32>(4));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f32>(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode::<f32>(&bad), Err(Error::Format { offset: 4, .. })));
        let text = String::from_utf8_lossy(&bytes[16..]).to_string();
        let pos = 16 + text.find("seed=0").unwrap() + 5;
        let mut bad = bytes.clone();
        bad[pos] = b'1';
        let err = decode::<f32>(&bad).unwrap_err().to_string();
        assert!(err.contains("hash mismatch"), "{err}");
        assert!(decode::<f64>(&bytes).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode::<f32>(&long).is_err());
    }
}
