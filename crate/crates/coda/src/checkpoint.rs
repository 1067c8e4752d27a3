//! Versioned, bit-exact checkpoint format.
//!
//! Layout: magic `CODA1` (5 bytes), format version u32 LE, record count
//! u32 LE, then per record { name_len u32, name bytes, dtype tag u8
//! (0 = f32, 1 = f64), rank u8, dims u32 x rank, raw little-endian data },
//! and a trailing u64 CRC-64 checksum of all preceding bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::model::{expected_param_names, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::training::TrainState;
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"CODA1";
pub const FORMAT_VERSION: u32 = 1;

// CRC-64/ECMA-182
const CRC64_POLY: u64 = 0x42F0_E1EB_A9EA_3693;

pub fn crc64(bytes: &[u8]) -> u64 {
    let mut crc: u64 = 0;
    for &b in bytes {
        crc ^= (b as u64) << 56;
        for _ in 0..8 {
            crc = if crc & (1 << 63) != 0 { (crc << 1) ^ CRC64_POLY } else { crc << 1 };
        }
    }
    crc
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

fn encode_records(records: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(1u8); // f64
        if t.rank() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor '{name}' rank too large")));
        }
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc64(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn decode_records(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let fail = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < MAGIC.len() + 8 + 8 {
        return Err(fail("truncated file"));
    }
    if &bytes[..5] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic header {:?}, expected {:?}",
            &bytes[..5.min(bytes.len())],
            MAGIC
        )));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored_crc = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if crc64(body) != stored_crc {
        return Err(fail("checksum mismatch"));
    }
    let mut pos = 5usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > body.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &body[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} not supported (expected {FORMAT_VERSION})"
        )));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| fail("non-utf8 tensor name"))?;
        let dtype = take(1)?[0];
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let data = match dtype {
            1 => take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f64>>(),
            0 => take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect::<Vec<f64>>(),
            other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        };
        records.insert(name, Tensor::new(shape, data)?);
    }
    if pos != body.len() {
        return Err(fail("trailing bytes after last record"));
    }
    Ok(records)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut records: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in state.params.iter() {
        records.insert(format!("param.{name}"), t.clone());
    }
    for (name, m) in &state.moment1 {
        records.insert(format!("opt.m.{name}"), Tensor::new(vec![m.len()], m.clone())?);
    }
    for (name, v) in &state.moment2 {
        records.insert(format!("opt.v.{name}"), Tensor::new(vec![v.len()], v.clone())?);
    }
    records.insert("meta.step".into(), Tensor::scalar(state.step as f64));
    records.insert("meta.seed".into(), Tensor::scalar(state.seed as f64));
    records.insert("meta.best_val_loss".into(), Tensor::scalar(state.best_val_loss));
    let buf = encode_records(&records)?;
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Loads a checkpoint and validates its parameter schema against `cfg`,
/// naming any missing or unexpected tensors.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let records = decode_records(&bytes)?;

    let expected: Vec<String> = expected_param_names(cfg);
    let have: Vec<&String> = records.keys().filter(|k| k.starts_with("param.")).collect();
    let missing: Vec<String> = expected
        .iter()
        .filter(|n| !records.contains_key(&format!("param.{n}")))
        .cloned()
        .collect();
    let extra: Vec<String> = have
        .iter()
        .map(|k| k["param.".len()..].to_string())
        .filter(|n| !expected.contains(n))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Structural(format!(
            "checkpoint does not match config (variant {}): missing tensors {missing:?}, unexpected tensors {extra:?}",
            cfg.variant.name()
        )));
    }

    let scalar = |key: &str| -> Result<f64> {
        records
            .get(key)
            .map(Tensor::item)
            .ok_or_else(|| Error::Checkpoint(format!("missing record '{key}'")))
    };
    let step = scalar("meta.step")? as u64;
    let seed = scalar("meta.seed")? as u64;
    let best_val_loss = scalar("meta.best_val_loss")?;

    let mut params = {
        use rand::SeedableRng;
        ModelParams::init(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?
    };
    let mut moment1 = BTreeMap::new();
    let mut moment2 = BTreeMap::new();
    for name in &expected {
        let t = records[&format!("param.{name}")].clone();
        let want = params.get(name)?.shape().to_vec();
        if t.shape() != want {
            return Err(Error::Structural(format!(
                "tensor '{name}' has shape {:?}, config expects {want:?}",
                t.shape()
            )));
        }
        let n = t.len();
        params.insert(name.clone(), t);
        let m = records
            .get(&format!("opt.m.{name}"))
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let v = records
            .get(&format!("opt.v.{name}"))
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        moment1.insert(name.clone(), m);
        moment2.insert(name.clone(), v);
    }
    Ok(TrainState { params, moment1, moment2, step, seed, best_val_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, VariantKind};
    use crate::model::forward_lm;

    fn cfg(variant: VariantKind) -> ModelConfig {
        let mut c = ModelConfig::desk_default(variant, Architecture::Lm, 8);
        c.d_model = 16;
        c.d_ff = 32;
        c.heads = 2;
        c.max_len = 8;
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = cfg(VariantKind::Coda);
        let state = TrainState::new(&c, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path, &c).unwrap();
        assert_eq!(loaded.step, state.step);
        let tokens = vec![vec![1usize, 4, 5, 6]];
        let a = forward_lm(&c, &state.params, &tokens, None).unwrap();
        let b = forward_lm(&c, &loaded.params, &tokens, None).unwrap();
        assert_eq!(a.graph.value(a.logits), b.graph.value(b.logits));
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let c = cfg(VariantKind::Vanilla);
        let state = TrainState::new(&c, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path, &c).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let c = cfg(VariantKind::Vanilla);
        let state = TrainState::new(&c, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path, &c).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let c = cfg(VariantKind::Vanilla);
        let state = TrainState::new(&c, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(load_checkpoint(&path, &c).is_err());
    }

    #[test]
    fn coda_checkpoint_into_vanilla_config_names_cascade_tensors() {
        let c = cfg(VariantKind::Coda);
        let state = TrainState::new(&c, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let err = load_checkpoint(&path, &cfg(VariantKind::Vanilla)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("casc"), "{msg}");
        assert!(msg.contains("unexpected"), "{msg}");
    }
}
