//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "VRLABCK\0" | u32 version | u64 seed | u64 encoder_seed
//! u32 len | model config (JSON)
//! section encoder | section trainable
//! section := u32 count, then per tensor:
//!            u32 name_len | name | u32 rank | u64 dims[rank] | f64 data[..]
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use vrlab_core::model::{ModelConfig, ModelParams};
use vrlab_core::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"VRLABCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub encoder_seed: u64,
    pub model: ModelConfig,
    pub params: ModelParams,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    r.take(n as u64).read_to_end(&mut v)?;
    if v.len() != n {
        return Err(CheckpointError::Format("truncated".into()));
    }
    Ok(v)
}

fn write_section(w: &mut impl Write, store: &ParamStore) -> Result<()> {
    put_u32(w, store.len() as u32)?;
    for (name, t) in store.iter() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank() as u32)?;
        for &d in t.shape() {
            put_u64(w, d as u64)?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_section(r: &mut impl Read) -> Result<ParamStore> {
    let count = get_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let name = String::from_utf8(get_bytes(r, len)?).map_err(|_| CheckpointError::Format("tensor name is not utf-8".into()))?;
        let rank = get_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(CheckpointError::Format(format!("{name}: rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<_>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| CheckpointError::Format(format!("{name}: shape {shape:?} too large")))?;
        let raw = get_bytes(r, n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
        store.insert(name, t);
    }
    Ok(store)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_u64(w, self.seed)?;
        put_u64(w, self.encoder_seed)?;
        let cfg = serde_json::to_vec(&self.model).expect("config serialises");
        put_u32(w, cfg.len() as u32)?;
        w.write_all(&cfg)?;
        write_section(w, &self.params.encoder)?;
        write_section(w, &self.params.trainable)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let seed = get_u64(r)?;
        let encoder_seed = get_u64(r)?;
        let len = get_u32(r)? as usize;
        let model = serde_json::from_slice(&get_bytes(r, len)?).map_err(|e| CheckpointError::Format(format!("model config: {e}")))?;
        let encoder = read_section(r)?;
        let trainable = read_section(r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(Self {
            seed,
            encoder_seed,
            model,
            params: ModelParams { encoder, trainable },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Fails unless the checkpoint was produced for `model` with the same
    /// frozen encoder.
    pub fn ensure_compatible(&self, model: &ModelConfig, encoder_seed: u64) -> Result<()> {
        if self.encoder_seed != encoder_seed {
            return Err(CheckpointError::Incompatible(format!(
                "encoder_seed {} in checkpoint, {encoder_seed} in config",
                self.encoder_seed
            )));
        }
        if &self.model != model {
            let a = serde_json::to_value(&self.model).expect("serialises");
            let b = serde_json::to_value(model).expect("serialises");
            let field = first_difference(&a, &b, String::new()).unwrap_or_default();
            return Err(CheckpointError::Incompatible(format!("model config differs at {field}")));
        }
        Ok(())
    }
}

fn first_difference(a: &serde_json::Value, b: &serde_json::Value, path: String) -> Option<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match y.get(k) {
                    Some(vb) => {
                        if let Some(d) = first_difference(va, vb, p) {
                            return Some(d);
                        }
                    }
                    None => return Some(p),
                }
            }
            y.keys().find(|k| !x.contains_key(*k)).map(|k| format!("{path}.{k}"))
        }
        _ if a == b => None,
        _ => Some(path),
    }
}
