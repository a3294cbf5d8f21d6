//! Named-tensor checkpoint archive.
//!
//! Layout: an ASCII magic line `SPMO-CKPT <version>`, one line of JSON
//! header, then the raw little-endian `f64` payload. For each tensor listed
//! in the header, in order: its values, then (when `optimizer_state` is
//! set) its Adam first and second moments. Reloading is bit-exact.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "SPMO-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    step: u64,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    optimizer_state: bool,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        optimizer_state: true,
        meta: meta.clone(),
        tensors: store
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                step: p.step,
                frozen: p.frozen,
            })
            .collect(),
    };
    let mut buf = Vec::new();
    writeln!(buf, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    serde_json::to_writer(&mut buf, &header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    buf.push(b'\n');
    for p in store.iter() {
        for x in p.value.data().iter().chain(&p.m).chain(&p.v) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| NnError::Checkpoint(format!("payload truncated while reading {what}")))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Loads a checkpoint into a fresh store, returning it with the header
/// metadata.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let mut parts = line.trim_end().split(' ');
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(NnError::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| NnError::Checkpoint("missing version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(&line).map_err(|e| NnError::Checkpoint(format!("header: {e}")))?;
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let values = read_f64s(&mut r, n, &t.name)?;
        store.insert(&t.name, Tensor::new(t.shape.clone(), values)?)?;
        let p = store.get_mut(&t.name)?;
        if header.optimizer_state {
            p.m = read_f64s(&mut r, n, &t.name)?;
            p.v = read_f64s(&mut r, n, &t.name)?;
        }
        p.step = t.step;
        p.frozen = t.frozen;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(NnError::Checkpoint("trailing bytes after payload".into()));
    }
    Ok((store, header.meta))
}

impl ParamStore {
    /// Replaces values and optimizer state with those of `loaded`. Both
    /// stores must hold exactly the same names and shapes.
    pub fn restore_from(&mut self, loaded: &ParamStore) -> Result<()> {
        if self.len() != loaded.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                self.len()
            )));
        }
        for p in self.params_mut() {
            let src = loaded.get(&p.name)?;
            if src.value.shape() != p.value.shape() {
                return Err(NnError::Checkpoint(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
            p.m = src.m.clone();
            p.v = src.v.clone();
            p.step = src.step;
            p.frozen = src.frozen;
            p.grad = None;
        }
        Ok(())
    }
}
