//! Pieces shared by the training loops: per-step RNG streams and the
//! append-only training log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RNG for training step `step`. Deriving a fresh stream per step makes a
/// resumed run draw exactly the batches the uninterrupted run would have.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub step: u64,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub elapsed_ms: u64,
}

/// Training-curve log kept in memory and, optionally, appended to a JSON
/// Lines file.
pub struct TrainLog {
    file: Option<File>,
    start: Instant,
    pub records: Vec<LogRecord>,
}

impl Default for TrainLog {
    fn default() -> Self {
        Self::memory()
    }
}

impl TrainLog {
    pub fn memory() -> Self {
        Self {
            file: None,
            start: Instant::now(),
            records: Vec::new(),
        }
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Some(file),
            ..Self::memory()
        })
    }

    /// Records one step. Fails on a non-finite loss or term so that a
    /// diverged run stops instead of writing garbage checkpoints.
    pub fn record(&mut self, stage: &str, step: u64, loss: f64, terms: BTreeMap<String, f64>, grad_norm: f64) -> Result<()> {
        if !loss.is_finite() || terms.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{stage} loss at step {step}: {loss} {terms:?}")));
        }
        let rec = LogRecord {
            stage: stage.to_string(),
            step,
            loss,
            terms,
            grad_norm,
            elapsed_ms: self.start.elapsed().as_millis() as u64,
        };
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&rec).expect("record serialises");
            writeln!(f, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        log::debug!("{stage} step {step} loss {loss:.6}");
        self.records.push(rec);
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}
