use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_unit, LATENT_DIM};
use crate::error::{Error, Result};

/// Scale of the perturbation that turns a text vector into its image
/// counterpart; 0.3 gives cosine ≈ 0.96.
const IMAGE_PERTURBATION: f64 = 0.3;
const MAX_INTER_LABEL_COS: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEmbedding {
    pub text: Vec<f64>,
    pub image: Vec<f64>,
}

/// Label → (text, image) embedding pairs, standing in for frozen
/// vision-language projections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub entries: BTreeMap<String, LabelEmbedding>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..LATENT_DIM).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Deterministic table for `labels` (order-insensitive). Text vectors are
/// redrawn until every pair of labels has cosine below 0.5.
pub fn build_embedding_table<S: AsRef<str>>(labels: &[S], seed: u64) -> EmbeddingTable {
    let mut sorted: Vec<&str> = labels.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries: BTreeMap<String, LabelEmbedding> = BTreeMap::new();
    for label in sorted {
        let text = loop {
            let t = unit_gaussian(&mut rng);
            if entries.values().all(|e| cosine(&e.text, &t) < MAX_INTER_LABEL_COS) {
                break t;
            }
        };
        let noise = unit_gaussian(&mut rng);
        let raw: Vec<f64> = text.iter().zip(&noise).map(|(t, n)| t + IMAGE_PERTURBATION * n).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let image = raw.into_iter().map(|x| x / n).collect();
        entries.insert(label.to_string(), LabelEmbedding { text, image });
    }
    EmbeddingTable { entries }
}

impl EmbeddingTable {
    pub fn get(&self, label: &str) -> Option<&LabelEmbedding> {
        self.entries.get(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn validate(&self) -> Result<()> {
        for (label, e) in &self.entries {
            check_unit(&format!("`{label}` text"), &e.text)?;
            check_unit(&format!("`{label}` image"), &e.image)?;
        }
        let v: Vec<_> = self.entries.iter().collect();
        for (i, (a, ea)) in v.iter().enumerate() {
            for (b, eb) in &v[i + 1..] {
                if cosine(&ea.text, &eb.text) >= 0.99 {
                    return Err(Error::Data(format!("labels `{a}` and `{b}` have near-identical embeddings")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: EmbeddingTable = serde_json::from_str(s).map_err(|e| Error::Parse {
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
