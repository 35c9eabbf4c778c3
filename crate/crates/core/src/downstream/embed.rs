//! Frozen-backbone embeddings for every sample of a dataset.

use crate::data::{Sample, Split, Splits};
use crate::model::{Dart, GateMode};
use crate::scalar::Scalar;
use crate::taxonomy::DamageLabel;
use crate::tensor::TensorResult;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &str = "DARTEMB 1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub split: Split,
    pub class_index: usize,
    pub severity_scalar: f64,
    pub description: String,
    pub embedding: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn label(&self) -> DamageLabel {
        DamageLabel::from_class(self.class_index).expect("validated class index")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    /// Content hash of the parameters that produced the embeddings.
    pub fingerprint: String,
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingStore {
    /// Embed `splits` with the model's final pooled representation.
    pub fn extract<S: Scalar>(model: &Dart<S>, splits: &Splits, mode: GateMode, chunk: usize) -> TensorResult<Self> {
        let mut records = Vec::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let samples: Vec<&Sample> = splits.get(split).samples.iter().collect();
            let inf = model.infer_samples(&samples, &splits.norm, mode, chunk)?;
            for (s, e) in samples.iter().zip(inf.embeddings) {
                records.push(EmbeddingRecord {
                    id: s.id,
                    split,
                    class_index: s.label.class_index,
                    severity_scalar: s.severity_scalar,
                    description: s.description.clone(),
                    embedding: e,
                });
            }
        }
        Ok(EmbeddingStore {
            fingerprint: model.params.content_hash(),
            dim: model.cfg.vit.embed_dim,
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&EmbeddingRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn matrix(records: &[&EmbeddingRecord]) -> Vec<Vec<f64>> {
        records.iter().map(|r| r.embedding.clone()).collect()
    }

    pub fn labels(records: &[&EmbeddingRecord]) -> Vec<usize> {
        records.iter().map(|r| r.class_index).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{MAGIC} fingerprint={} dim={} count={}", self.fingerprint, self.dim, self.records.len())?;
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let mut lines = BufReader::new(fs::File::open(path)?).lines();
        let bad = |line: usize, msg: &str| StoreError::Format { line, msg: msg.to_string() };
        let header = lines.next().ok_or_else(|| bad(1, "empty file"))??;
        let rest = header.strip_prefix(MAGIC).ok_or_else(|| bad(1, "not an embedding store"))?;
        let mut fields = std::collections::HashMap::new();
        for kv in rest.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(1, "malformed header"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(1, &format!("header lacks {k}")));
        let fingerprint = get("fingerprint")?.to_string();
        let dim: usize = get("dim")?.parse().map_err(|_| bad(1, "bad dim"))?;
        let count: usize = get("count")?.parse().map_err(|_| bad(1, "bad count"))?;
        let mut records = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let r: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| bad(i + 2, &e.to_string()))?;
            if r.embedding.len() != dim || DamageLabel::from_class(r.class_index).is_none() {
                return Err(bad(i + 2, "record does not match header"));
            }
            records.push(r);
        }
        if records.len() != count {
            return Err(bad(0, &format!("header says {count} records, found {}", records.len())));
        }
        Ok(EmbeddingStore { fingerprint, dim, records })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Store with embeddings supplied per record.
    pub(crate) fn store_of(rows: Vec<(Split, usize, f64, Vec<f64>)>) -> EmbeddingStore {
        let dim = rows.first().map(|r| r.3.len()).unwrap_or(0);
        EmbeddingStore {
            fingerprint: "test".into(),
            dim,
            records: rows
                .into_iter()
                .enumerate()
                .map(|(i, (split, class_index, severity_scalar, embedding))| EmbeddingRecord {
                    id: i as u64,
                    split,
                    class_index,
                    severity_scalar,
                    description: String::new(),
                    embedding,
                })
                .collect(),
        }
    }

    #[test]
    fn file_round_trip() {
        let s = store_of(vec![(Split::Train, 3, 0.7, vec![0.1, -2.5e-17]), (Split::Test, 13, 0.5, vec![1.0 / 3.0, 7.0])]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.jsonl");
        s.save(&p).unwrap();
        assert_eq!(EmbeddingStore::load(&p).unwrap(), s);
        let text = fs::read_to_string(&p).unwrap().replace("count=2", "count=3");
        fs::write(&p, text).unwrap();
        assert!(EmbeddingStore::load(&p).is_err());
    }

    #[test]
    fn extraction_is_bitwise_repeatable() {
        use crate::data::{make_splits, SplitCounts};
        use crate::model::{default_vocabulary, Dart, ModelConfig};
        let mut c = ModelConfig::default();
        c.vit.depth = 1;
        c.vit.embed_dim = 16;
        c.text.depth = 3;
        c.text.dim = 8;
        c.text.taps = [1, 2, 3];
        c.classifier_hidden = 8;
        let m = Dart::<f64>::new(c, default_vocabulary(), 4);
        let splits = make_splits(&SplitCounts::default().scaled(0.02), 3).unwrap();
        let a = EmbeddingStore::extract(&m, &splits, GateMode::Predicted, 16).unwrap();
        let b = EmbeddingStore::extract(&m, &splits, GateMode::Predicted, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), splits.train.len() + splits.val.len() + splits.test.len());
    }
}
