//! The decision module: a flow is anomalous only when every per-device model
//! flags it, and legitimate as soon as one model accepts it.

use std::collections::BTreeSet;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::features::FeatureVector;
use crate::model::SparseAutoencoderModel;

#[derive(Debug, Clone)]
pub struct ModelSet {
    models: Vec<SparseAutoencoderModel>,
    n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDecision {
    pub device_type: String,
    pub re: f64,
    pub threshold: f64,
    pub decision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub flow_id: u64,
    pub anomalous: bool,
    pub per_model: Vec<ModelDecision>,
}

/// Intersection of per-model anomaly decisions.
pub fn combine(decisions: &[bool]) -> bool {
    !decisions.is_empty() && decisions.iter().all(|&d| d)
}

impl ModelSet {
    pub fn new(models: Vec<SparseAutoencoderModel>) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::Config("a model set needs at least one model".into()))?;
        let n = first.features.n;
        let input = first.network.input_size;
        let mut seen = BTreeSet::new();
        for m in &models {
            m.require_threshold()?;
            if m.features.n != n || m.network.input_size != input {
                return Err(Error::Config(format!(
                    "model {:?} uses N={} / {} inputs, expected N={n} / {input}",
                    m.device_type, m.features.n, m.network.input_size
                )));
            }
            if !seen.insert(m.device_type.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate device type {:?} in model set",
                    m.device_type
                )));
            }
        }
        Ok(ModelSet { models, n })
    }

    /// Loads every `*.json` model in `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json") && p.is_file())
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!(
                "no .json models in {}",
                dir.display()
            )));
        }
        let models = paths
            .iter()
            .map(|p| SparseAutoencoderModel::load(p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(models)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[SparseAutoencoderModel] {
        &self.models
    }

    pub fn device_types(&self) -> impl Iterator<Item = &str> {
        self.models.iter().map(|m| m.device_type.as_str())
    }

    /// Device types expected in the traffic that no model covers. Each one is
    /// logged as a warning; decisions are still made.
    pub fn coverage_gaps<'a>(&self, expected: &[&'a str]) -> Vec<&'a str> {
        let have: BTreeSet<&str> = self.device_types().collect();
        let missing: Vec<&str> = expected
            .iter()
            .copied()
            .filter(|d| !have.contains(d))
            .collect();
        for d in &missing {
            warn!("no model covers device type {d:?}; its flows are likely to be flagged");
        }
        missing
    }

    pub fn decide(&self, v: &FeatureVector) -> Result<Verdict> {
        if v.n != self.n {
            return Err(Error::param(format!(
                "flow {} featurized with N={}, models expect N={}",
                v.flow_id, v.n, self.n
            )));
        }
        let per_model = self
            .models
            .iter()
            .map(|m| {
                let threshold = m.require_threshold()?;
                let re = m.score_raw(v)?;
                Ok(ModelDecision {
                    device_type: m.device_type.clone(),
                    re,
                    threshold,
                    decision: re > threshold,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let anomalous = per_model.iter().all(|d| d.decision);
        Ok(Verdict {
            flow_id: v.flow_id,
            anomalous,
            per_model,
        })
    }

    pub fn decide_batch(&self, vs: &[FeatureVector]) -> Result<Vec<Verdict>> {
        self.decide_batch_with(vs, ExecMode::default())
    }

    pub fn decide_batch_with(&self, vs: &[FeatureVector], mode: ExecMode) -> Result<Vec<Verdict>> {
        exec::try_map(mode, vs, |v| self.decide(v))
    }
}

pub fn write_verdicts_jsonl<W: std::io::Write>(mut w: W, verdicts: &[Verdict]) -> Result<()> {
    for v in verdicts {
        serde_json::to_writer(&mut w, v).map_err(|e| Error::json("<verdicts>", e))?;
        w.write_all(b"\n").map_err(|e| Error::io("<verdicts>", e))?;
    }
    Ok(())
}
