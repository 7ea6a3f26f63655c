use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use saeids::eval::EvalConfig;
use saeids::features::FeatureConfig;
use saeids::sae::Hyperparams;

use crate::Usage;

/// Flat pipeline settings. Every key is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub timeout_seconds: f64,
    pub n: usize,
    pub include_empty_packets: bool,
    pub hidden_size: usize,
    pub target_sparsity: f64,
    pub sparsity_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Seeds weight init, batch order and train/validation splits.
    pub seed: u64,
    /// Seeds the synthetic corpus.
    pub synth_seed: u64,
    pub flows_per_device: usize,
    pub malicious_flows: usize,
    pub k_folds: usize,
    pub validation_fraction: f64,
    pub n_values: Vec<usize>,
    pub models_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let hp = Hyperparams::default();
        let eval = EvalConfig::default();
        let synth = saeids::eval::SynthConfig::default();
        PipelineConfig {
            timeout_seconds: saeids::flow::DEFAULT_TIMEOUT_SECS,
            n: 3,
            include_empty_packets: false,
            hidden_size: hp.hidden_size,
            target_sparsity: hp.target_sparsity,
            sparsity_weight: hp.sparsity_weight,
            learning_rate: hp.learning_rate,
            batch_size: hp.batch_size,
            max_epochs: hp.max_epochs,
            patience: hp.patience,
            seed: eval.seed,
            synth_seed: synth.seed,
            flows_per_device: synth.flows_per_device,
            malicious_flows: synth.malicious_flows,
            k_folds: eval.k_folds,
            validation_fraction: 1.0 - eval.train_fraction,
            n_values: (2..=10).collect(),
            models_dir: PathBuf::from("models"),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Usage(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Usage(msg).into());
        if !(self.timeout_seconds.is_finite() && self.timeout_seconds > 0.0) {
            return fail(format!(
                "timeout_seconds must be > 0, got {}",
                self.timeout_seconds
            ));
        }
        if self.n < saeids::features::MIN_PACKETS {
            return fail(format!("n must be at least 2, got {}", self.n));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return fail(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.k_folds < 2 {
            return fail(format!("k_folds must be at least 2, got {}", self.k_folds));
        }
        if let Some(bad) = self
            .n_values
            .iter()
            .find(|&&n| n < saeids::features::MIN_PACKETS)
        {
            return fail(format!("n_values entries must be at least 2, got {bad}"));
        }
        self.hyperparams()
            .validate()
            .map_err(|e| Usage(e.to_string()))
            .context("invalid hyperparameters")?;
        Ok(())
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            hidden_size: self.hidden_size,
            target_sparsity: self.target_sparsity,
            sparsity_weight: self.sparsity_weight,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            ..Hyperparams::default()
        }
    }

    pub fn features(&self) -> FeatureConfig {
        FeatureConfig {
            n: self.n,
            include_empty_packets: self.include_empty_packets,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            k_folds: self.k_folds,
            train_fraction: 1.0 - self.validation_fraction,
            hyperparams: self.hyperparams(),
            include_empty_packets: self.include_empty_packets,
            seed: self.seed,
            ..EvalConfig::default()
        }
    }
}
