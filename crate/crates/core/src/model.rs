//! A per-device detector: normalization, network, threshold, plus its JSON
//! model file.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::calibration::{self, ThresholdReport};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureVector, NormalizationParams};
use crate::sae::{self, Autoencoder, Hyperparams, TrainReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseAutoencoderModel {
    pub device_type: String,
    pub features: FeatureConfig,
    pub hyperparams: Hyperparams,
    pub normalization: NormalizationParams,
    pub network: Autoencoder,
    pub threshold: Option<f64>,
    pub calibration: Option<ThresholdReport>,
    pub rng_seed: u64,
    /// Unix seconds; informational only.
    pub trained_at: Option<u64>,
}

/// Everything produced by [`fit_device_model`].
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: SparseAutoencoderModel,
    pub train_report: TrainReport,
    pub threshold_report: ThresholdReport,
}

/// Fits normalization on `train`, trains the network and calibrates its
/// threshold on `validation`. Inputs are raw feature vectors.
pub fn fit_device_model(
    device_type: &str,
    train: &[FeatureVector],
    validation: &[FeatureVector],
    features: FeatureConfig,
    hyperparams: &Hyperparams,
    seed: u64,
) -> Result<FittedModel> {
    if let Some(v) = train.iter().chain(validation).find(|v| v.n != features.n) {
        return Err(Error::param(format!(
            "flow {} was featurized with N={}, expected {}",
            v.flow_id, v.n, features.n
        )));
    }
    let normalization = NormalizationParams::fit_vectors(train)?;
    let norm = |vs: &[FeatureVector]| -> Result<Vec<Vec<f64>>> {
        vs.iter()
            .map(|v| normalization.normalize(v.as_slice()))
            .collect()
    };
    let train_z = norm(train)?;
    let val_z = norm(validation)?;
    let (network, train_report) = sae::train(&train_z, &val_z, hyperparams, seed)?;
    let mut model = SparseAutoencoderModel {
        device_type: device_type.to_string(),
        features,
        hyperparams: *hyperparams,
        normalization,
        network,
        threshold: None,
        calibration: None,
        rng_seed: seed,
        trained_at: None,
    };
    let threshold_report = calibration::calibrate(&mut model, &val_z)?;
    Ok(FittedModel {
        model,
        train_report,
        threshold_report,
    })
}

impl SparseAutoencoderModel {
    pub fn require_threshold(&self) -> Result<f64> {
        self.threshold.ok_or_else(|| {
            Error::State(format!(
                "model {:?} has not been calibrated",
                self.device_type
            ))
        })
    }

    pub fn normalize(&self, v: &FeatureVector) -> Result<Vec<f64>> {
        self.normalization.normalize(v.as_slice())
    }

    /// Reconstruction error of a raw (unnormalized) feature vector.
    pub fn score_raw(&self, v: &FeatureVector) -> Result<f64> {
        self.network.score(&self.normalize(v)?)
    }

    pub fn stamp_now(&mut self) {
        self.trained_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs());
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        self.network.validate()?;
        self.normalization.validate()?;
        if self.network.input_size != self.hyperparams.input_size
            || self.network.hidden_size != self.hyperparams.hidden_size
        {
            return Err(Error::param("network shape disagrees with hyperparameters"));
        }
        if self.normalization.dim() != self.network.input_size {
            return Err(Error::param(
                "normalization width disagrees with input size",
            ));
        }
        if let Some(t) = self.threshold {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::param(format!("threshold must be > 0, got {t}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&ModelFile::from(self)).map_err(|e| Error::json("<model>", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::json("<model>", e))?;
        file.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        file.try_into().map_err(|e: Error| match e {
            Error::Parameter(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    device_type: String,
    features: FeatureConfig,
    hyperparams: Hyperparams,
    normalization: NormalizationParams,
    weights: WeightsFile,
    threshold: Option<f64>,
    calibration: Option<ThresholdReport>,
    rng_seed: u64,
    trained_at: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct WeightsFile {
    W1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    W2: Vec<Vec<f64>>,
    b2: Vec<f64>,
}

impl From<&SparseAutoencoderModel> for ModelFile {
    fn from(m: &SparseAutoencoderModel) -> Self {
        let net = &m.network;
        ModelFile {
            schema_version: SCHEMA_VERSION,
            device_type: m.device_type.clone(),
            features: m.features,
            hyperparams: m.hyperparams,
            normalization: m.normalization.clone(),
            weights: WeightsFile {
                W1: net.w1.chunks(net.input_size).map(<[f64]>::to_vec).collect(),
                b1: net.b1.clone(),
                W2: net
                    .w2
                    .chunks(net.hidden_size)
                    .map(<[f64]>::to_vec)
                    .collect(),
                b2: net.b2.clone(),
            },
            threshold: m.threshold,
            calibration: m.calibration.clone(),
            rng_seed: m.rng_seed,
            trained_at: m.trained_at,
        }
    }
}

impl TryFrom<ModelFile> for SparseAutoencoderModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.schema_version != SCHEMA_VERSION {
            return Err(Error::param(format!(
                "unsupported model schema version {}",
                f.schema_version
            )));
        }
        let hp = f.hyperparams;
        let flatten = |rows: Vec<Vec<f64>>, width: usize, name: &str| -> Result<Vec<f64>> {
            if rows.iter().any(|r| r.len() != width) {
                return Err(Error::param(format!(
                    "{name} rows must have {width} columns"
                )));
            }
            Ok(rows.into_iter().flatten().collect())
        };
        let network = Autoencoder {
            input_size: hp.input_size,
            hidden_size: hp.hidden_size,
            w1: flatten(f.weights.W1, hp.input_size, "W1")?,
            b1: f.weights.b1,
            w2: flatten(f.weights.W2, hp.hidden_size, "W2")?,
            b2: f.weights.b2,
        };
        let model = SparseAutoencoderModel {
            device_type: f.device_type,
            features: f.features,
            hyperparams: hp,
            normalization: f.normalization,
            network,
            threshold: f.threshold,
            calibration: f.calibration,
            rng_seed: f.rng_seed,
            trained_at: f.trained_at,
        };
        model.validate()?;
        Ok(model)
    }
}
