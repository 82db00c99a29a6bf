//! Versioned JSON persistence for trained models.
//!
//! The document stores the flat parameter vector plus everything needed to
//! rebuild the prediction caches: model configuration, raw training
//! sequences and normalization statistics.

use crate::bound::{recover_qz, OptimalQz};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::gpnarx::GpNarxModel;
use crate::kernel::KernelParams;
use crate::model::{pack, unpack, ModelConfig, RevarbState};
use crate::recognition::{RecognitionConfig, RecognitionNet, RecognitionWindow};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MODEL_DOC_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecognitionDoc {
    pub depth: usize,
    pub width: usize,
    pub window: RecognitionWindow,
    /// Flat weights per hidden layer.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDocument {
    Revarb {
        version: u32,
        config: ModelConfig,
        n: usize,
        /// Packed parameter vector (log space for positive quantities).
        params: Vec<f64>,
        normalization: Normalization,
        /// Raw (unnormalized) training sequences.
        train_u: Vec<f64>,
        train_y: Vec<f64>,
        recognition: Option<RecognitionDoc>,
    },
    Gpnarx {
        version: u32,
        lag: usize,
        input_lag: usize,
        signal_variance: f64,
        ard_weights: Vec<f64>,
        noise_variance: f64,
        normalization: Normalization,
        train_u: Vec<f64>,
        train_y: Vec<f64>,
    },
}

impl ModelDocument {
    pub fn from_revarb(
        state: &RevarbState<f64>,
        normalization: Normalization,
        train_u_raw: &Array1<f64>,
        train_y_raw: &Array1<f64>,
        recognition: Option<(&RecognitionConfig, &[RecognitionNet<f64>])>,
    ) -> Self {
        ModelDocument::Revarb {
            version: MODEL_DOC_VERSION,
            config: state.config.clone(),
            n: state.n,
            params: pack(state).to_vec(),
            normalization,
            train_u: train_u_raw.to_vec(),
            train_y: train_y_raw.to_vec(),
            recognition: recognition.map(|(cfg, nets)| RecognitionDoc {
                depth: cfg.depth,
                width: cfg.width,
                window: cfg.window,
                weights: nets.iter().map(|n| n.to_flat()).collect(),
            }),
        }
    }

    pub fn from_gpnarx(
        model: &GpNarxModel<f64>,
        normalization: Normalization,
        train_u_raw: &Array1<f64>,
        train_y_raw: &Array1<f64>,
    ) -> Self {
        ModelDocument::Gpnarx {
            version: MODEL_DOC_VERSION,
            lag: model.lag,
            input_lag: model.input_lag,
            signal_variance: model.kernel.signal_variance,
            ard_weights: model.kernel.ard_weights.to_vec(),
            noise_variance: model.noise_variance,
            normalization,
            train_u: train_u_raw.to_vec(),
            train_y: train_y_raw.to_vec(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        let version = match &doc {
            ModelDocument::Revarb { version, .. } => *version,
            ModelDocument::Gpnarx { version, .. } => *version,
        };
        if version != MODEL_DOC_VERSION {
            return Err(Error::Serialization(format!(
                "unsupported model document version {version}"
            )));
        }
        Ok(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn normalization(&self) -> &Normalization {
        match self {
            ModelDocument::Revarb { normalization, .. } => normalization,
            ModelDocument::Gpnarx { normalization, .. } => normalization,
        }
    }
}

/// A model document instantiated back into a usable predictor.
pub enum LoadedModel {
    Revarb {
        state: RevarbState<f64>,
        qz: OptimalQz<f64>,
        normalization: Normalization,
        recognition: Option<RecognitionDoc>,
    },
    Gpnarx {
        model: GpNarxModel<f64>,
        normalization: Normalization,
    },
}

/// Rebuild the prediction caches from a document.
pub fn instantiate(doc: &ModelDocument) -> Result<LoadedModel> {
    match doc {
        ModelDocument::Revarb {
            config,
            n,
            params,
            normalization,
            train_u,
            train_y,
            recognition,
            ..
        } => {
            let state = unpack(&Array1::from_vec(params.clone()), config, *n)?;
            if train_u.len() != *n || train_y.len() != *n {
                return Err(Error::Serialization(
                    "training sequences disagree with n".into(),
                ));
            }
            let u = Array1::from_vec(train_u.clone())
                .mapv(|v: f64| (v - normalization.u_mean) / normalization.u_std);
            let y = Array1::from_vec(train_y.clone())
                .mapv(|v: f64| (v - normalization.y_mean) / normalization.y_std);
            let qz = recover_qz(&state, &u, &y)?;
            Ok(LoadedModel::Revarb {
                state,
                qz,
                normalization: *normalization,
                recognition: recognition.clone(),
            })
        }
        ModelDocument::Gpnarx {
            lag,
            input_lag,
            signal_variance,
            ard_weights,
            noise_variance,
            normalization,
            train_u,
            train_y,
            ..
        } => {
            let u = Array1::from_vec(train_u.clone())
                .mapv(|v: f64| (v - normalization.u_mean) / normalization.u_std);
            let y = Array1::from_vec(train_y.clone())
                .mapv(|v: f64| (v - normalization.y_mean) / normalization.y_std);
            let kernel = KernelParams::new(
                *signal_variance,
                Array1::from_vec(ard_weights.clone()),
            )?;
            let model =
                GpNarxModel::with_params(&u, &y, *lag, *input_lag, kernel, *noise_variance)?;
            Ok(LoadedModel::Gpnarx {
                model,
                normalization: *normalization,
            })
        }
    }
}
