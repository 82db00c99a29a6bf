//! Experiment orchestration: dataset preparation, model training, free
//! simulation, RMSE in original units, and artifact emission.

use crate::bound::recover_qz;
use crate::data::{
    generate_synthetic, load_csv, normalize, Normalization, SequenceDataset, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::gpnarx::fit_gpnarx;
use crate::model::ModelConfig;
use crate::persist::ModelDocument;
use crate::predict::{free_simulate, rmse, write_predictions_csv, SimStep};
use crate::recognition::{RecognitionConfig, RecognitionWindow};
use crate::trainer::{fit, fit_with_recognition, TrainOptions, TrainTrace};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

fn default_train_fraction() -> f64 {
    0.5
}

/// Where a dataset comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Csv {
        name: String,
        path: String,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
    Synthetic {
        name: String,
        seed: u64,
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        spec: SyntheticSpec,
    },
}

impl DatasetSpec {
    pub fn name(&self) -> &str {
        match self {
            DatasetSpec::Csv { name, .. } => name,
            DatasetSpec::Synthetic { name, .. } => name,
        }
    }

    /// Load or generate, returning raw train and test splits.
    pub fn materialize(&self) -> Result<(SequenceDataset<f64>, SequenceDataset<f64>)> {
        match self {
            DatasetSpec::Csv {
                path,
                train_fraction,
                name,
            } => {
                if !(0.0 < *train_fraction && *train_fraction < 1.0) {
                    return Err(Error::Invalid(format!(
                        "train_fraction {train_fraction} outside (0, 1)"
                    )));
                }
                let full = load_csv::<f64>(Path::new(path))?;
                let split = ((full.len() as f64) * train_fraction).round() as usize;
                let (mut train, mut test) = full.split_at(split)?;
                train.name = format!("{name}_train");
                test.name = format!("{name}_test");
                Ok((train, test))
            }
            DatasetSpec::Synthetic {
                seed,
                n_train,
                n_test,
                spec,
                ..
            } => generate_synthetic(spec, *seed, *n_train, *n_test),
        }
    }
}

/// Which model variants an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Revarb,
    RevarbRecognition,
    Gpnarx,
}

impl ModelChoice {
    pub fn label(&self) -> &'static str {
        match self {
            ModelChoice::Revarb => "revarb",
            ModelChoice::RevarbRecognition => "revarb_recognition",
            ModelChoice::Gpnarx => "gpnarx",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSettings {
    pub hidden_layers: usize,
    pub lag: usize,
    pub input_lag: usize,
    pub num_inducing: usize,
}

impl ModelSettings {
    pub fn to_config(&self) -> Result<ModelConfig> {
        ModelConfig::new(
            self.hidden_layers,
            self.lag,
            self.input_lag,
            self.num_inducing,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub max_evals: usize,
    pub restarts: usize,
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub convergence_tol: f64,
    #[serde(default)]
    pub fixed_variances_phase: Option<usize>,
}

fn default_tol() -> f64 {
    1e-3
}

impl TrainSettings {
    pub fn to_options(&self) -> TrainOptions {
        TrainOptions {
            max_evals: self.max_evals,
            convergence_tol: self.convergence_tol,
            restarts: self.restarts,
            seed: self.seed,
            fixed_variances_phase: self.fixed_variances_phase,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecognitionSettings {
    pub depth: usize,
    pub width: usize,
    #[serde(default = "default_window")]
    pub window: RecognitionWindow,
}

fn default_window() -> RecognitionWindow {
    RecognitionWindow::Lagged
}

impl Default for RecognitionSettings {
    fn default() -> Self {
        Self {
            depth: 1,
            width: 16,
            window: RecognitionWindow::Lagged,
        }
    }
}

impl RecognitionSettings {
    pub fn to_config(&self) -> RecognitionConfig {
        RecognitionConfig {
            depth: self.depth,
            width: self.width,
            window: self.window,
            init_scale: 0.1,
        }
    }
}

/// Full experiment description, serializable as the bench JSON config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetSpec>,
    pub models: Vec<ModelChoice>,
    pub model: ModelSettings,
    pub train: TrainSettings,
    #[serde(default)]
    pub recognition: RecognitionSettings,
}

impl ExperimentConfig {
    /// Stable digest of the canonical JSON encoding (FNV-1a, hex).
    pub fn digest(&self) -> Result<String> {
        let text = serde_json::to_string(self)?;
        let mut hash: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        Ok(format!("{hash:016x}"))
    }
}

/// One result cell of the experiment grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    /// Free-simulation RMSE in original units; absent when the cell failed.
    pub rmse: Option<f64>,
    /// Final training objective (bound or evidence) where applicable.
    pub final_bound: Option<f64>,
    pub wall_time_s: f64,
    pub config_digest: String,
    /// "ok" or the error message.
    pub status: String,
}

/// Write the report CSV.
pub fn write_report_csv<W: std::io::Write>(rows: &[ReportRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "dataset",
        "model",
        "rmse",
        "final_bound",
        "wall_time_s",
        "config_digest",
        "status",
    ])?;
    for r in rows {
        wtr.write_record([
            r.dataset.clone(),
            r.model.clone(),
            r.rmse.map(|v| format!("{v:.17e}")).unwrap_or_default(),
            r.final_bound
                .map(|v| format!("{v:.17e}"))
                .unwrap_or_default(),
            format!("{:.3}", r.wall_time_s),
            r.config_digest.clone(),
            r.status.clone(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Outcome of one trained cell before scoring.
struct CellOutput {
    steps: Vec<SimStep<f64>>,
    final_bound: Option<f64>,
    trace: Option<TrainTrace<f64>>,
    document: ModelDocument,
}

fn run_cell(
    choice: ModelChoice,
    config: &ExperimentConfig,
    train_raw: &SequenceDataset<f64>,
    train_n: &SequenceDataset<f64>,
    test_n: &SequenceDataset<f64>,
    stats: Normalization,
) -> Result<CellOutput> {
    let opts = config.train.to_options();
    match choice {
        ModelChoice::Revarb | ModelChoice::RevarbRecognition => {
            let model_config = config.model.to_config()?;
            let (state, trace, rec) = match choice {
                ModelChoice::Revarb => {
                    let (state, trace) = fit(&model_config, &train_n.u, &train_n.y, &opts)?;
                    (state, trace, None)
                }
                _ => {
                    let rec_cfg = config.recognition.to_config();
                    let (state, nets, trace) = fit_with_recognition(
                        &model_config,
                        &rec_cfg,
                        &train_n.u,
                        &train_n.y,
                        &opts,
                    )?;
                    (state, trace, Some((rec_cfg, nets)))
                }
            };
            let qz = recover_qz(&state, &train_n.u, &train_n.y)?;
            let sim = free_simulate(&state, &qz, &test_n.u, None)?;
            let final_bound = trace.final_bound();
            let document = ModelDocument::from_revarb(
                &state,
                stats,
                &train_raw.u,
                &train_raw.y,
                rec.as_ref().map(|(c, n)| (c, n.as_slice())),
            );
            Ok(CellOutput {
                steps: sim.steps,
                final_bound,
                trace: Some(trace),
                document,
            })
        }
        ModelChoice::Gpnarx => {
            let (model, trace) = fit_gpnarx(
                &train_n.u,
                &train_n.y,
                config.model.lag,
                config.model.input_lag,
                &opts,
            )?;
            let t0 = config.model.lag.max(config.model.input_lag);
            let seed: Vec<f64> = test_n.y.iter().take(t0).copied().collect();
            let sim = model.simulate(&test_n.u, &seed)?;
            let steps = sim
                .iter()
                .enumerate()
                .map(|(k, m)| SimStep {
                    index: t0 + k,
                    layer_moments: vec![*m],
                    output_mean: m.mean,
                    output_variance: m.variance,
                })
                .collect();
            let final_bound = trace.final_bound();
            let document = ModelDocument::from_gpnarx(&model, stats, &train_raw.u, &train_raw.y);
            Ok(CellOutput {
                steps,
                final_bound,
                trace: Some(trace),
                document,
            })
        }
    }
}

/// Train every requested model on every dataset, free-simulate the test
/// split, score RMSE in original units, and write report, trace, prediction
/// and model artifacts under `out_dir`.
///
/// Per-cell failures become report rows; they do not abort other cells.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<ReportRow>> {
    std::fs::create_dir_all(out_dir)?;
    let digest = config.digest()?;
    let mut rows = Vec::new();
    for ds_spec in &config.datasets {
        let prepared = ds_spec.materialize().and_then(|(train_raw, test_raw)| {
            let (train_n, test_n, stats) = normalize(&train_raw, &test_raw)?;
            Ok((train_raw, test_raw, train_n, test_n, stats))
        });
        let (train_raw, test_raw, train_n, test_n, stats) = match prepared {
            Ok(v) => v,
            Err(e) => {
                for choice in &config.models {
                    rows.push(ReportRow {
                        dataset: ds_spec.name().to_string(),
                        model: choice.label().to_string(),
                        rmse: None,
                        final_bound: None,
                        wall_time_s: 0.0,
                        config_digest: digest.clone(),
                        status: format!("dataset error: {e}"),
                    });
                }
                continue;
            }
        };
        for choice in &config.models {
            let started = Instant::now();
            let cell = run_cell(*choice, config, &train_raw, &train_n, &test_n, stats);
            let wall = started.elapsed().as_secs_f64();
            let stem = format!("{}_{}", ds_spec.name(), choice.label());
            match cell {
                Ok(out) => {
                    // de-normalize for scoring and artifacts
                    let t0 = out.steps.first().map(|s| s.index).unwrap_or(0);
                    let denorm_steps: Vec<SimStep<f64>> = out
                        .steps
                        .iter()
                        .map(|s| SimStep {
                            index: s.index,
                            layer_moments: s.layer_moments.clone(),
                            output_mean: stats.denormalize_output(s.output_mean),
                            output_variance: stats.denormalize_output_variance(s.output_variance),
                        })
                        .collect();
                    let truth: Vec<f64> = test_raw.y.iter().skip(t0).copied().collect();
                    let means: Vec<f64> = denorm_steps.iter().map(|s| s.output_mean).collect();
                    let score = rmse(&means, &truth)?;

                    let pred_path = out_dir.join(format!("{stem}_predictions.csv"));
                    let f = std::fs::File::create(&pred_path)?;
                    write_predictions_csv(f, &denorm_steps, Some(&truth))?;
                    if let Some(trace) = &out.trace {
                        let f = std::fs::File::create(out_dir.join(format!("{stem}_trace.csv")))?;
                        trace.write_csv(f)?;
                    }
                    out.document
                        .save(&out_dir.join(format!("{stem}_model.json")))?;

                    rows.push(ReportRow {
                        dataset: ds_spec.name().to_string(),
                        model: choice.label().to_string(),
                        rmse: Some(score),
                        final_bound: out.final_bound,
                        wall_time_s: wall,
                        config_digest: digest.clone(),
                        status: "ok".into(),
                    });
                }
                Err(e) => rows.push(ReportRow {
                    dataset: ds_spec.name().to_string(),
                    model: choice.label().to_string(),
                    rmse: None,
                    final_bound: None,
                    wall_time_s: wall,
                    config_digest: digest.clone(),
                    status: e.to_string(),
                }),
            }
        }
    }
    let f = std::fs::File::create(out_dir.join("report.csv"))?;
    write_report_csv(&rows, f)?;
    Ok(rows)
}
