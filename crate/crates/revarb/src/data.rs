//! Sequence datasets: CSV ingestion, synthetic benchmark generation and
//! train-split normalization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Single-input single-output sequence.
#[derive(Debug, Clone)]
pub struct SequenceDataset<T> {
    pub name: String,
    pub u: Array1<T>,
    pub y: Array1<T>,
}

impl<T: Scalar> SequenceDataset<T> {
    pub fn new(name: impl Into<String>, u: Array1<T>, y: Array1<T>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::Data(format!(
                "input/output lengths disagree: {} vs {}",
                u.len(),
                y.len()
            )));
        }
        if u.is_empty() {
            return Err(Error::Data("empty sequence".into()));
        }
        Ok(Self {
            name: name.into(),
            u,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Split into a leading and a trailing piece at `train_len`.
    pub fn split_at(&self, train_len: usize) -> Result<(Self, Self)> {
        if train_len == 0 || train_len >= self.len() {
            return Err(Error::Data(format!(
                "split point {train_len} outside sequence of length {}",
                self.len()
            )));
        }
        let train = SequenceDataset {
            name: format!("{}_train", self.name),
            u: self.u.slice(ndarray::s![..train_len]).to_owned(),
            y: self.y.slice(ndarray::s![..train_len]).to_owned(),
        };
        let test = SequenceDataset {
            name: format!("{}_test", self.name),
            u: self.u.slice(ndarray::s![train_len..]).to_owned(),
            y: self.y.slice(ndarray::s![train_len..]).to_owned(),
        };
        Ok((train, test))
    }
}

/// Parse a two-column `u,y` CSV. A single leading header row is tolerated;
/// any other unparsable row is an error carrying its 1-indexed line number.
pub fn read_csv<T: Scalar, R: Read>(reader: R, name: &str) -> Result<SequenceDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut u = Vec::new();
    let mut y = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let line = k + 1;
        let record = record?;
        let fields: Vec<&str> = record.iter().map(|f| f.trim()).collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected 2 columns, found {}", fields.len()),
            });
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            fields.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(vals) => {
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Parse {
                        line,
                        message: "non-finite value".into(),
                    });
                }
                u.push(T::cast(vals[0]));
                y.push(T::cast(vals[1]));
            }
            Err(e) => {
                if line == 1 && u.is_empty() {
                    continue; // header row
                }
                return Err(Error::Parse {
                    line,
                    message: e.to_string(),
                });
            }
        }
    }
    SequenceDataset::new(name, Array1::from_vec(u), Array1::from_vec(y))
}

/// Load a dataset from a CSV file.
pub fn load_csv<T: Scalar>(path: &Path) -> Result<SequenceDataset<T>> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), &name)
}

/// Write a dataset as a headered `u,y` CSV.
pub fn write_csv<T: Scalar, W: Write>(dataset: &SequenceDataset<T>, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["u", "y"])?;
    for (u, y) in dataset.u.iter().zip(dataset.y.iter()) {
        wtr.write_record([
            format!("{:.17e}", u.to_f64_lossy()),
            format!("{:.17e}", y.to_f64_lossy()),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Configurable nonlinear autoregressive benchmark system.
///
/// The default recurrence is
/// `y_t = y_{t-1}·y_{t-2}·(y_{t-1}+2.5)/(1+y_{t-1}²+y_{t-2}²) + u_{t-1} + ε`
/// driven by a seeded piecewise-constant input in `[-2, 2]`, with Gaussian
/// observation noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub noise_std: f64,
    pub input_low: f64,
    pub input_high: f64,
    /// Input level hold time is drawn uniformly from this range of steps.
    pub hold_min: usize,
    pub hold_max: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            noise_std: 0.2,
            input_low: -2.0,
            input_high: 2.0,
            hold_min: 5,
            hold_max: 15,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) {
            return Err(Error::Invalid("noise_std must be nonnegative".into()));
        }
        if !(self.input_low < self.input_high) {
            return Err(Error::Invalid("input range must be nonempty".into()));
        }
        if self.hold_min == 0 || self.hold_max < self.hold_min {
            return Err(Error::Invalid("hold range must satisfy 1 <= min <= max".into()));
        }
        Ok(())
    }
}

fn default_system(y1: f64, y2: f64, u_prev: f64) -> f64 {
    y1 * y2 * (y1 + 2.5) / (1.0 + y1 * y1 + y2 * y2) + u_prev
}

/// Generate one continuous trajectory and split it into train and test
/// halves of the requested lengths.
pub fn generate_synthetic<T: Scalar>(
    spec: &SyntheticSpec,
    seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<(SequenceDataset<T>, SequenceDataset<T>)> {
    spec.validate()?;
    if n_train < 3 || n_test < 1 {
        return Err(Error::Invalid(
            "need n_train >= 3 and n_test >= 1 samples".into(),
        ));
    }
    let total = n_train + n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // piecewise-constant input signal
    let mut u = Vec::with_capacity(total);
    while u.len() < total {
        let level = rng.gen_range(spec.input_low..spec.input_high);
        let hold = rng.gen_range(spec.hold_min..=spec.hold_max);
        for _ in 0..hold {
            if u.len() == total {
                break;
            }
            u.push(level);
        }
    }

    let mut y = vec![0.0f64; total];
    for t in 2..total {
        let noise = if spec.noise_std > 0.0 {
            spec.noise_std * f64::standard_normal(&mut rng)
        } else {
            0.0
        };
        y[t] = default_system(y[t - 1], y[t - 2], u[t - 1]) + noise;
        if y[t].abs() > 1e6 {
            return Err(Error::Data(format!("trajectory diverged at step {t}")));
        }
    }

    let full = SequenceDataset::new(
        "synthetic",
        Array1::from_iter(u.into_iter().map(T::cast)),
        Array1::from_iter(y.into_iter().map(T::cast)),
    )?;
    let (mut train, mut test) = full.split_at(n_train)?;
    train.name = "synthetic_train".into();
    test.name = "synthetic_test".into();
    Ok((train, test))
}

/// Per-channel mean/std computed on the training split only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub u_mean: f64,
    pub u_std: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

fn channel_stats<T: Scalar>(xs: &Array1<T>, channel: &str) -> Result<(f64, f64)> {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
    let var = xs
        .iter()
        .map(|v| {
            let d = v.to_f64_lossy() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::Data(format!("channel {channel} has zero variance")));
    }
    Ok((mean, std))
}

impl Normalization {
    /// Fit statistics on a training split.
    pub fn fit<T: Scalar>(train: &SequenceDataset<T>) -> Result<Self> {
        let (u_mean, u_std) = channel_stats(&train.u, "u")?;
        let (y_mean, y_std) = channel_stats(&train.y, "y")?;
        Ok(Self {
            u_mean,
            u_std,
            y_mean,
            y_std,
        })
    }

    pub fn apply<T: Scalar>(&self, ds: &SequenceDataset<T>) -> SequenceDataset<T> {
        SequenceDataset {
            name: ds.name.clone(),
            u: ds
                .u
                .mapv(|v| (v - T::cast(self.u_mean)) / T::cast(self.u_std)),
            y: ds
                .y
                .mapv(|v| (v - T::cast(self.y_mean)) / T::cast(self.y_std)),
        }
    }

    pub fn denormalize_output<T: Scalar>(&self, y: T) -> T {
        y * T::cast(self.y_std) + T::cast(self.y_mean)
    }

    pub fn denormalize_output_variance<T: Scalar>(&self, var: T) -> T {
        var * T::cast(self.y_std * self.y_std)
    }
}

/// Normalize train and test with statistics from the training split only.
pub fn normalize<T: Scalar>(
    train: &SequenceDataset<T>,
    test: &SequenceDataset<T>,
) -> Result<(SequenceDataset<T>, SequenceDataset<T>, Normalization)> {
    let stats = Normalization::fit(train)?;
    Ok((stats.apply(train), stats.apply(test), stats))
}
