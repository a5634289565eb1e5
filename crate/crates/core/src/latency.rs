//! Memory-bound decode latency model.
//!
//! Per-layer decode time on one GPU is modeled as
//! `c0 + c1*B + c2*C + c3*B*C` for batch size `B` and resident KV entries
//! `C`: linear in either variable at a fixed value of the other, with the
//! slope in `B` growing with `C` when `c3 > 0`. The per-layer allreduce that
//! follows is costed as a ring.

use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficients that fit to within this magnitude of zero are snapped to zero.
pub const CLAMP_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed latency model: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("malformed samples: {0}")]
    Csv(#[from] csv::Error),
    #[error("coefficient {name} must be finite and >= 0, got {value}")]
    InvalidCoefficient { name: &'static str, value: f64 },
    #[error("need at least 4 samples, got {0}")]
    TooFewSamples(usize),
    #[error("samples must span at least 2 distinct batch sizes and 2 distinct KV loads")]
    InsufficientSpread,
    #[error("sample {index}: {reason}")]
    InvalidSample { index: usize, reason: String },
    #[error("design matrix is rank deficient (rank {rank} < 4)")]
    RankDeficient { rank: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    /// Seconds.
    pub c0: f64,
    /// Seconds per batch unit.
    pub c1: f64,
    /// Seconds per KV entry.
    pub c2: f64,
    /// Seconds per batch unit per KV entry.
    pub c3: f64,
    /// Seconds per collective.
    pub comm_alpha: f64,
    /// Seconds per byte.
    pub comm_beta: f64,
    /// Bytes reduced per batch element.
    pub bytes_per_activation: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            c0: 0.0,
            c1: 0.0,
            c2: 0.0,
            c3: 0.0,
            comm_alpha: 0.0,
            comm_beta: 0.0,
            bytes_per_activation: 1.0,
        }
    }
}

impl LatencyModel {
    pub fn compute(c0: f64, c1: f64, c2: f64, c3: f64) -> Self {
        Self {
            c0,
            c1,
            c2,
            c3,
            ..Self::default()
        }
    }

    pub fn with_comm(mut self, comm_alpha: f64, comm_beta: f64, bytes_per_activation: f64) -> Self {
        self.comm_alpha = comm_alpha;
        self.comm_beta = comm_beta;
        self.bytes_per_activation = bytes_per_activation;
        self
    }

    pub fn validate(&self) -> Result<(), LatencyError> {
        let fields = [
            ("c0", self.c0),
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("comm_alpha", self.comm_alpha),
            ("comm_beta", self.comm_beta),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LatencyError::InvalidCoefficient { name, value });
            }
        }
        if !(self.bytes_per_activation.is_finite() && self.bytes_per_activation > 0.0) {
            return Err(LatencyError::InvalidCoefficient {
                name: "bytes_per_activation",
                value: self.bytes_per_activation,
            });
        }
        Ok(())
    }

    /// Seconds of KV-dependent work per KV entry at batch `batch`.
    pub fn cache_slope(&self, batch: u64) -> f64 {
        self.c2 + self.c3 * batch as f64
    }

    /// Slope of latency in batch size at KV load `kv_load`.
    pub fn batch_slope(&self, kv_load: f64) -> f64 {
        self.c1 + self.c3 * kv_load
    }

    pub fn from_json(text: &str) -> Result<Self, LatencyError> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("model serializes");
        text.push('\n');
        text
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LatencyModel, LatencyError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| LatencyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    LatencyModel::from_json(&text)
}

/// Compute time of one layer on one GPU.
pub fn predict_compute(model: &LatencyModel, batch: u64, kv_load: f64) -> f64 {
    let b = batch as f64;
    model.c0 + model.c1 * b + model.c2 * kv_load + model.c3 * b * kv_load
}

/// Ring allreduce of `batch * bytes_per_activation` bytes over `tp` GPUs.
pub fn predict_comm(model: &LatencyModel, tp: usize, batch: u64) -> f64 {
    if tp <= 1 {
        return 0.0;
    }
    let p = tp as f64;
    let bytes = batch as f64 * model.bytes_per_activation;
    2.0 * (p - 1.0) / p * bytes * model.comm_beta + model.comm_alpha
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSample {
    pub batch: u64,
    pub kv_load: f64,
    /// Seconds.
    pub latency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    /// Fitted compute coefficients; communication terms are left at their
    /// defaults.
    pub model: LatencyModel,
    pub residual_rms: f64,
}

/// Least-squares fit of `(c0, c1, c2, c3)` on features `(1, B, C, B*C)`.
pub fn calibrate(samples: &[MeasurementSample]) -> Result<Calibration, LatencyError> {
    if samples.len() < 4 {
        return Err(LatencyError::TooFewSamples(samples.len()));
    }
    for (index, s) in samples.iter().enumerate() {
        if s.batch == 0 {
            return Err(LatencyError::InvalidSample {
                index,
                reason: "batch must be >= 1".into(),
            });
        }
        if !(s.kv_load.is_finite() && s.kv_load >= 0.0) {
            return Err(LatencyError::InvalidSample {
                index,
                reason: format!("kv_load {} must be >= 0", s.kv_load),
            });
        }
        if !(s.latency.is_finite() && s.latency > 0.0) {
            return Err(LatencyError::InvalidSample {
                index,
                reason: format!("latency {} must be > 0", s.latency),
            });
        }
    }
    let distinct = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    if distinct(samples.iter().map(|s| s.batch as f64).collect()) < 2
        || distinct(samples.iter().map(|s| s.kv_load).collect()) < 2
    {
        return Err(LatencyError::InsufficientSpread);
    }

    let rows = samples.len();
    let design = DMatrix::from_fn(rows, 4, |i, j| {
        let b = samples[i].batch as f64;
        let c = samples[i].kv_load;
        match j {
            0 => 1.0,
            1 => b,
            2 => c,
            _ => b * c,
        }
    });
    let target = DVector::from_iterator(rows, samples.iter().map(|s| s.latency));

    // Scale columns to unit norm so the rank test is not fooled by units.
    let norms: Vec<f64> = (0..4).map(|j| design.column(j).norm()).collect();
    let mut scaled = design.clone();
    for (j, &n) in norms.iter().enumerate() {
        if n > 0.0 {
            scaled.column_mut(j).scale_mut(1.0 / n);
        }
    }
    let svd = scaled.svd(true, true);
    let tol = 1e-10 * svd.singular_values.max();
    let rank = svd.rank(tol);
    if rank < 4 {
        return Err(LatencyError::RankDeficient { rank });
    }
    let solved = svd
        .solve(&target, tol)
        .map_err(|_| LatencyError::RankDeficient { rank })?;
    let mut coef = [0.0; 4];
    for j in 0..4 {
        coef[j] = solved[j] / norms[j];
        if coef[j].abs() < CLAMP_EPS {
            coef[j] = 0.0;
        }
    }

    let residuals = &target - &design * DVector::from_column_slice(&coef);
    let residual_rms = (residuals.norm_squared() / rows as f64).sqrt();
    let model = LatencyModel::compute(coef[0], coef[1], coef[2], coef[3]);
    model.validate()?;
    Ok(Calibration { model, residual_rms })
}

/// Reads samples from delimited text with header `batch,kv_load,latency`.
pub fn read_samples<R: Read>(reader: R) -> Result<Vec<MeasurementSample>, LatencyError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["batch", "kv_load", "latency"] {
        return Err(LatencyError::InvalidSample {
            index: 0,
            reason: format!(
                "expected header `batch,kv_load,latency`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    rdr.deserialize().map(|r| r.map_err(LatencyError::from)).collect()
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<MeasurementSample>, LatencyError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| LatencyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_samples(file)
}
