//! Tensor-parallel decode simulation.
//!
//! Every decode step runs the layers in order. Within a layer each GPU works
//! through the KV entries of the head copies it hosts, then all GPUs meet in
//! an allreduce, so the layer takes as long as its slowest GPU plus the
//! collective. The plan and the profile are static, so all steps are
//! identical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocate::{optimize_plan, sha_plan, AllocationConfig, AllocationError, AllocationPlan};
use crate::latency::{predict_comm, predict_compute, LatencyError, LatencyModel};
use crate::profile::ModelProfile;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("plan is for tp={plan} but config has tp={config}")]
    TpMismatch { plan: usize, config: usize },
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error("total latency is zero")]
    ZeroLatency,
    #[error("reports come from different runs: {0}")]
    Incomparable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub batch: u64,
    pub decode_steps: u64,
    pub tp: usize,
    /// Seconds added to a layer's sync for every extra head copy it carries.
    #[serde(default)]
    pub replica_overhead: f64,
}

impl SimulationConfig {
    pub fn new(batch: u64, decode_steps: u64, tp: usize) -> Self {
        Self {
            batch,
            decode_steps,
            tp,
            replica_overhead: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.batch == 0 || self.decode_steps == 0 || self.tp == 0 {
            return Err(SimulationError::Config(
                "batch, decode_steps and tp must be positive".into(),
            ));
        }
        if !(self.replica_overhead.is_finite() && self.replica_overhead >= 0.0) {
            return Err(SimulationError::Config(format!(
                "replica_overhead must be >= 0, got {}",
                self.replica_overhead
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationReport {
    pub batch: u64,
    pub decode_steps: u64,
    pub tp: usize,
    /// Sum over steps and layers of slowest-GPU compute plus sync.
    pub total_latency: f64,
    /// Active compute seconds per GPU.
    pub per_gpu_compute: Vec<f64>,
    pub per_gpu_busy_rate: Vec<f64>,
    pub mean_busy_rate: f64,
    /// Tokens per second.
    pub throughput: f64,
    pub comm_time: f64,
    /// Mean over GPUs of time spent waiting on the slowest GPU.
    pub idle_time: f64,
    /// KV-dependent compute time of the slowest GPU.
    pub cache_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyDecomposition {
    pub d_idle: f64,
    pub d_cache: f64,
    pub d_comm: f64,
    pub d_total: f64,
}

pub fn simulate(
    profile: &ModelProfile,
    plan: &AllocationPlan,
    model: &LatencyModel,
    cfg: &SimulationConfig,
) -> Result<SimulationReport, SimulationError> {
    cfg.validate()?;
    model.validate()?;
    if plan.tp != cfg.tp {
        return Err(SimulationError::TpMismatch {
            plan: plan.tp,
            config: cfg.tp,
        });
    }
    plan.validate(profile)?;

    let tp = cfg.tp;
    let batch = cfg.batch;
    let cache_slope = model.cache_slope(batch);
    let sync = predict_comm(model, tp, batch);

    // One decode step.
    let mut span = 0.0;
    let mut comm = 0.0;
    let mut idle = 0.0;
    let mut cache = 0.0;
    let mut per_gpu = vec![0.0; tp];
    for (assignment, weights) in plan.layers.iter().zip(&profile.weights) {
        let loads = assignment.group_loads(weights);
        let compute: Vec<f64> = loads.iter().map(|&c| predict_compute(model, batch, c)).collect();
        let slowest = compute.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let heaviest = loads.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        span += slowest;
        comm += sync + cfg.replica_overhead * (assignment.total_copies() - weights.len()) as f64;
        idle += compute.iter().map(|c| slowest - c).sum::<f64>() / tp as f64;
        cache += cache_slope * heaviest;
        for (acc, c) in per_gpu.iter_mut().zip(&compute) {
            *acc += c;
        }
    }

    let steps = cfg.decode_steps as f64;
    let total_latency = (span + comm) * steps;
    if total_latency.is_nan() || total_latency <= 0.0 {
        return Err(SimulationError::ZeroLatency);
    }
    let per_gpu_compute: Vec<f64> = per_gpu.iter().map(|c| c * steps).collect();
    let per_gpu_busy_rate: Vec<f64> = per_gpu_compute.iter().map(|c| c / total_latency).collect();
    let mean_busy_rate = per_gpu_busy_rate.iter().sum::<f64>() / tp as f64;
    Ok(SimulationReport {
        batch,
        decode_steps: cfg.decode_steps,
        tp,
        total_latency,
        per_gpu_compute,
        per_gpu_busy_rate,
        mean_busy_rate,
        throughput: batch as f64 * steps / total_latency,
        comm_time: comm * steps,
        idle_time: idle * steps,
        cache_time: cache * steps,
    })
}

/// Reduction in idle, cache-access and communication time from `baseline`
/// to `improved`. `d_total` is the sum of the three components.
pub fn decompose(
    baseline: &SimulationReport,
    improved: &SimulationReport,
) -> Result<LatencyDecomposition, SimulationError> {
    if baseline.batch != improved.batch || baseline.decode_steps != improved.decode_steps || baseline.tp != improved.tp
    {
        return Err(SimulationError::Incomparable(format!(
            "(batch, steps, tp) = ({}, {}, {}) vs ({}, {}, {})",
            baseline.batch, baseline.decode_steps, baseline.tp, improved.batch, improved.decode_steps, improved.tp
        )));
    }
    let d_idle = baseline.idle_time - improved.idle_time;
    let d_cache = baseline.cache_time - improved.cache_time;
    let d_comm = baseline.comm_time - improved.comm_time;
    Ok(LatencyDecomposition {
        d_idle,
        d_cache,
        d_comm,
        d_total: d_idle + d_cache + d_comm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Contiguous static head split.
    Sha,
    /// Workload-aware placement, no replication.
    NoDp,
    /// Workload-aware placement with head replication.
    Dp,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Self::Sha => "SHA",
            Self::NoDp => "NoDP",
            Self::Dp => "DP",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub ch_budget: usize,
    pub r_max: usize,
    pub layer_deltas: Vec<f64>,
    /// Whether every layer search ran to completion.
    pub exhaustive: bool,
    pub report: SimulationReport,
    /// Throughput relative to SHA.
    pub throughput_gain: f64,
    /// Reduction relative to SHA.
    pub decomposition: LatencyDecomposition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonReport {
    pub model_name: String,
    pub tp: usize,
    pub batch: u64,
    pub decode_steps: u64,
    pub latency_model: LatencyModel,
    /// Idle and cache components are defined by the latency model, not
    /// measured.
    pub components: String,
    pub rows: Vec<StrategyRow>,
}

impl ComparisonReport {
    pub fn row(&self, strategy: Strategy) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// `strategy,gpu,compute_seconds,busy_rate` rows for plotting.
    pub fn gpu_table(&self) -> String {
        let mut out = String::from("strategy,gpu,compute_seconds,busy_rate\n");
        for row in &self.rows {
            for (gpu, (c, b)) in row
                .report
                .per_gpu_compute
                .iter()
                .zip(&row.report.per_gpu_busy_rate)
                .enumerate()
            {
                out.push_str(&format!("{},{gpu},{c},{b}\n", row.strategy.label()));
            }
        }
        out
    }
}

/// All three plans (SHA, no replication, replication), in that order.
pub struct Comparison {
    pub report: ComparisonReport,
    pub plans: Vec<AllocationPlan>,
}

/// Simulates SHA, rearrangement without replication, and rearrangement with
/// `cfg`'s replication budget, and reports each against SHA.
pub fn compare(
    profile: &ModelProfile,
    tp: usize,
    cfg: &AllocationConfig,
    model: &LatencyModel,
    simcfg: &SimulationConfig,
) -> Result<Comparison, SimulationError> {
    if simcfg.tp != tp {
        return Err(SimulationError::TpMismatch {
            plan: tp,
            config: simcfg.tp,
        });
    }
    let no_dp_cfg = AllocationConfig {
        ch_budget: 0,
        r_max: 1,
        ..*cfg
    };
    let plans = vec![
        (Strategy::Sha, sha_plan(profile, tp)?),
        (Strategy::NoDp, optimize_plan(profile, tp, &no_dp_cfg)?),
        (Strategy::Dp, optimize_plan(profile, tp, cfg)?),
    ];
    let reports = plans
        .iter()
        .map(|(_, plan)| simulate(profile, plan, model, simcfg))
        .collect::<Result<Vec<_>, _>>()?;
    let baseline = &reports[0];
    let rows = plans
        .iter()
        .zip(&reports)
        .map(|((strategy, plan), report)| {
            Ok(StrategyRow {
                strategy: *strategy,
                ch_budget: plan.ch_budget,
                r_max: plan.r_max,
                layer_deltas: plan.deltas(),
                exhaustive: plan.layers.iter().all(|l| l.exhaustive),
                report: report.clone(),
                throughput_gain: report.throughput / baseline.throughput,
                decomposition: decompose(baseline, report)?,
            })
        })
        .collect::<Result<Vec<_>, SimulationError>>()?;
    Ok(Comparison {
        report: ComparisonReport {
            model_name: profile.model_name.clone(),
            tp,
            batch: simcfg.batch,
            decode_steps: simcfg.decode_steps,
            latency_model: *model,
            components: "d_idle and d_cache are model-defined: idle is mean slack behind the slowest GPU, \
                         cache is the slowest GPU's KV-dependent term"
                .into(),
            rows,
        },
        plans: plans.into_iter().map(|(_, p)| p).collect(),
    })
}
