//! Balancing skewed per-head KV-cache workloads across tensor-parallel GPUs.
//!
//! Per-head KV compression leaves every attention head with a different
//! number of retained entries, so a static even split of heads across GPUs
//! leaves some GPUs waiting on others at every layer. This crate
//!
//! * describes those workloads ([`profile`]),
//! * enumerates head replication schemes ([`enumerate`]),
//! * picks per-layer head placements that minimize the load spread
//!   ([`allocate`]),
//! * models decode latency ([`latency`]) and
//! * simulates the resulting busy rates and throughput ([`simulate`]).

pub mod allocate;
pub mod enumerate;
pub mod latency;
pub mod profile;
pub mod simulate;

pub use allocate::{
    brute_force_best, efficiency, optimize_plan, select_best, sha_plan, AllocationConfig, AllocationError,
    AllocationPlan, HeadCopy, LayerAssignment,
};
pub use enumerate::{count_schemes, enumerate_schemes, EnumerationConfig, EnumerationError, ReplicationScheme};
pub use latency::{
    calibrate, predict_comm, predict_compute, Calibration, LatencyError, LatencyModel, MeasurementSample,
};
pub use profile::{
    cosine_similarity, generate_profile, load_profile, save_profile, ModelProfile, ProfileError, SyntheticSpec,
    WeightDistribution,
};
pub use simulate::{
    compare, decompose, simulate, Comparison, ComparisonReport, LatencyDecomposition, SimulationConfig,
    SimulationError, SimulationReport, Strategy,
};
