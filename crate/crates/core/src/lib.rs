//! SLO-aware layer offloading for LLM inference, modeled without a GPU.
//!
//! A model with `L` identical decoder layers runs on a GPU that may park some
//! layers in host memory and copy them back ahead of use. Which layers move is
//! set by an offloading interval: for every `i` layers the last one lives on
//! the host. The crate covers the whole loop around that knob:
//!
//! - [`profiles`]: model, GPU and bus descriptors plus measured per-layer
//!   compute tables, with a peak-FLOPS estimator and a synthetic generator.
//! - [`engine`]: a deterministic compute/copy two-stream simulator with fluid
//!   bandwidth sharing between GPUs on one bus.
//! - [`interval`]: interval to plan conversion, capacity bounds and the closed
//!   form `floor(L / floor(slo / t_trans))`.
//! - [`analyzer`]: offline performance records mapping
//!   `(SLO, batch, seq_len)` to the smallest SLO-meeting interval.
//! - [`coordinator`]: per-bus admission that picks intervals maximizing host
//!   memory while the bus can sustain every SLO.
//! - [`baselines`]: all-layers one-ahead, static fractional and no-offload
//!   reference policies.
//! - [`harness`]: scenarios, reports and the `offload-sim` CLI drivers.
//!
//! Times are `f64` milliseconds, sizes are `u64` bytes and bandwidths are
//! `f64` bytes per second. Layers are 0-based in the API and 1-based in
//! exported traces.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod analyzer;
pub mod baselines;
pub mod coordinator;
pub mod engine;
pub mod error;
pub mod harness;
pub mod fixtures;
pub mod interval;
pub mod par;
pub mod profiles;


pub use engine::{
    simulate_bus, simulate_iteration, simulate_request, Bandwidth, Carry, Metrics, OffloadPlan,
    PrefetchPolicy, TransferModel,
};
pub use analyzer::{build_record, lookup_interval, PerformanceRecord, RecordEntry};
pub use interval::{closed_form_interval, max_feasible_interval, plan_from_interval, Interval};
pub use error::{AnalyzerError, CoordinatorError, EngineError, HarnessError, ProfileError};

pub use par::Execution;
pub use profiles::{BusSpec, GpuSpec, LatencyProfile, ModelSpec, Profile};

/// Inference phase: the whole prompt at once, or one token per iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::Prefill, Phase::Decode];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
