//! Two-stream iteration simulator, memory accounting and metrics.

mod bandwidth;
mod memory;
mod metrics;
mod plan;
mod sim;
mod trace;

pub use bandwidth::{Bandwidth, Constant, Piecewise};
pub use memory::{consumed_bandwidth, footprint, gpu_memory_usage, max_length, Footprint};
pub use metrics::{IterationSample, Metrics, STEADY_WINDOW};
pub use plan::{layer_unit_bytes, OffloadPlan, PrefetchPolicy, TransferModel};
pub use sim::{
    simulate_bus, simulate_iteration, simulate_request, simulate_request_traced, BusJob,
    BusOutcome, Carry, Instance, JobMode, PlanSwitch, RequestShape, UtilSample,
};
pub(crate) use sim::probe_latency;
pub use trace::{EventKind, IterationTrace, Stream, TraceEvent};
