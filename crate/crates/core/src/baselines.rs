//! Reference policies: every layer offloaded with one-ahead prefetch, a static
//! fractional portion chosen from peak-FLOPS estimates, and no offloading.

use serde::{Deserialize, Serialize};

use crate::analyzer::meets;
use crate::engine::{gpu_memory_usage, layer_unit_bytes, OffloadPlan, PrefetchPolicy};
use crate::error::EngineError;
use crate::profiles::{estimate_compute_time_peak, BusSpec, GpuSpec, ModelSpec};
use crate::Phase;

pub const FLEXGEN_GRID_STEP: f64 = 0.05;

/// Every layer on the host, one layer of lookahead, two staging buffers.
pub fn deepspeed_plan(model: &ModelSpec, kv_offload: bool) -> OffloadPlan {
    OffloadPlan::uniform(model.num_layers, 1.0, PrefetchPolicy::OneAhead, kv_offload)
}

/// All layers resident, or `None` when that does not fit.
pub fn naive_plan(model: &ModelSpec, gpu: &GpuSpec, batch: u32, total_tokens: u64) -> Option<OffloadPlan> {
    let plan = OffloadPlan::resident(model.num_layers, PrefetchPolicy::IntervalStart, false);
    (gpu_memory_usage(model, gpu, &plan, batch, total_tokens) <= gpu.mem_capacity_bytes).then_some(plan)
}

/// An SLO either in milliseconds or as a multiple of a no-offload latency.
///
/// A relative target is resolved by whoever consumes it against the latency
/// it believes in: the static policy uses its own estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SloTarget {
    Ms(f64),
    Relative(f64),
}

impl SloTarget {
    pub fn resolve(self, no_offload_ms: f64) -> f64 {
        match self {
            SloTarget::Ms(ms) => ms,
            SloTarget::Relative(r) => r * no_offload_ms,
        }
    }
}

/// Inputs of the static portion search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlexgenQuery {
    pub phase: Phase,
    pub batch: u32,
    pub seq_len: u64,
    /// Tokens the KV cache must hold, for the capacity check.
    pub total_tokens: u64,
    pub slo: SloTarget,
    /// GPUs assumed to split the bus evenly.
    pub n_sharing: u32,
    pub grid_step: f64,
    pub kv_offload: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlexgenDecision {
    pub portion: f64,
    pub assumed_bandwidth_bytes_per_s: f64,
    pub estimated_layer_compute_ms: f64,
    pub estimated_latency_ms: f64,
    pub slo_ms: f64,
}

/// Largest grid portion whose estimated one-ahead latency
/// `L x max(est_compute, p x unit / (bw / n))` meets the SLO, raised to the
/// smallest portion that fits in memory if that is larger.
pub fn flexgen_plan(
    model: &ModelSpec,
    gpu: &GpuSpec,
    bus: &BusSpec,
    q: &FlexgenQuery,
) -> Result<(OffloadPlan, FlexgenDecision), EngineError> {
    if !(q.grid_step > 0.0 && q.grid_step <= 1.0) {
        return Err(EngineError::InvalidPlan(format!(
            "portion grid step must be in (0, 1], got {}",
            q.grid_step
        )));
    }
    let n = q.n_sharing.max(1);
    let assumed = bus.bandwidth_bytes_per_s / f64::from(n);
    let est_c = estimate_compute_time_peak(model, gpu, q.phase, q.batch, q.seq_len);
    let l = f64::from(model.num_layers);
    let slo_ms = q.slo.resolve(l * est_c);
    let unit = layer_unit_bytes(model, q.kv_offload, u64::from(q.batch) * q.seq_len) as f64;
    let estimate = |p: f64| l * est_c.max(p * unit * 1000.0 / assumed);

    let steps = (1.0 / q.grid_step).ceil() as u32;
    let grid: Vec<f64> = (0..=steps).map(|k| (f64::from(k) * q.grid_step).min(1.0)).collect();
    let plan_at = |p: f64| OffloadPlan::uniform(model.num_layers, p, PrefetchPolicy::OneAhead, q.kv_offload);

    let p_slo = grid
        .iter()
        .copied()
        .filter(|&p| meets(estimate(p), slo_ms))
        .fold(0.0, f64::max);
    let fits = |p: f64| gpu_memory_usage(model, gpu, &plan_at(p), q.batch, q.total_tokens) <= gpu.mem_capacity_bytes;
    let Some(p_mem) = grid.iter().copied().find(|&p| fits(p)) else {
        let plan = plan_at(1.0);
        return Err(EngineError::DoesNotFit {
            needed: gpu_memory_usage(model, gpu, &plan, q.batch, q.total_tokens),
            capacity: gpu.mem_capacity_bytes,
        });
    };
    let portion = p_slo.max(p_mem);
    Ok((
        plan_at(portion),
        FlexgenDecision {
            portion,
            assumed_bandwidth_bytes_per_s: assumed,
            estimated_layer_compute_ms: est_c,
            estimated_latency_ms: estimate(portion),
            slo_ms,
        },
    ))
}
