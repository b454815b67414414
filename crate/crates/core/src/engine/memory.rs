use crate::engine::plan::{layer_unit_bytes, scale, OffloadPlan, TransferModel};
use crate::error::EngineError;
use crate::profiles::{GpuSpec, ModelSpec};

/// Average bus rate needed to move one iteration's bytes within one SLO
/// period, in bytes per second.
pub fn consumed_bandwidth(
    model: &ModelSpec,
    plan: &OffloadPlan,
    transfer: &TransferModel,
    slo_ms: f64,
    batch: u32,
    seq_len: u64,
) -> f64 {
    let bytes = transfer.bytes_per_iteration(model, plan, batch, seq_len);
    bytes as f64 * 1000.0 / slo_ms
}

/// GPU memory as `fixed + per_token x total_tokens`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub fixed_bytes: u64,
    pub per_token_bytes: u64,
}

impl Footprint {
    pub fn at(&self, total_tokens: u64) -> u64 {
        self.fixed_bytes + self.per_token_bytes * total_tokens
    }
}

/// Resident weights, `buffer_slots` full-layer staging buffers, workspace, and
/// the KV cache of every layer whose KV stays on the device.
pub fn footprint(model: &ModelSpec, gpu: &GpuSpec, plan: &OffloadPlan) -> Footprint {
    let w = model.layer_weight_bytes;
    let kv = model.kv_bytes_per_token_per_layer;
    let resident_weights: u64 = plan
        .per_layer_host_fraction
        .iter()
        .map(|&f| w - scale(f, w))
        .sum();
    let resident_kv_per_token: u64 = if plan.kv_offload {
        plan.per_layer_host_fraction
            .iter()
            .map(|&f| kv - scale(f, kv))
            .sum()
    } else {
        kv * plan.per_layer_host_fraction.len() as u64
    };
    let slots = u64::from(plan.buffer_slots);
    let buffer_kv_per_token = if plan.kv_offload { slots * kv } else { 0 };
    Footprint {
        fixed_bytes: resident_weights + slots * layer_unit_bytes(model, false, 0) + gpu.workspace_bytes,
        per_token_bytes: resident_kv_per_token + buffer_kv_per_token,
    }
}

/// Device bytes needed to serve `total_tokens` cached tokens under `plan`.
pub fn gpu_memory_usage(
    model: &ModelSpec,
    gpu: &GpuSpec,
    plan: &OffloadPlan,
    _batch: u32,
    total_tokens: u64,
) -> u64 {
    footprint(model, gpu, plan).at(total_tokens)
}

/// Largest token budget `batch x (seq + out)` that fits on the device.
pub fn max_length(
    model: &ModelSpec,
    gpu: &GpuSpec,
    plan: &OffloadPlan,
    batch: u32,
) -> Result<u64, EngineError> {
    let fp = footprint(model, gpu, plan);
    let cap = gpu.mem_capacity_bytes;
    if fp.fixed_bytes > cap {
        return Err(EngineError::DoesNotFit {
            needed: fp.fixed_bytes,
            capacity: cap,
        });
    }
    let limit = model.max_position_tokens * u64::from(batch);
    if fp.per_token_bytes == 0 {
        return Ok(limit);
    }
    Ok(((cap - fp.fixed_bytes) / fp.per_token_bytes).min(limit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::plan::PrefetchPolicy;
    use crate::profiles::PhaseFlops;

    fn big() -> (ModelSpec, GpuSpec) {
        (
            ModelSpec {
                num_layers: 40,
                layer_weight_bytes: 600_000_000,
                kv_bytes_per_token_per_layer: 100_000,
                flops_per_token_per_layer: PhaseFlops {
                    prefill: 1.0,
                    decode: 1.0,
                },
                max_position_tokens: 1_000_000,
            },
            GpuSpec {
                mem_capacity_bytes: 24_000_000_000,
                peak_flops: 1e12,
                workspace_bytes: 1_000_000_000,
            },
        )
    }

    fn every(n: usize, i: usize, policy: PrefetchPolicy) -> OffloadPlan {
        let mut p = OffloadPlan::resident(n as u32, policy, false);
        for j in (i - 1..n).step_by(i) {
            p.per_layer_host_fraction[j] = 1.0;
        }
        p
    }

    #[test]
    fn interval_two_max_length_is_2450() {
        let (m, g) = big();
        let plan = every(40, 2, PrefetchPolicy::Eager);
        assert_eq!(plan.buffer_slots, 2);
        assert_eq!(max_length(&m, &g, &plan, 1).unwrap(), 2450);
        let t = 2450;
        assert!(gpu_memory_usage(&m, &g, &plan, 1, t) <= g.mem_capacity_bytes);
        assert!(gpu_memory_usage(&m, &g, &plan, 1, t + 1) > g.mem_capacity_bytes);
    }

    #[test]
    fn resident_plan_closed_form() {
        let (m, g) = big();
        let plan = OffloadPlan::resident(40, PrefetchPolicy::IntervalStart, false);
        let w = m.layer_weight_bytes;
        assert_eq!(gpu_memory_usage(&m, &g, &plan, 1, 0), 40 * w + w + g.workspace_bytes);
    }

    #[test]
    fn tp1_interval_two_saves_two_layers_over_four() {
        let m = ModelSpec {
            num_layers: 8,
            layer_weight_bytes: 120_000_000,
            ..big().0
        };
        let g = big().1;
        let p2 = every(8, 2, PrefetchPolicy::IntervalStart);
        let p4 = every(8, 4, PrefetchPolicy::IntervalStart);
        let d = gpu_memory_usage(&m, &g, &p4, 8, 512) - gpu_memory_usage(&m, &g, &p2, 8, 512);
        assert_eq!(d, 240_000_000);
    }

    #[test]
    fn consumed_bandwidth_examples() {
        let m = ModelSpec {
            num_layers: 8,
            layer_weight_bytes: 120_000_000,
            ..big().0
        };
        let tm = TransferModel::default();
        let p3 = every(8, 3, PrefetchPolicy::IntervalStart);
        assert_eq!(consumed_bandwidth(&m, &p3, &tm, 20.0, 8, 64), 12e9);
        let p8 = every(8, 8, PrefetchPolicy::IntervalStart);
        assert_eq!(consumed_bandwidth(&m, &p8, &tm, 20.0, 8, 64), 6e9);
        let none = OffloadPlan::resident(8, PrefetchPolicy::IntervalStart, false);
        assert_eq!(consumed_bandwidth(&m, &none, &tm, 20.0, 8, 64), 0.0);
        let half = TransferModel {
            writeback_counted: true,
        };
        assert_eq!(consumed_bandwidth(&m, &p8, &half, 20.0, 8, 64), 12e9);
    }

    #[test]
    fn everything_offloaded_is_bounded_by_kv_only() {
        let (m, g) = big();
        let plan = every(40, 1, PrefetchPolicy::OneAhead);
        let t = max_length(&m, &g, &plan, 1).unwrap();
        let free = g.mem_capacity_bytes - 2 * m.layer_weight_bytes - g.workspace_bytes;
        assert_eq!(t, free / (40 * m.kv_bytes_per_token_per_layer));
    }

    #[test]
    fn oversized_model_errors() {
        let (m, mut g) = big();
        g.mem_capacity_bytes = 2_000_000_000;
        let plan = OffloadPlan::resident(40, PrefetchPolicy::Eager, false);
        assert!(max_length(&m, &g, &plan, 1).is_err());
    }
}
