//! Small reference worlds used by the tests, benches and bundled scenarios.

use crate::profiles::{
    synth_profile, BusSpec, GpuSpec, Grid, LatencyProfile, ModelSpec, PhaseFlops, PhaseTable,
    Profile, TableEntry,
};
use crate::Phase;

/// Batches and prompt lengths covered by the toy profiles.
pub const TOY_BATCHES: [u32; 5] = [1, 2, 4, 8, 16];
pub const TOY_SEQ_LENS: [u64; 3] = [64, 128, 256];

fn table(phase: Phase, f: impl Fn(u32, u64) -> f64) -> PhaseTable {
    let mut entries = Vec::new();
    for b in TOY_BATCHES {
        for s in TOY_SEQ_LENS {
            entries.push(TableEntry {
                batch: b,
                seq_len: s,
                layer_compute_ms: f(b, s),
            });
        }
    }
    PhaseTable::new(phase, entries).expect("fixture table is valid")
}

/// Eight 120 MB layers, 2 ms decode compute per layer, 24 GB/s bus: each
/// transfer takes 5 ms and a resident iteration 16 ms.
pub fn tp1() -> Profile {
    tp1_with(2.0, 120_000_000)
}

/// TP-1 shape with another per-layer decode time and layer size.
pub fn tp1_with(decode_ms: f64, layer_weight_bytes: u64) -> Profile {
    Profile {
        model: ModelSpec {
            num_layers: 8,
            layer_weight_bytes,
            kv_bytes_per_token_per_layer: 1_000,
            flops_per_token_per_layer: PhaseFlops {
                prefill: 2.5e8,
                decode: 2.5e8,
            },
            max_position_tokens: 2048,
        },
        gpu: GpuSpec {
            mem_capacity_bytes: 24_000_000_000,
            peak_flops: 1e12,
            workspace_bytes: 1_000_000_000,
        },
        latency: LatencyProfile {
            prefill: table(Phase::Prefill, |b, s| {
                decode_ms * (f64::from(b) * s as f64 / 512.0).max(1.0)
            }),
            decode: table(Phase::Decode, |_, _| decode_ms),
        },
    }
}

pub fn tp1_bus() -> BusSpec {
    BusSpec {
        bandwidth_bytes_per_s: 24e9,
        gpu_count: 2,
    }
}

/// Forty layers of a 13B model on a 24 GB card with a 24 GB/s link: 1.312 ms
/// decode compute and 18.128 ms transfer per layer.
pub fn fig2b() -> Profile {
    Profile {
        model: ModelSpec {
            num_layers: 40,
            layer_weight_bytes: 435_072_000,
            kv_bytes_per_token_per_layer: 10_240,
            flops_per_token_per_layer: PhaseFlops {
                prefill: 6.4e8,
                decode: 6.4e8,
            },
            max_position_tokens: 2048,
        },
        gpu: GpuSpec {
            mem_capacity_bytes: 24_000_000_000,
            peak_flops: 125e12,
            workspace_bytes: 2_000_000_000,
        },
        latency: LatencyProfile {
            prefill: table(Phase::Prefill, |b, s| {
                1.312 * (f64::from(b) * s as f64 / 64.0).max(1.0)
            }),
            decode: table(Phase::Decode, |_, _| 1.312),
        },
    }
}

pub fn fig2b_bus() -> BusSpec {
    BusSpec {
        bandwidth_bytes_per_s: 24e9,
        gpu_count: 1,
    }
}

/// TP-1 measured at half the peak-FLOPS estimate: the estimate says 1 ms per
/// decode layer at batch 8, the profile says 2 ms.
pub fn half_efficiency() -> Profile {
    let base = tp1();
    let model = ModelSpec {
        flops_per_token_per_layer: PhaseFlops {
            prefill: 1.25e8,
            decode: 1.25e8,
        },
        ..base.model
    };
    let grid = Grid {
        batches: vec![8],
        seq_lens: vec![64],
    };
    synth_profile(&model, &base.gpu, 0.5, &grid).expect("fixture synthesizes")
}

/// Twelve 120 MB layers on a 1.5 GB card: the weights alone do not fit, so
/// every run offloads. Decode compute grows with batch as `base + slope x b`.
pub fn oversized(base_ms: f64, slope_ms: f64) -> Profile {
    let batches = [1u32, 2, 4, 8, 16, 32];
    let table = |phase: Phase, f: &dyn Fn(u32, u64) -> f64| {
        let mut entries = Vec::new();
        for b in batches {
            for s in TOY_SEQ_LENS {
                entries.push(TableEntry {
                    batch: b,
                    seq_len: s,
                    layer_compute_ms: f(b, s),
                });
            }
        }
        PhaseTable::new(phase, entries).expect("fixture table is valid")
    };
    let decode = move |b: u32, _s: u64| base_ms + slope_ms * f64::from(b);
    Profile {
        model: ModelSpec {
            num_layers: 12,
            layer_weight_bytes: 120_000_000,
            kv_bytes_per_token_per_layer: 2_000,
            flops_per_token_per_layer: PhaseFlops {
                prefill: 5e8,
                decode: 5e8,
            },
            max_position_tokens: 2048,
        },
        gpu: GpuSpec {
            mem_capacity_bytes: 1_500_000_000,
            peak_flops: 2e12,
            workspace_bytes: 300_000_000,
        },
        latency: LatencyProfile {
            prefill: table(Phase::Prefill, &|b, s| {
                decode(b, s) * (f64::from(b) * s as f64 / 256.0).max(1.0)
            }),
            decode: table(Phase::Decode, &decode),
        },
    }
}
