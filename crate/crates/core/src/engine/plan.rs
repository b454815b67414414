use serde::{Deserialize, Serialize};

use crate::error::EngineError;
use crate::profiles::ModelSpec;

/// When the copy stream may start fetching an offloaded layer `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefetchPolicy {
    /// When compute reaches the first layer of `m`'s interval, i.e. the layer
    /// after the previous offloaded one. Never crosses an iteration boundary.
    IntervalStart,
    /// As soon as a buffer slot is free, including slots that free up during
    /// the previous iteration.
    Eager,
    /// When compute reaches layer `m - 1`; layer 0 waits for the last layer of
    /// the previous iteration.
    OneAhead,
}

impl PrefetchPolicy {
    pub fn default_buffer_slots(self) -> u32 {
        match self {
            PrefetchPolicy::IntervalStart => 1,
            PrefetchPolicy::Eager | PrefetchPolicy::OneAhead => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PrefetchPolicy::IntervalStart => "interval_start",
            PrefetchPolicy::Eager => "eager",
            PrefetchPolicy::OneAhead => "one_ahead",
        }
    }
}

/// Which share of each layer lives in host memory, and how it comes back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffloadPlan {
    pub per_layer_host_fraction: Vec<f64>,
    pub prefetch_policy: PrefetchPolicy,
    pub buffer_slots: u32,
    /// Offload the layer's KV cache along with its weights.
    pub kv_offload: bool,
}

impl OffloadPlan {
    /// Every layer resident.
    pub fn resident(num_layers: u32, policy: PrefetchPolicy, kv_offload: bool) -> Self {
        Self::uniform(num_layers, 0.0, policy, kv_offload)
    }

    pub fn uniform(num_layers: u32, fraction: f64, policy: PrefetchPolicy, kv_offload: bool) -> Self {
        OffloadPlan {
            per_layer_host_fraction: vec![fraction; num_layers as usize],
            prefetch_policy: policy,
            buffer_slots: policy.default_buffer_slots(),
            kv_offload,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.per_layer_host_fraction.len()
    }

    pub fn is_offloaded(&self, layer: usize) -> bool {
        self.per_layer_host_fraction[layer] > 0.0
    }

    /// 0-based indices of layers with any host-resident share.
    pub fn offloaded_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_layer_host_fraction
            .iter()
            .enumerate()
            .filter(|(_, &f)| f > 0.0)
            .map(|(j, _)| j)
    }

    pub fn offloaded_count(&self) -> usize {
        self.offloaded_layers().count()
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<(), EngineError> {
        if self.per_layer_host_fraction.len() != model.num_layers as usize {
            return Err(EngineError::InvalidPlan(format!(
                "plan covers {} layers but the model has {}",
                self.per_layer_host_fraction.len(),
                model.num_layers
            )));
        }
        if self.buffer_slots == 0 {
            return Err(EngineError::InvalidPlan("buffer_slots must be at least 1".into()));
        }
        for (j, &f) in self.per_layer_host_fraction.iter().enumerate() {
            if !(0.0..=1.0).contains(&f) {
                return Err(EngineError::InvalidPlan(format!(
                    "layer {j}: host fraction {f} outside [0, 1]"
                )));
            }
            let whole = f == 0.0 || f == 1.0;
            if !whole && self.prefetch_policy != PrefetchPolicy::OneAhead {
                return Err(EngineError::InvalidPlan(format!(
                    "layer {j}: fractional host share {f} needs the one_ahead policy"
                )));
            }
        }
        Ok(())
    }

    /// Bytes parked in host memory when `total_tokens` tokens are cached.
    pub fn host_bytes(&self, model: &ModelSpec, total_tokens: u64) -> u64 {
        let unit = layer_unit_bytes(model, self.kv_offload, total_tokens);
        self.per_layer_host_fraction
            .iter()
            .map(|&f| scale(f, unit))
            .sum()
    }
}

/// Bytes of one full offload unit: the weights, plus the layer's KV cache
/// when KV travels with them.
pub fn layer_unit_bytes(model: &ModelSpec, kv_offload: bool, total_tokens: u64) -> u64 {
    let kv = if kv_offload {
        model.kv_bytes_per_token_per_layer * total_tokens
    } else {
        0
    };
    model.layer_weight_bytes + kv
}

pub(crate) fn scale(fraction: f64, bytes: u64) -> u64 {
    if fraction == 0.0 {
        0
    } else if fraction == 1.0 {
        bytes
    } else {
        (fraction * bytes as f64).round() as u64
    }
}

/// Per-layer transfer size and whether device-to-host traffic shares the
/// host-to-device bandwidth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferModel {
    /// When false (default) writebacks ride the opposite direction of a
    /// full-duplex link and cost nothing on the modeled bus.
    pub writeback_counted: bool,
}

impl TransferModel {
    /// `host_fraction x (weights + kv_flag x kv_per_token x batch x current_seq)`.
    pub fn layer_transfer_bytes(
        &self,
        model: &ModelSpec,
        plan: &OffloadPlan,
        layer: usize,
        batch: u32,
        current_seq: u64,
    ) -> u64 {
        let tokens = u64::from(batch) * current_seq;
        scale(
            plan.per_layer_host_fraction[layer],
            layer_unit_bytes(model, plan.kv_offload, tokens),
        )
    }

    /// Bytes moved on the bus by one iteration: every offloaded layer once,
    /// twice if writebacks are counted.
    pub fn bytes_per_iteration(
        &self,
        model: &ModelSpec,
        plan: &OffloadPlan,
        batch: u32,
        current_seq: u64,
    ) -> u64 {
        let one_way: u64 = plan
            .offloaded_layers()
            .map(|j| self.layer_transfer_bytes(model, plan, j, batch, current_seq))
            .sum();
        if self.writeback_counted {
            2 * one_way
        } else {
            one_way
        }
    }
}
