//! Offloading intervals: plans, capacity bounds and the closed-form estimate.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::engine::{gpu_memory_usage, OffloadPlan, PrefetchPolicy};
use crate::error::EngineError;
use crate::profiles::{GpuSpec, ModelSpec};

/// For every `i` layers the last one lives in host memory; `NoOffload` keeps
/// everything resident and orders above every finite interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Interval {
    Every(u32),
    NoOffload,
}

impl Interval {
    /// Number of offloaded layers for an `L`-layer model.
    pub fn offloaded_layers(self, num_layers: u32) -> u32 {
        match self {
            Interval::Every(i) => num_layers / i,
            Interval::NoOffload => 0,
        }
    }

    pub fn value(self) -> Option<u32> {
        match self {
            Interval::Every(i) => Some(i),
            Interval::NoOffload => None,
        }
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Interval::Every(i) => write!(f, "{i}"),
            Interval::NoOffload => f.write_str("none"),
        }
    }
}

impl Serialize for Interval {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Interval::Every(i) => s.serialize_u32(*i),
            Interval::NoOffload => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for Interval {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("interval must be >= 1")),
            Raw::N(i) => Ok(Interval::Every(i)),
            Raw::S(s) if s == "none" => Ok(Interval::NoOffload),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "expected an interval >= 1 or \"none\", got {s:?}"
            ))),
        }
    }
}

/// Offloads layers `i, 2i, ..., floor(L/i) i` (1-based); a trailing partial
/// interval keeps all its layers resident.
pub fn plan_from_interval(
    model: &ModelSpec,
    i: Interval,
    policy: PrefetchPolicy,
    kv_offload: bool,
) -> OffloadPlan {
    let mut plan = OffloadPlan::resident(model.num_layers, policy, kv_offload);
    if let Interval::Every(i) = i {
        let i = i.clamp(1, model.num_layers.max(1)) as usize;
        for j in (i - 1..plan.num_layers()).step_by(i) {
            plan.per_layer_host_fraction[j] = 1.0;
        }
    }
    plan
}

fn fits(
    model: &ModelSpec,
    gpu: &GpuSpec,
    i: Interval,
    batch: u32,
    total_tokens: u64,
    policy: PrefetchPolicy,
    kv_offload: bool,
) -> bool {
    let plan = plan_from_interval(model, i, policy, kv_offload);
    gpu_memory_usage(model, gpu, &plan, batch, total_tokens) <= gpu.mem_capacity_bytes
}

/// Largest interval whose plan fits on the device, `NoOffload` if the whole
/// model fits, `None` if even interval 1 does not.
pub fn max_feasible_interval(
    model: &ModelSpec,
    gpu: &GpuSpec,
    batch: u32,
    total_tokens: u64,
    policy: PrefetchPolicy,
    kv_offload: bool,
) -> Option<Interval> {
    std::iter::once(Interval::NoOffload)
        .chain((1..=model.num_layers).rev().map(Interval::Every))
        .find(|&i| fits(model, gpu, i, batch, total_tokens, policy, kv_offload))
}

/// Inputs of the closed form. `delta` and `l_offload` are derived.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosedFormInputs {
    /// Compute time of a whole resident iteration.
    pub iter_compute_ms: f64,
    pub layer_transfer_ms: f64,
    pub slo_ms: f64,
    pub num_layers: u32,
}

impl ClosedFormInputs {
    /// SLO headroom over compute: `slo / iter_compute - 1`.
    pub fn delta(&self) -> f64 {
        self.slo_ms / self.iter_compute_ms - 1.0
    }

    /// Layers whose transfers fit in the SLO: `floor(slo / t_trans)`.
    pub fn l_offload(&self) -> u32 {
        (self.slo_ms / self.layer_transfer_ms).floor().max(0.0) as u32
    }
}

/// `floor(L / L_offload)` clamped to `[1, L]`; `None` when the SLO is below the
/// compute time or not a single transfer fits.
pub fn closed_form_interval(inputs: &ClosedFormInputs) -> Result<Option<Interval>, EngineError> {
    if inputs.layer_transfer_ms.is_nan() || inputs.layer_transfer_ms <= 0.0 {
        return Err(EngineError::InvalidPlan(format!(
            "layer transfer time must be > 0, got {}",
            inputs.layer_transfer_ms
        )));
    }
    if inputs.slo_ms < inputs.iter_compute_ms {
        return Ok(None);
    }
    let l_off = inputs.l_offload();
    if l_off == 0 {
        return Ok(None);
    }
    let l = inputs.num_layers.max(1);
    Ok(Some(Interval::Every((l / l_off).clamp(1, l))))
}
