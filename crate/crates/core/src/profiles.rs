//! Model, GPU and bus descriptors and per-layer latency tables.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::ProfileError;
use crate::Phase;

/// FLOPs for one token through one layer, per phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseFlops {
    pub prefill: f64,
    pub decode: f64,
}

impl PhaseFlops {
    pub fn get(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Prefill => self.prefill,
            Phase::Decode => self.decode,
        }
    }
}

/// A decoder-only model with `num_layers` identical layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub num_layers: u32,
    pub layer_weight_bytes: u64,
    pub kv_bytes_per_token_per_layer: u64,
    pub flops_per_token_per_layer: PhaseFlops,
    pub max_position_tokens: u64,
}

impl ModelSpec {
    pub fn total_weight_bytes(&self) -> u64 {
        u64::from(self.num_layers) * self.layer_weight_bytes
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.num_layers == 0 {
            return Err(invalid("model.num_layers", "must be at least 1"));
        }
        for (field, v) in [
            ("model.flops_per_token_per_layer.prefill", self.flops_per_token_per_layer.prefill),
            ("model.flops_per_token_per_layer.decode", self.flops_per_token_per_layer.decode),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSpec {
    pub mem_capacity_bytes: u64,
    pub peak_flops: f64,
    /// Activations and runtime reserve that never hold model state.
    pub workspace_bytes: u64,
}

impl GpuSpec {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.mem_capacity_bytes <= self.workspace_bytes {
            return Err(invalid(
                "gpu.mem_capacity_bytes",
                format!(
                    "{} must exceed workspace_bytes {}",
                    self.mem_capacity_bytes, self.workspace_bytes
                ),
            ));
        }
        if !(self.peak_flops.is_finite() && self.peak_flops > 0.0) {
            return Err(invalid("gpu.peak_flops", format!("must be > 0, got {}", self.peak_flops)));
        }
        Ok(())
    }
}

/// A host-to-device bus shared by `gpu_count` accelerators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSpec {
    pub bandwidth_bytes_per_s: f64,
    pub gpu_count: u32,
}

impl BusSpec {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if !(self.bandwidth_bytes_per_s.is_finite() && self.bandwidth_bytes_per_s > 0.0) {
            return Err(invalid(
                "bus.bandwidth_bytes_per_s",
                format!("must be > 0, got {}", self.bandwidth_bytes_per_s),
            ));
        }
        if self.gpu_count == 0 {
            return Err(invalid("bus.gpu_count", "must be at least 1"));
        }
        Ok(())
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ProfileError {
    ProfileError::InvalidSpec {
        field,
        reason: reason.into(),
    }
}

/// One measured grid point: per-layer compute time at `(batch, seq_len)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub batch: u32,
    pub seq_len: u64,
    pub layer_compute_ms: f64,
}

/// Compute-time table of one phase. Entries keep their document order so a
/// loaded file serializes back unchanged.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseTable {
    entries: Vec<TableEntry>,
    index: HashMap<(u32, u64), usize>,
}

impl PhaseTable {
    pub fn new(phase: Phase, entries: Vec<TableEntry>) -> Result<Self, ProfileError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let key = key_name(phase, e.batch, e.seq_len);
            if !(e.layer_compute_ms.is_finite() && e.layer_compute_ms > 0.0) {
                return Err(ProfileError::NonPositive {
                    key,
                    value: e.layer_compute_ms,
                });
            }
            if index.insert((e.batch, e.seq_len), i).is_some() {
                return Err(ProfileError::Duplicate { key });
            }
        }
        // Dominance order: a point with more batch and more tokens is never
        // faster. On a full grid this is exactly row- and column-monotonicity.
        for a in &entries {
            for b in &entries {
                let dominated = a.batch <= b.batch && a.seq_len <= b.seq_len;
                if dominated && b.layer_compute_ms < a.layer_compute_ms {
                    return Err(ProfileError::NonMonotone {
                        key: key_name(phase, b.batch, b.seq_len),
                        value: b.layer_compute_ms,
                        prior_key: key_name(phase, a.batch, a.seq_len),
                        prior: a.layer_compute_ms,
                    });
                }
            }
        }
        Ok(PhaseTable { entries, index })
    }

    pub fn entries(&self) -> &[TableEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, batch: u32, seq_len: u64) -> Option<f64> {
        self.index
            .get(&(batch, seq_len))
            .map(|&i| self.entries[i].layer_compute_ms)
    }

    pub fn max_batch(&self) -> Option<u32> {
        self.entries.iter().map(|e| e.batch).max()
    }

    pub fn max_seq_len(&self) -> Option<u64> {
        self.entries.iter().map(|e| e.seq_len).max()
    }
}

fn key_name(phase: Phase, batch: u32, seq_len: u64) -> String {
    format!("phases.{phase}[batch={batch},seq_len={seq_len}]")
}

/// Per-phase compute tables. Invariants are checked on construction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyProfile {
    pub prefill: PhaseTable,
    pub decode: PhaseTable,
}

impl LatencyProfile {
    pub fn table(&self, phase: Phase) -> &PhaseTable {
        match phase {
            Phase::Prefill => &self.prefill,
            Phase::Decode => &self.decode,
        }
    }
}

/// A profile file: the model, the GPU it was measured on, and the tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub model: ModelSpec,
    pub gpu: GpuSpec,
    pub latency: LatencyProfile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileDoc {
    model: ModelSpec,
    gpu: GpuSpec,
    phases: PhasesDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhasesDoc {
    decode: Vec<TableEntry>,
    prefill: Vec<TableEntry>,
}

impl Profile {
    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let doc: ProfileDoc =
            serde_json::from_str(text).map_err(|e| ProfileError::Schema(e.to_string()))?;
        Self::from_doc(doc)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ProfileError> {
        let doc: ProfileDoc =
            serde_json::from_value(value).map_err(|e| ProfileError::Schema(e.to_string()))?;
        Self::from_doc(doc)
    }

    fn from_doc(doc: ProfileDoc) -> Result<Self, ProfileError> {
        doc.model.validate()?;
        doc.gpu.validate()?;
        let latency = LatencyProfile {
            prefill: PhaseTable::new(Phase::Prefill, doc.phases.prefill)?,
            decode: PhaseTable::new(Phase::Decode, doc.phases.decode)?,
        };
        Ok(Profile {
            model: doc.model,
            gpu: doc.gpu,
            latency,
        })
    }

    pub fn to_value(&self) -> serde_json::Value {
        let doc = ProfileDoc {
            model: self.model.clone(),
            gpu: self.gpu.clone(),
            phases: PhasesDoc {
                decode: self.latency.decode.entries.clone(),
                prefill: self.latency.prefill.entries.clone(),
            },
        };
        serde_json::to_value(doc).expect("profile serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("profile serializes")
    }
}

/// Parses and validates a profile document.
pub fn load_profile(text: &str) -> Result<Profile, ProfileError> {
    Profile::from_json(text)
}

/// Per-layer compute time at `(batch, seq_len)`.
///
/// Off-grid queries round up: the answer is the fastest grid point that has at
/// least as much batch and at least as many tokens, which by the monotonicity
/// invariant is never below the true time.
pub fn lookup_compute_time(
    profile: &LatencyProfile,
    phase: Phase,
    batch: u32,
    seq_len: u64,
) -> Result<f64, ProfileError> {
    let table = profile.table(phase);
    if table.is_empty() {
        return Err(ProfileError::EmptyTable { phase });
    }
    if let Some(t) = table.get(batch, seq_len) {
        return Ok(t);
    }
    table
        .entries
        .iter()
        .filter(|e| e.batch >= batch && e.seq_len >= seq_len)
        .map(|e| e.layer_compute_ms)
        .min_by(f64::total_cmp)
        .ok_or(ProfileError::OutOfGrid {
            phase,
            batch,
            seq_len,
        })
}

/// Tokens processed per iteration: the whole prompt for prefill, one per
/// sequence for decode.
pub fn tokens_per_iteration(phase: Phase, batch: u32, seq_len: u64) -> u64 {
    match phase {
        Phase::Prefill => u64::from(batch) * seq_len,
        Phase::Decode => u64::from(batch),
    }
}

/// Per-layer time if the GPU ran at its peak FLOP rate.
pub fn estimate_compute_time_peak(
    model: &ModelSpec,
    gpu: &GpuSpec,
    phase: Phase,
    batch: u32,
    seq_len: u64,
) -> f64 {
    let tokens = tokens_per_iteration(phase, batch, seq_len) as f64;
    model.flops_per_token_per_layer.get(phase) * tokens * 1000.0 / gpu.peak_flops
}

/// Batch and sequence-length axes of a synthetic profile.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub batches: Vec<u32>,
    pub seq_lens: Vec<u64>,
}

/// Builds a profile whose measured times are the peak estimate divided by
/// `efficiency`, on the full `batches x seq_lens` grid for both phases.
pub fn synth_profile(
    model: &ModelSpec,
    gpu: &GpuSpec,
    efficiency: f64,
    grid: &Grid,
) -> Result<Profile, ProfileError> {
    if !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(ProfileError::Synthesis(format!(
            "efficiency must be in (0, 1], got {efficiency}"
        )));
    }
    if grid.batches.is_empty() || grid.seq_lens.is_empty() {
        return Err(ProfileError::Synthesis("grid must be non-empty".into()));
    }
    model.validate()?;
    gpu.validate()?;
    let table = |phase: Phase| {
        let mut entries = Vec::with_capacity(grid.batches.len() * grid.seq_lens.len());
        for &batch in &grid.batches {
            for &seq_len in &grid.seq_lens {
                let est = estimate_compute_time_peak(model, gpu, phase, batch, seq_len);
                entries.push(TableEntry {
                    batch,
                    seq_len,
                    layer_compute_ms: est / efficiency,
                });
            }
        }
        PhaseTable::new(phase, entries)
    };
    let latency = LatencyProfile {
        prefill: table(Phase::Prefill)?,
        decode: table(Phase::Decode)?,
    };
    Ok(Profile {
        model: model.clone(),
        gpu: gpu.clone(),
        latency,
    })
}
