//! Scenario files: GPUs on one bus, their requests and an arrival sequence.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::SloTarget;
use crate::coordinator::GpuRole;
use crate::engine::{PrefetchPolicy, TransferModel};
use crate::error::HarnessError;
use crate::profiles::{BusSpec, Profile};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyKnobs {
    pub prefetch: PrefetchPolicy,
    #[serde(default)]
    pub kv_offload: bool,
    #[serde(default)]
    pub writeback_counted: bool,
    /// Prefill and decode served by separate GPUs (roles other than mixed).
    #[serde(default)]
    pub phase_split: bool,
}

impl PolicyKnobs {
    pub fn transfer(&self) -> TransferModel {
        TransferModel {
            writeback_counted: self.writeback_counted,
        }
    }
}

/// A profile file path (relative to the scenario) or an inline profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileRef {
    Path(String),
    Inline(serde_json::Value),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuEntry {
    pub id: u32,
    pub profile: ProfileRef,
    #[serde(default = "mixed")]
    pub role: GpuRole,
}

fn mixed() -> GpuRole {
    GpuRole::Mixed
}

/// SLO in milliseconds, or `{"relative": r}` for `r` times the resident
/// latency of the phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SloSpec {
    Ms(f64),
    Relative { relative: f64 },
}

impl SloSpec {
    pub fn target(self) -> SloTarget {
        match self {
            SloSpec::Ms(ms) => SloTarget::Ms(ms),
            SloSpec::Relative { relative } => SloTarget::Relative(relative),
        }
    }

    fn value(self) -> f64 {
        match self {
            SloSpec::Ms(v) | SloSpec::Relative { relative: v } => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestEntry {
    pub id: String,
    pub gpu: u32,
    pub batch: u32,
    pub seq_len: u64,
    pub output_len: u64,
    pub ttft_slo: SloSpec,
    pub tpot_slo: SloSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Event {
    Arrive(String),
    Depart(String),
}

fn default_horizon() -> usize {
    40
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    pub bus: BusSpec,
    pub policy: PolicyKnobs,
    pub gpus: Vec<GpuEntry>,
    pub requests: Vec<RequestEntry>,
    /// Logical arrival order for `coordinate`; every request arrives in
    /// listing order when empty.
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default)]
    pub seed: u64,
    /// Iterations per steady-state stream in coordinator epochs.
    #[serde(default = "default_horizon")]
    pub horizon_iterations: usize,
}

impl Scenario {
    pub fn request(&self, id: &str) -> Option<&RequestEntry> {
        self.requests.iter().find(|r| r.id == id)
    }

    pub fn gpu(&self, id: u32) -> Option<&GpuEntry> {
        self.gpus.iter().find(|g| g.id == id)
    }

    /// The explicit events, or one arrival per request.
    pub fn effective_events(&self) -> Vec<Event> {
        if self.events.is_empty() {
            self.requests.iter().map(|r| Event::Arrive(r.id.clone())).collect()
        } else {
            self.events.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// A validated scenario with its profiles resolved, one per GPU entry.
#[derive(Clone, Debug)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub profiles: Vec<Arc<Profile>>,
}

impl LoadedScenario {
    pub fn profile(&self, gpu: u32) -> &Arc<Profile> {
        let k = self
            .scenario
            .gpus
            .iter()
            .position(|g| g.id == gpu)
            .expect("validated gpu id");
        &self.profiles[k]
    }

    pub fn role(&self, gpu: u32) -> GpuRole {
        self.scenario.gpu(gpu).expect("validated gpu id").role
    }
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Scenario(msg.into())
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario, HarnessError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_scenario(&read(path)?, &base)
}

/// Parses and validates `text`; profile paths resolve against `base_dir`.
pub fn parse_scenario(text: &str, base_dir: &Path) -> Result<LoadedScenario, HarnessError> {
    let scenario: Scenario = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    validate(&scenario)?;
    let mut profiles = Vec::with_capacity(scenario.gpus.len());
    for g in &scenario.gpus {
        let p = match &g.profile {
            ProfileRef::Path(rel) => {
                let path: PathBuf = base_dir.join(rel);
                Profile::from_json(&read(&path)?)?
            }
            ProfileRef::Inline(v) => Profile::from_value(v.clone())?,
        };
        profiles.push(Arc::new(p));
    }
    Ok(LoadedScenario { scenario, profiles })
}

fn validate(s: &Scenario) -> Result<(), HarnessError> {
    if s.version != SCENARIO_VERSION {
        return Err(bad(format!(
            "unsupported version {} (expected {SCENARIO_VERSION})",
            s.version
        )));
    }
    s.bus.validate()?;
    if s.gpus.is_empty() {
        return Err(bad("gpus must not be empty"));
    }
    let mut ids = BTreeSet::new();
    for g in &s.gpus {
        if !ids.insert(g.id) {
            return Err(bad(format!("duplicate gpu id {}", g.id)));
        }
        if !s.policy.phase_split && g.role != GpuRole::Mixed {
            return Err(bad(format!("gpu {} has role {:?} but phase_split is off", g.id, g.role)));
        }
    }
    let mut names = BTreeSet::new();
    for (k, r) in s.requests.iter().enumerate() {
        if !names.insert(r.id.as_str()) {
            return Err(bad(format!("duplicate request id {:?}", r.id)));
        }
        if !ids.contains(&r.gpu) {
            return Err(bad(format!("requests[{k}].gpu: unknown gpu {}", r.gpu)));
        }
        if r.batch == 0 || r.seq_len == 0 || r.output_len == 0 {
            return Err(bad(format!("requests[{k}]: batch, seq_len and output_len must be > 0")));
        }
        for (field, slo) in [("ttft_slo", r.ttft_slo), ("tpot_slo", r.tpot_slo)] {
            let v = slo.value();
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(format!("requests[{k}].{field}: must be > 0, got {v}")));
            }
        }
    }
    let mut arrived = BTreeSet::new();
    let mut departed = BTreeSet::new();
    for (k, e) in s.events.iter().enumerate() {
        let (id, ok) = match e {
            Event::Arrive(id) => (id, arrived.insert(id.as_str())),
            Event::Depart(id) => (id, arrived.contains(id.as_str()) && departed.insert(id.as_str())),
        };
        if !names.contains(id.as_str()) {
            return Err(bad(format!("events[{k}]: unknown request {id:?}")));
        }
        if !ok {
            return Err(bad(format!("events[{k}]: {e:?} out of order")));
        }
    }
    Ok(())
}
