//! Offline performance records: the smallest SLO-meeting interval per
//! `(phase, SLO bucket, batch, seq_len)`, measured by simulation on an
//! uncontended bus.

mod record_io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{
    Constant, Instance, Metrics, OffloadPlan, PrefetchPolicy, RequestShape, TransferModel,
};
use crate::error::AnalyzerError;
use crate::interval::{plan_from_interval, Interval};
use crate::par::{self, Execution};
use crate::profiles::{lookup_compute_time, BusSpec, Profile};
use crate::Phase;

pub use record_io::{record_from_json, record_to_json};

/// SLO granularity of a record.
pub const SLO_BUCKET_MS: u32 = 2;

/// Smallest SLO-meeting interval, or an explicit refusal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RecordEntry {
    Interval(u32),
    /// Only the resident plan meets the SLO.
    NoOffload,
    Infeasible,
}

impl RecordEntry {
    pub fn interval(self) -> Option<Interval> {
        match self {
            RecordEntry::Interval(i) => Some(Interval::Every(i)),
            RecordEntry::NoOffload => Some(Interval::NoOffload),
            RecordEntry::Infeasible => None,
        }
    }
}

impl fmt::Display for RecordEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordEntry::Interval(i) => write!(f, "{i}"),
            RecordEntry::NoOffload => f.write_str("none"),
            RecordEntry::Infeasible => f.write_str("infeasible"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub phase: Phase,
    pub slo_ms: u32,
    pub batch: u32,
    pub seq_len: u64,
}

/// Axes of a record.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordGrid {
    pub slo_ms: Vec<u32>,
    pub batch: Vec<u32>,
    pub seq_len: Vec<u64>,
}

impl RecordGrid {
    pub fn validate(&self) -> Result<(), AnalyzerError> {
        if self.slo_ms.is_empty() || self.batch.is_empty() || self.seq_len.is_empty() {
            return Err(AnalyzerError::Grid("every axis needs at least one value".into()));
        }
        if let Some(s) = self.slo_ms.iter().find(|&&s| s == 0 || s % SLO_BUCKET_MS != 0) {
            return Err(AnalyzerError::Grid(format!(
                "SLO {s} ms is not a positive multiple of {SLO_BUCKET_MS} ms"
            )));
        }
        if let Some(b) = self.batch.iter().find(|b| !b.is_power_of_two()) {
            return Err(AnalyzerError::Grid(format!("batch {b} is not a power of two")));
        }
        if let Some(s) = self.seq_len.iter().find(|s| !s.is_power_of_two()) {
            return Err(AnalyzerError::Grid(format!("seq_len {s} is not a power of two")));
        }
        Ok(())
    }

    fn normalized(mut self) -> Self {
        self.slo_ms.sort_unstable();
        self.slo_ms.dedup();
        self.batch.sort_unstable();
        self.batch.dedup();
        self.seq_len.sort_unstable();
        self.seq_len.dedup();
        self
    }

    fn keys(&self, phases: &[Phase]) -> Vec<RecordKey> {
        let mut keys = Vec::new();
        for &phase in phases {
            for &slo_ms in &self.slo_ms {
                for &batch in &self.batch {
                    for &seq_len in &self.seq_len {
                        keys.push(RecordKey {
                            phase,
                            slo_ms,
                            batch,
                            seq_len,
                        });
                    }
                }
            }
        }
        keys
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub model: String,
    pub gpu: String,
    pub policy: PrefetchPolicy,
    pub kv_offload: bool,
    pub grid: RecordGrid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerformanceRecord {
    pub meta: RecordMeta,
    pub entries: BTreeMap<RecordKey, RecordEntry>,
}

impl PerformanceRecord {
    /// A record with no keys; every lookup is infeasible.
    pub fn empty(policy: PrefetchPolicy, kv_offload: bool) -> Self {
        PerformanceRecord {
            meta: RecordMeta {
                model: String::new(),
                gpu: String::new(),
                policy,
                kv_offload,
                grid: RecordGrid {
                    slo_ms: Vec::new(),
                    batch: Vec::new(),
                    seq_len: Vec::new(),
                },
            },
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, key: &RecordKey) -> Option<RecordEntry> {
        self.entries.get(key).copied()
    }

    pub fn phases(&self) -> BTreeSet<Phase> {
        self.entries.keys().map(|k| k.phase).collect()
    }
}

/// Knobs of a record build.
#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub model_id: String,
    pub gpu_id: String,
    pub transfer: TransferModel,
    /// Decode steps simulated per probe; steady TPOT averages the tail.
    pub probe_output_len: u64,
    /// After a row reaches interval 1, fill its longer prompts with 1 without
    /// simulating. Only sound when compute growth never outpaces the SLO, as
    /// with SLOs set relative to the resident latency at each key.
    pub prune: bool,
    pub exec: Execution,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            model_id: "model".into(),
            gpu_id: "gpu".into(),
            transfer: TransferModel::default(),
            probe_output_len: 40,
            prune: false,
            exec: Execution::default(),
        }
    }
}

/// Latency of `phase` under `plan` on an otherwise idle bus: TTFT for
/// prefill, steady TPOT for decode. Capacity is not checked here; it bounds
/// the interval from the other side.
pub fn phase_latency(
    profile: &Profile,
    bus: &BusSpec,
    plan: &OffloadPlan,
    phase: Phase,
    batch: u32,
    seq_len: u64,
    opts: &BuildOptions,
) -> Result<f64, AnalyzerError> {
    let bw = Constant::new(bus.bandwidth_bytes_per_s)?;
    let room = profile.model.max_position_tokens.saturating_sub(seq_len);
    let output_len = match phase {
        Phase::Prefill => 1,
        Phase::Decode => opts.probe_output_len.min(room).max(2),
    };
    let req = RequestShape {
        batch,
        seq_len,
        output_len,
    };
    let inst = Instance::with_transfer(profile, opts.transfer);
    let m: Metrics = crate::engine::probe_latency(inst, plan, req, &bw)?;
    Ok(m.phase_latency(phase).expect("probe produced the phase"))
}

/// Float slack for `latency <= slo`; simulated sums of exact inputs may be
/// off by a few ulps.
pub(crate) fn meets(latency_ms: f64, slo_ms: f64) -> bool {
    latency_ms <= slo_ms + 1e-9 * slo_ms.max(1.0)
}

fn scan(
    profile: &Profile,
    bus: &BusSpec,
    key: &RecordKey,
    policy: PrefetchPolicy,
    kv_offload: bool,
    opts: &BuildOptions,
) -> Result<RecordEntry, AnalyzerError> {
    // Surface grid points the profile cannot answer instead of skipping them.
    lookup_compute_time(&profile.latency, key.phase, key.batch, key.seq_len)?;
    for i in 1..=profile.model.num_layers {
        let plan = plan_from_interval(&profile.model, Interval::Every(i), policy, kv_offload);
        let lat = phase_latency(profile, bus, &plan, key.phase, key.batch, key.seq_len, opts)?;
        if meets(lat, f64::from(key.slo_ms)) {
            return Ok(RecordEntry::Interval(i));
        }
    }
    let resident = plan_from_interval(&profile.model, Interval::NoOffload, policy, kv_offload);
    let lat = phase_latency(profile, bus, &resident, key.phase, key.batch, key.seq_len, opts)?;
    Ok(if meets(lat, f64::from(key.slo_ms)) {
        RecordEntry::NoOffload
    } else {
        RecordEntry::Infeasible
    })
}

/// Exhaustive ascending scan over every key of the grid, for each phase.
#[allow(clippy::too_many_arguments)]
pub fn build_record(
    profile: &Profile,
    bus: &BusSpec,
    grid: &RecordGrid,
    phases: &[Phase],
    policy: PrefetchPolicy,
    kv_offload: bool,
    opts: &BuildOptions,
) -> Result<PerformanceRecord, AnalyzerError> {
    grid.validate()?;
    let grid = grid.clone().normalized();
    build_record_keys(profile, bus, &grid.keys(phases), policy, kv_offload, opts)
}

/// Builds entries for an arbitrary key set; the meta grid is the union of
/// the keys' axes.
pub fn build_record_keys(
    profile: &Profile,
    bus: &BusSpec,
    keys: &[RecordKey],
    policy: PrefetchPolicy,
    kv_offload: bool,
    opts: &BuildOptions,
) -> Result<PerformanceRecord, AnalyzerError> {
    if keys.is_empty() {
        return Err(AnalyzerError::Grid("no keys to build".into()));
    }
    let grid = RecordGrid {
        slo_ms: keys.iter().map(|k| k.slo_ms).collect(),
        batch: keys.iter().map(|k| k.batch).collect(),
        seq_len: keys.iter().map(|k| k.seq_len).collect(),
    }
    .normalized();
    grid.validate()?;
    bus.validate()?;
    profile.model.validate()?;

    // Rows share (phase, slo, batch) and run in ascending seq_len so pruning
    // can see the previous entry.
    let mut rows: BTreeMap<(Phase, u32, u32), Vec<u64>> = BTreeMap::new();
    for k in keys {
        rows.entry((k.phase, k.slo_ms, k.batch)).or_default().push(k.seq_len);
    }
    let rows: Vec<((Phase, u32, u32), Vec<u64>)> = rows
        .into_iter()
        .map(|(r, mut s)| {
            s.sort_unstable();
            s.dedup();
            (r, s)
        })
        .collect();
    let results = par::map(opts.exec, &rows, |((phase, slo_ms, batch), seqs)| {
        let mut out = Vec::with_capacity(seqs.len());
        let mut hit_one = false;
        for &seq_len in seqs {
            let key = RecordKey {
                phase: *phase,
                slo_ms: *slo_ms,
                batch: *batch,
                seq_len,
            };
            let entry = if opts.prune && hit_one {
                RecordEntry::Interval(1)
            } else {
                scan(profile, bus, &key, policy, kv_offload, opts)?
            };
            hit_one |= entry == RecordEntry::Interval(1);
            out.push((key, entry));
        }
        Ok::<_, AnalyzerError>(out)
    });
    let mut entries = BTreeMap::new();
    for row in results {
        entries.extend(row?);
    }
    Ok(PerformanceRecord {
        meta: RecordMeta {
            model: opts.model_id.clone(),
            gpu: opts.gpu_id.clone(),
            policy,
            kv_offload,
            grid,
        },
        entries,
    })
}

/// Rounds an SLO down to its bucket.
pub fn slo_bucket(slo_ms: f64) -> u32 {
    let b = (slo_ms / f64::from(SLO_BUCKET_MS)).floor().max(0.0) as u32;
    b * SLO_BUCKET_MS
}

/// Keys whose SLO is `ratio` times the resident (no-offload) latency at each
/// `(batch, seq_len)`, rounded down to a bucket.
pub fn relative_keys(
    profile: &Profile,
    phase: Phase,
    ratio: f64,
    batches: &[u32],
    seq_lens: &[u64],
) -> Result<Vec<RecordKey>, AnalyzerError> {
    let l = f64::from(profile.model.num_layers);
    let mut keys = Vec::new();
    for &batch in batches {
        for &seq_len in seq_lens {
            let c = lookup_compute_time(&profile.latency, phase, batch, seq_len)?;
            keys.push(RecordKey {
                phase,
                slo_ms: slo_bucket(ratio * l * c),
                batch,
                seq_len,
            });
        }
    }
    Ok(keys)
}

fn round_up<T: Copy + Ord>(values: impl Iterator<Item = T>, q: T) -> Option<T> {
    values.filter(|&v| v >= q).min()
}

/// Conservative lookup: batch and seq_len round up to the next grid value, the
/// SLO rounds down to a stored bucket; anything beyond the grid is refused.
pub fn lookup_interval(
    record: &PerformanceRecord,
    phase: Phase,
    slo_ms: f64,
    batch: u32,
    seq_len: u64,
) -> RecordEntry {
    let of_phase = || record.entries.keys().filter(|k| k.phase == phase);
    let Some(b) = round_up(of_phase().map(|k| k.batch), batch) else {
        return RecordEntry::Infeasible;
    };
    let Some(s) = round_up(of_phase().map(|k| k.seq_len), seq_len) else {
        return RecordEntry::Infeasible;
    };
    let bucket = slo_bucket(slo_ms);
    record
        .entries
        .iter()
        .filter(|(k, _)| k.phase == phase && k.batch == b && k.seq_len == s && k.slo_ms <= bucket)
        .max_by_key(|(k, _)| k.slo_ms)
        .map_or(RecordEntry::Infeasible, |(_, e)| *e)
}
