//! Per-bus runtime coordinator.
//!
//! Each GPU on a bus has an SLO-derived minimum interval (from its record) and
//! a capacity-derived maximum. When a request arrives the coordinator picks
//! one interval per active GPU so that the bus can sustain every SLO, and among
//! those the combination that parks the most bytes in host memory. Peers pick
//! up their new interval at their next iteration boundary.
//!
//! # Bandwidth check
//!
//! GPU `g` running interval `i` moves `B_g(i)` bytes per iteration; its ledger
//! entry is `B_g / slo_g`, the average rate that sustains one iteration per
//! SLO period. A combination must keep the ledger within the bus bandwidth.
//! Averages miss bursts: two interval-start GPUs whose prefetches line up can
//! each stall although their average demand fits. So, unless disabled, each
//! ledger-feasible combination is also co-simulated on the fluid bus model in
//! preference order, and the first one where every GPU meets its SLO wins.
//! Steady state on a shared bus depends on how the GPUs' iterations line up,
//! so a combination must pass twice: switching over from the running plans,
//! and with every GPU starting the new plans together.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analyzer::{lookup_interval, meets, PerformanceRecord};
use crate::engine::{
    simulate_bus, BusJob, Constant, Instance, JobMode, Metrics, PlanSwitch, PrefetchPolicy,
    RequestShape, TransferModel,
};
use crate::error::CoordinatorError;
use crate::interval::{max_feasible_interval, plan_from_interval, Interval};
use crate::profiles::{BusSpec, Profile};
use crate::Phase;

/// Which phases a GPU serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpuRole {
    Prefill,
    Decode,
    /// Both phases of its requests.
    Mixed,
}

impl GpuRole {
    pub fn phases(self) -> &'static [Phase] {
        match self {
            GpuRole::Prefill => &[Phase::Prefill],
            GpuRole::Decode => &[Phase::Decode],
            GpuRole::Mixed => &[Phase::Prefill, Phase::Decode],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestSpec {
    pub id: String,
    pub batch: u32,
    pub seq_len: u64,
    pub output_len: u64,
    pub ttft_slo_ms: f64,
    pub tpot_slo_ms: f64,
}

impl RequestSpec {
    pub fn slo(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Prefill => self.ttft_slo_ms,
            Phase::Decode => self.tpot_slo_ms,
        }
    }

    pub fn total_tokens(&self) -> u64 {
        u64::from(self.batch) * (self.seq_len + self.output_len)
    }
}

/// Bandwidth and memory figures of one candidate interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub interval: Interval,
    pub host_bytes: u64,
    /// Ledger estimate: bytes per iteration over the SLO, bytes/s.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub request: RequestSpec,
    pub min_interval: Interval,
    pub max_interval: Interval,
    pub current_interval: Interval,
    pub pending_interval: Interval,
    /// Every interval in `[min, max]`, ascending.
    pub candidates: Vec<Candidate>,
}

impl Assignment {
    fn candidate(&self, i: Interval) -> &Candidate {
        self.candidates
            .iter()
            .find(|c| c.interval == i)
            .expect("assigned interval is a candidate")
    }
}

#[derive(Clone, Debug)]
pub struct GpuInstanceState {
    pub id: u32,
    pub model_id: String,
    pub role: GpuRole,
    pub profile: Arc<Profile>,
    pub record: Arc<PerformanceRecord>,
    pub active: Option<Assignment>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordinatorConfig {
    pub policy: PrefetchPolicy,
    pub kv_offload: bool,
    pub transfer: TransferModel,
    /// Re-run the optimization for the survivors when a request completes.
    pub reoptimize_on_release: bool,
    /// Co-simulate each ledger-feasible combination for this many iterations
    /// and skip those where any GPU misses its SLO. `None` trusts the ledger.
    pub verify_horizon: Option<usize>,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            policy: PrefetchPolicy::Eager,
            kv_offload: false,
            transfer: TransferModel::default(),
            reoptimize_on_release: true,
            verify_horizon: Some(40),
        }
    }
}

/// Coordinator state of one bus.
#[derive(Clone, Debug)]
pub struct BusState {
    pub bus: BusSpec,
    pub config: CoordinatorConfig,
    pub gpus: Vec<GpuInstanceState>,
    /// Estimated consumption of each active GPU at its pending interval.
    pub ledger: BTreeMap<u32, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    /// New interval per active GPU, in id order.
    Admit { assignments: Vec<(u32, Interval)> },
    Reject { reason: String },
}

impl BusState {
    pub fn new(bus: BusSpec, config: CoordinatorConfig, gpus: Vec<GpuInstanceState>) -> Self {
        let mut gpus = gpus;
        gpus.sort_by_key(|g| g.id);
        BusState {
            bus,
            config,
            gpus,
            ledger: BTreeMap::new(),
        }
    }

    fn index(&self, gpu: u32) -> Result<usize, CoordinatorError> {
        self.gpus
            .iter()
            .position(|g| g.id == gpu)
            .ok_or(CoordinatorError::UnknownGpu(gpu))
    }

    pub fn gpu(&self, gpu: u32) -> Result<&GpuInstanceState, CoordinatorError> {
        self.index(gpu).map(|i| &self.gpus[i])
    }

    pub fn ledger_total(&self) -> f64 {
        self.ledger.values().sum()
    }

    fn active_ids(&self) -> Vec<u32> {
        self.gpus
            .iter()
            .filter(|g| g.active.is_some())
            .map(|g| g.id)
            .collect()
    }

    fn refresh_ledger(&mut self) {
        self.ledger = self
            .gpus
            .iter()
            .filter_map(|g| {
                g.active
                    .as_ref()
                    .map(|a| (g.id, a.candidate(a.pending_interval).rate))
            })
            .collect();
    }
}

/// Minimum interval from the record for every phase the GPU serves.
pub fn min_interval(
    record: &PerformanceRecord,
    role: GpuRole,
    req: &RequestSpec,
) -> Option<Interval> {
    let mut worst = Interval::Every(1);
    for &phase in role.phases() {
        worst = worst.max(lookup_interval(record, phase, req.slo(phase), req.batch, req.seq_len).interval()?);
    }
    Some(worst)
}

/// Figures of every interval in `[min, max]`.
pub fn candidates(
    profile: &Profile,
    role: GpuRole,
    req: &RequestSpec,
    min: Interval,
    max: Interval,
    config: &CoordinatorConfig,
) -> Result<Vec<Candidate>, CoordinatorError> {
    let model = &profile.model;
    let l = model.num_layers;
    let mut intervals: Vec<Interval> = (1..=l)
        .map(Interval::Every)
        .filter(|&i| min <= i && i <= max)
        .collect();
    if max == Interval::NoOffload {
        intervals.push(Interval::NoOffload);
    }
    let mut out = Vec::with_capacity(intervals.len());
    for i in intervals {
        let plan = plan_from_interval(model, i, config.policy, config.kv_offload);
        let mut rate: f64 = 0.0;
        for &phase in role.phases() {
            // KV bytes at the longest context the phase sees.
            let ctx = match phase {
                Phase::Prefill => req.seq_len,
                Phase::Decode => req.seq_len + req.output_len,
            };
            let bytes = config.transfer.bytes_per_iteration(model, &plan, req.batch, ctx) as f64;
            rate = rate.max(bytes * 1000.0 / req.slo(phase));
        }
        out.push(Candidate {
            interval: i,
            host_bytes: plan.host_bytes(model, req.total_tokens()),
            rate,
        });
    }
    Ok(out)
}

/// The ledger predicate on one combination: estimates sum to at most the bus
/// bandwidth.
pub fn bandwidth_feasible(chosen: &[&Candidate], bandwidth_bytes_per_s: f64) -> bool {
    let total: f64 = chosen.iter().map(|c| c.rate).sum();
    total <= bandwidth_bytes_per_s * (1.0 + 1e-12)
}

/// Every ledger-feasible combination over `sets` (one candidate list per GPU,
/// in tie-break order), best first: most host memory, then lexicographically
/// smaller intervals. Entries are indices into each list.
fn ranked_combinations(sets: &[&[Candidate]], bandwidth: f64) -> Vec<Vec<usize>> {
    if sets.iter().any(|s| s.is_empty()) {
        return Vec::new();
    }
    let mut idx = vec![0usize; sets.len()];
    let mut found: Vec<(u64, Vec<usize>)> = Vec::new();
    loop {
        let chosen: Vec<&Candidate> = sets.iter().zip(&idx).map(|(s, &k)| &s[k]).collect();
        if bandwidth_feasible(&chosen, bandwidth) {
            found.push((chosen.iter().map(|c| c.host_bytes).sum(), idx.clone()));
        }
        // Odometer, last position fastest: enumeration order is already
        // lexicographic in the intervals, and the sort below is stable.
        let mut p = sets.len();
        loop {
            if p == 0 {
                found.sort_by_key(|f| std::cmp::Reverse(f.0));
                return found.into_iter().map(|(_, v)| v).collect();
            }
            p -= 1;
            idx[p] += 1;
            if idx[p] < sets[p].len() {
                break;
            }
            idx[p] = 0;
        }
    }
}

/// Steady-state latency of one active GPU over an epoch.
#[derive(Clone, Debug)]
pub struct EpochResult {
    pub gpu: u32,
    pub request: String,
    pub metrics: Metrics,
    /// `(phase, latency, slo)` for every phase the GPU's role is judged on.
    pub latencies: Vec<(Phase, f64, f64)>,
}

impl EpochResult {
    pub fn meets_slo(&self) -> bool {
        self.latencies.iter().all(|&(_, lat, slo)| meets(lat, slo))
    }
}

fn stream_mode(role: GpuRole) -> JobMode {
    match role {
        GpuRole::Prefill => JobMode::PrefillStream,
        GpuRole::Decode => JobMode::DecodeStream,
        GpuRole::Mixed => JobMode::FullStream,
    }
}

/// One co-simulated epoch on the bus.
#[derive(Clone, Debug, Default)]
pub struct Epoch {
    /// Active GPUs in id order.
    pub gpus: Vec<EpochResult>,
    pub makespan_ms: f64,
    pub bytes_moved: f64,
}

impl Epoch {
    pub fn meets_slo(&self) -> bool {
        self.gpus.iter().all(EpochResult::meets_slo)
    }
}

/// Streams every active GPU's request on the shared bus for `horizon`
/// iterations. `intervals` gives each GPU's `(current, pending)`; the pending
/// plan takes over at the first boundary.
fn epoch_with(
    state: &BusState,
    intervals: &BTreeMap<u32, (Interval, Interval)>,
    horizon: usize,
) -> Result<Epoch, CoordinatorError> {
    let active: Vec<(&GpuInstanceState, &Assignment)> = state
        .gpus
        .iter()
        .filter_map(|g| g.active.as_ref().map(|a| (g, a)))
        .collect();
    if active.is_empty() {
        return Ok(Epoch::default());
    }
    let cfg = &state.config;
    let plan = |g: &GpuInstanceState, i| plan_from_interval(&g.profile.model, i, cfg.policy, cfg.kv_offload);
    let jobs: Vec<BusJob<'_>> = active
        .iter()
        .map(|(g, a)| {
            let (current, pending) = intervals[&g.id];
            BusJob {
                inst: Instance::with_transfer(&g.profile, cfg.transfer),
                plan: plan(g, current),
                request: RequestShape {
                    batch: a.request.batch,
                    seq_len: a.request.seq_len,
                    output_len: a.request.output_len,
                },
                mode: stream_mode(g.role),
                switch: (pending != current).then(|| PlanSwitch {
                    at_iteration: 1,
                    plan: plan(g, pending),
                }),
            }
        })
        .collect();
    let bw = Constant::new(state.bus.bandwidth_bytes_per_s)?;
    let out = simulate_bus(&jobs, &bw, horizon)?;
    let gpus = active
        .iter()
        .zip(out.metrics)
        .map(|((g, a), metrics)| {
            let latencies = g
                .role
                .phases()
                .iter()
                .map(|&p| {
                    let lat = metrics.phase_latency(p).expect("stream covers its phases");
                    (p, lat, a.request.slo(p))
                })
                .collect();
            EpochResult {
                gpu: g.id,
                request: a.request.id.clone(),
                metrics,
                latencies,
            }
        })
        .collect();
    Ok(Epoch {
        gpus,
        makespan_ms: out.makespan_ms,
        bytes_moved: out.bytes_moved,
    })
}

/// The epoch that follows the current state: every active GPU runs its
/// current interval for one iteration and its pending one afterwards.
pub fn run_epoch(state: &BusState, horizon: usize) -> Result<Epoch, CoordinatorError> {
    let intervals = state
        .gpus
        .iter()
        .filter_map(|g| {
            g.active
                .as_ref()
                .map(|a| (g.id, (a.current_interval, a.pending_interval)))
        })
        .collect();
    epoch_with(state, &intervals, horizon)
}

/// Chooses intervals for `order` (first entry wins ties) and applies them: the
/// target's interval takes effect now, the others at their next boundary.
fn optimize(
    state: &mut BusState,
    order: &[u32],
    immediate: Option<u32>,
) -> Result<Option<Vec<(u32, Interval)>>, CoordinatorError> {
    let sets: Vec<Vec<Candidate>> = order
        .iter()
        .map(|id| {
            let g = state.gpus.iter().find(|g| g.id == *id).expect("known gpu");
            g.active.as_ref().expect("active gpu").candidates.clone()
        })
        .collect();
    let refs: Vec<&[Candidate]> = sets.iter().map(Vec::as_slice).collect();
    let mut pick = None;
    for combo in ranked_combinations(&refs, state.bus.bandwidth_bytes_per_s) {
        let chosen: Vec<(u32, Interval)> = order
            .iter()
            .zip(&combo)
            .zip(&sets)
            .map(|((&id, &k), s)| (id, s[k].interval))
            .collect();
        let Some(horizon) = state.config.verify_horizon else {
            pick = Some(chosen);
            break;
        };
        let intervals: BTreeMap<u32, (Interval, Interval)> = chosen
            .iter()
            .map(|&(id, i)| {
                let a = state.gpu(id).expect("known gpu").active.as_ref().expect("active gpu");
                let current = if Some(id) == immediate { i } else { a.current_interval };
                (id, (current, i))
            })
            .collect();
        let lockstep = chosen.iter().map(|&(id, i)| (id, (i, i))).collect();
        if epoch_with(state, &intervals, horizon)?.meets_slo()
            && epoch_with(state, &lockstep, horizon)?.meets_slo()
        {
            pick = Some(chosen);
            break;
        }
    }
    let Some(chosen) = pick else {
        return Ok(None);
    };
    for &(id, i) in &chosen {
        let g = state.gpus.iter_mut().find(|g| g.id == id).expect("known gpu");
        let a = g.active.as_mut().expect("active gpu");
        a.pending_interval = i;
        if Some(id) == immediate {
            a.current_interval = i;
        }
    }
    state.refresh_ledger();
    let mut by_id = chosen;
    by_id.sort_by_key(|&(id, _)| id);
    Ok(Some(by_id))
}

/// Admits `req` on `gpu` or rejects it back to the caller.
pub fn admit(state: &mut BusState, gpu: u32, req: RequestSpec) -> Result<Decision, CoordinatorError> {
    let at = state.index(gpu)?;
    if state.gpus[at].active.is_some() {
        return Err(CoordinatorError::Busy(gpu));
    }
    let g = &state.gpus[at];
    let config = state.config;
    let Some(min) = min_interval(&g.record, g.role, &req) else {
        return Ok(Decision::Reject {
            reason: format!("record has no SLO-meeting interval for request {}", req.id),
        });
    };
    let model = &g.profile.model;
    let Some(max) = max_feasible_interval(
        model,
        &g.profile.gpu,
        req.batch,
        req.total_tokens(),
        config.policy,
        config.kv_offload,
    ) else {
        return Ok(Decision::Reject {
            reason: format!("request {} does not fit on gpu {gpu} even at interval 1", req.id),
        });
    };
    if min > max {
        return Ok(Decision::Reject {
            reason: format!(
                "request {} needs interval <= {min} for its SLO but memory allows at most {max}",
                req.id
            ),
        });
    }
    let cands = candidates(&g.profile, g.role, &req, min, max, &config)?;
    let peers: Vec<u32> = state.active_ids();
    state.gpus[at].active = Some(Assignment {
        request: req,
        min_interval: min,
        max_interval: max,
        current_interval: min,
        pending_interval: min,
        candidates: cands,
    });
    if peers.is_empty() {
        state.refresh_ledger();
        return Ok(Decision::Admit {
            assignments: vec![(gpu, min)],
        });
    }
    let mut order = vec![gpu];
    order.extend(peers);
    match optimize(state, &order, Some(gpu)) {
        Ok(Some(assignments)) => Ok(Decision::Admit { assignments }),
        Ok(None) => {
            state.gpus[at].active = None;
            state.refresh_ledger();
            Ok(Decision::Reject {
                reason: "no interval combination fits the bus bandwidth".into(),
            })
        }
        Err(e) => {
            state.gpus[at].active = None;
            state.refresh_ledger();
            Err(e)
        }
    }
}

/// Applies the pending interval at an iteration boundary.
pub fn on_iteration_boundary(state: &mut BusState, gpu: u32) -> Result<Interval, CoordinatorError> {
    let at = state.index(gpu)?;
    let a = state.gpus[at]
        .active
        .as_mut()
        .ok_or(CoordinatorError::Idle(gpu))?;
    a.current_interval = a.pending_interval;
    Ok(a.current_interval)
}

/// Completes the request on `gpu`. Returns the survivors' new pending
/// intervals when re-optimization is on; if no combination passes, the
/// survivors keep what they run.
pub fn release(state: &mut BusState, gpu: u32) -> Result<Vec<(u32, Interval)>, CoordinatorError> {
    let at = state.index(gpu)?;
    if state.gpus[at].active.take().is_none() {
        return Err(CoordinatorError::Idle(gpu));
    }
    state.refresh_ledger();
    let survivors = state.active_ids();
    if !state.config.reoptimize_on_release || survivors.is_empty() {
        return Ok(Vec::new());
    }
    Ok(optimize(state, &survivors, None)?.unwrap_or_default())
}
