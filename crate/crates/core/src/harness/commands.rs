use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::report::{
    BusReport, GpuReport, IntervalChange, Report, RequestReport, Verdict, REPORT_VERSION,
};
use super::scenario::{Event, LoadedScenario, RequestEntry};
use crate::analyzer::{
    build_record, build_record_keys, phase_latency, relative_keys, slo_bucket, BuildOptions,
    PerformanceRecord, RecordEntry, RecordGrid, RecordKey,
};
use crate::baselines::{deepspeed_plan, flexgen_plan, naive_plan, FlexgenQuery, SloTarget, FLEXGEN_GRID_STEP};
use crate::coordinator::{
    admit, on_iteration_boundary, release, run_epoch, BusState, CoordinatorConfig, Decision, GpuInstanceState,
    GpuRole, RequestSpec,
};
use crate::engine::{
    simulate_bus, BusJob, Constant, Instance, IterationTrace, JobMode, OffloadPlan,
    PrefetchPolicy, RequestShape, TransferModel,
};
use crate::error::HarnessError;
use crate::interval::{max_feasible_interval, plan_from_interval, Interval};
use crate::par::Execution;
use crate::profiles::{BusSpec, Profile};
use crate::Phase;

/// Offloading policy a scenario is run under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    SelectN,
    Deepspeed,
    Flexgen,
    Naive,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Naive,
        PolicyKind::Deepspeed,
        PolicyKind::Flexgen,
        PolicyKind::SelectN,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::SelectN => "select-n",
            PolicyKind::Deepspeed => "deepspeed",
            PolicyKind::Flexgen => "flexgen",
            PolicyKind::Naive => "naive",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| HarnessError::Usage(format!("unknown policy {s:?}")))
    }
}

pub fn parse_prefetch(s: &str) -> Result<PrefetchPolicy, HarnessError> {
    match s {
        "interval-start" => Ok(PrefetchPolicy::IntervalStart),
        "eager" => Ok(PrefetchPolicy::Eager),
        "one-ahead" => Ok(PrefetchPolicy::OneAhead),
        _ => Err(HarnessError::Usage(format!("unknown prefetch policy {s:?}"))),
    }
}

fn probe_options(ls: &LoadedScenario) -> BuildOptions {
    BuildOptions {
        transfer: ls.scenario.policy.transfer(),
        exec: Execution::Sequential,
        ..BuildOptions::default()
    }
}

/// Resident latency of `phase` for the request, alone on the bus.
fn resident_latency(ls: &LoadedScenario, r: &RequestEntry, phase: Phase) -> Result<f64, HarnessError> {
    let p = ls.profile(r.gpu);
    let plan = OffloadPlan::resident(p.model.num_layers, ls.scenario.policy.prefetch, false);
    Ok(phase_latency(p, &ls.scenario.bus, &plan, phase, r.batch, r.seq_len, &probe_options(ls))?)
}

/// Millisecond SLOs; relative ones resolve against the simulated resident
/// latency.
pub fn resolve_request(ls: &LoadedScenario, r: &RequestEntry) -> Result<RequestSpec, HarnessError> {
    let resolve = |target: SloTarget, phase| -> Result<f64, HarnessError> {
        Ok(match target {
            SloTarget::Ms(ms) => ms,
            SloTarget::Relative(_) => target.resolve(resident_latency(ls, r, phase)?),
        })
    };
    Ok(RequestSpec {
        id: r.id.clone(),
        batch: r.batch,
        seq_len: r.seq_len,
        output_len: r.output_len,
        ttft_slo_ms: resolve(r.ttft_slo.target(), Phase::Prefill)?,
        tpot_slo_ms: resolve(r.tpot_slo.target(), Phase::Decode)?,
    })
}

/// One record per GPU: `given` for all of them, or built from the keys of
/// the requests each GPU serves.
pub fn records_for(
    ls: &LoadedScenario,
    given: Option<&PerformanceRecord>,
) -> Result<Vec<Arc<PerformanceRecord>>, HarnessError> {
    let policy = ls.scenario.policy.prefetch;
    let kv = ls.scenario.policy.kv_offload;
    if let Some(rec) = given {
        if rec.meta.policy != policy || rec.meta.kv_offload != kv {
            return Err(HarnessError::Usage(format!(
                "record was built for {} / kv_offload {} but the scenario runs {} / kv_offload {}",
                rec.meta.policy.as_str(),
                rec.meta.kv_offload,
                policy.as_str(),
                kv
            )));
        }
        let rec = Arc::new(rec.clone());
        return Ok(ls.scenario.gpus.iter().map(|_| rec.clone()).collect());
    }
    let mut out = Vec::with_capacity(ls.scenario.gpus.len());
    for (g, profile) in ls.scenario.gpus.iter().zip(&ls.profiles) {
        let mut keys = BTreeSet::new();
        for r in ls.scenario.requests.iter().filter(|r| r.gpu == g.id) {
            let spec = resolve_request(ls, r)?;
            for &phase in g.role.phases() {
                keys.insert(RecordKey {
                    phase,
                    slo_ms: slo_bucket(spec.slo(phase)),
                    batch: r.batch,
                    seq_len: r.seq_len,
                });
            }
        }
        let rec = if keys.is_empty() {
            PerformanceRecord::empty(policy, kv)
        } else {
            let keys: Vec<RecordKey> = keys.into_iter().collect();
            let opts = BuildOptions {
                model_id: ls.scenario.name.clone(),
                gpu_id: g.id.to_string(),
                ..probe_options(ls)
            };
            build_record_keys(profile, &ls.scenario.bus, &keys, policy, kv, &opts)?
        };
        out.push(Arc::new(rec));
    }
    Ok(out)
}

/// The plan a policy runs a request with.
#[derive(Clone, Debug, PartialEq)]
pub enum PlanChoice {
    Run {
        plan: OffloadPlan,
        interval: Option<Interval>,
        portion: Option<f64>,
    },
    Rejected(String),
    /// No-offload does not fit.
    Unfit,
}

/// Select-N's plan: the smallest SLO-meeting interval from the record, if
/// memory allows it.
pub fn select_n_choice(
    profile: &Profile,
    record: &PerformanceRecord,
    role: GpuRole,
    spec: &RequestSpec,
    policy: PrefetchPolicy,
    kv_offload: bool,
) -> PlanChoice {
    let Some(min) = crate::coordinator::min_interval(record, role, spec) else {
        return PlanChoice::Rejected("no SLO-meeting interval in the record".into());
    };
    let Some(max) = max_feasible_interval(
        &profile.model,
        &profile.gpu,
        spec.batch,
        spec.total_tokens(),
        policy,
        kv_offload,
    ) else {
        return PlanChoice::Rejected("does not fit even at interval 1".into());
    };
    if min > max {
        return PlanChoice::Rejected(format!("SLO needs interval {min}, memory allows at most {max}"));
    }
    PlanChoice::Run {
        plan: plan_from_interval(&profile.model, min, policy, kv_offload),
        interval: Some(min),
        portion: None,
    }
}

pub fn plan_choice(
    ls: &LoadedScenario,
    record: &PerformanceRecord,
    kind: PolicyKind,
    r: &RequestEntry,
    spec: &RequestSpec,
) -> Result<PlanChoice, HarnessError> {
    let profile = ls.profile(r.gpu);
    let role = ls.role(r.gpu);
    let knobs = &ls.scenario.policy;
    Ok(match kind {
        PolicyKind::SelectN => select_n_choice(profile, record, role, spec, knobs.prefetch, knobs.kv_offload),
        PolicyKind::Deepspeed => PlanChoice::Run {
            plan: deepspeed_plan(&profile.model, knobs.kv_offload),
            interval: Some(Interval::Every(1)),
            portion: Some(1.0),
        },
        PolicyKind::Naive => match naive_plan(&profile.model, &profile.gpu, r.batch, spec.total_tokens()) {
            Some(plan) => PlanChoice::Run {
                plan,
                interval: Some(Interval::NoOffload),
                portion: Some(0.0),
            },
            None => PlanChoice::Unfit,
        },
        PolicyKind::Flexgen => {
            let mut best: Option<(OffloadPlan, f64)> = None;
            for &phase in role.phases() {
                let slo = match phase {
                    Phase::Prefill => r.ttft_slo.target(),
                    Phase::Decode => r.tpot_slo.target(),
                };
                let q = FlexgenQuery {
                    phase,
                    batch: r.batch,
                    seq_len: r.seq_len,
                    total_tokens: spec.total_tokens(),
                    slo,
                    n_sharing: ls.scenario.bus.gpu_count,
                    grid_step: FLEXGEN_GRID_STEP,
                    kv_offload: knobs.kv_offload,
                };
                let (plan, d) = match flexgen_plan(&profile.model, &profile.gpu, &ls.scenario.bus, &q) {
                    Ok(x) => x,
                    Err(crate::EngineError::DoesNotFit { .. }) => {
                        return Ok(PlanChoice::Rejected("does not fit even fully offloaded".into()))
                    }
                    Err(e) => return Err(e.into()),
                };
                if best.as_ref().is_none_or(|(_, p)| d.portion < *p) {
                    best = Some((plan, d.portion));
                }
            }
            let (plan, portion) = best.expect("every role serves a phase");
            PlanChoice::Run {
                plan,
                interval: None,
                portion: Some(portion),
            }
        }
    })
}

fn shape(r: &RequestEntry) -> RequestShape {
    RequestShape {
        batch: r.batch,
        seq_len: r.seq_len,
        output_len: r.output_len,
    }
}

fn blank_report(r: &RequestEntry, spec: &RequestSpec) -> RequestReport {
    RequestReport {
        id: r.id.clone(),
        gpu: r.gpu,
        ttft_ms: None,
        tpot_ms: None,
        ttft_slo_ms: spec.ttft_slo_ms,
        tpot_slo_ms: spec.tpot_slo_ms,
        slo_ratio_ttft: None,
        slo_ratio_tpot: None,
        verdict: Verdict::Rejected,
        reason: None,
        interval: None,
        portion: None,
        host_mem_bytes: None,
        throughput_tokens_per_s: None,
    }
}

fn judged(role: GpuRole) -> (bool, bool) {
    match role {
        GpuRole::Prefill => (true, false),
        GpuRole::Decode => (false, true),
        GpuRole::Mixed => (true, true),
    }
}

/// A finished `simulate` run.
#[derive(Clone, Debug)]
pub struct SimulateOutput {
    pub report: Report,
    /// Request id and trace of every request that ran.
    pub traces: Vec<(String, IterationTrace)>,
    /// Requests the naive baseline could not place.
    pub unfit: Vec<String>,
}

impl SimulateOutput {
    /// `{"requests": [{"id", "gpu", "events": [...]}]}`.
    pub fn traces_json(&self) -> String {
        let reqs: Vec<serde_json::Value> = self
            .traces
            .iter()
            .map(|(id, t)| {
                let gpu = self.report.requests.iter().find(|r| &r.id == id).map(|r| r.gpu);
                serde_json::json!({ "id": id, "gpu": gpu, "events": t.events })
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&serde_json::json!({ "requests": reqs }))
            .expect("trace serializes");
        s.push('\n');
        s
    }
}

/// Runs every request concurrently on the bus under one policy. Naive runs
/// that do not fit are listed in `unfit` rather than failing.
pub fn run_policy(
    ls: &LoadedScenario,
    records: &[Arc<PerformanceRecord>],
    kind: PolicyKind,
) -> Result<SimulateOutput, HarnessError> {
    let s = &ls.scenario;
    let mut seen = BTreeSet::new();
    for r in &s.requests {
        if !seen.insert(r.gpu) {
            return Err(HarnessError::Scenario(format!(
                "simulate runs one request per gpu; gpu {} has several (use coordinate for arrival sequences)",
                r.gpu
            )));
        }
    }
    let transfer = s.policy.transfer();
    let mut coordinated = match kind {
        PolicyKind::SelectN => coordinated_choices(ls, records)?,
        _ => BTreeMap::new(),
    };
    let mut reports = Vec::new();
    let mut jobs = Vec::new();
    let mut unfit = Vec::new();
    for r in &s.requests {
        let spec = resolve_request(ls, r)?;
        let k = s.gpus.iter().position(|g| g.id == r.gpu).expect("validated");
        let mut rep = blank_report(r, &spec);
        let choice = match coordinated.remove(&r.id) {
            Some(c) => c,
            None => plan_choice(ls, &records[k], kind, r, &spec)?,
        };
        match choice {
            PlanChoice::Run { plan, interval, portion } => {
                rep.interval = interval;
                rep.portion = portion;
                jobs.push((reports.len(), plan));
            }
            PlanChoice::Rejected(why) => rep.reason = Some(why),
            PlanChoice::Unfit => {
                rep.reason = Some("model does not fit without offloading".into());
                unfit.push(r.id.clone());
            }
        }
        reports.push(rep);
    }
    let bw = Constant::new(s.bus.bandwidth_bytes_per_s)?;
    let mut gpu_stats: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    let mut traces = Vec::new();
    let mut bus = BusReport {
        bandwidth_bytes_per_s: s.bus.bandwidth_bytes_per_s,
        makespan_ms: 0.0,
        bytes_moved: 0.0,
        mean_utilization: 0.0,
        peak_ledger_bytes_per_s: None,
    };
    if !jobs.is_empty() {
        let bus_jobs: Vec<BusJob<'_>> = jobs
            .iter()
            .map(|(k, plan)| {
                let r = &s.requests[*k];
                BusJob {
                    inst: Instance::with_transfer(ls.profile(r.gpu), transfer),
                    plan: plan.clone(),
                    request: shape(r),
                    mode: JobMode::Full,
                    switch: None,
                }
            })
            .collect();
        let out = simulate_bus(&bus_jobs, &bw, 1)?;
        for (((k, _), m), t) in jobs.iter().zip(&out.metrics).zip(out.traces.iter().cloned()) {
            let r = &s.requests[*k];
            let rep = &mut reports[*k];
            rep.ttft_ms = m.phase_latency(Phase::Prefill);
            rep.tpot_ms = m.phase_latency(Phase::Decode);
            rep.host_mem_bytes = Some(m.host_mem_bytes);
            rep.throughput_tokens_per_s = Some(m.throughput_tokens_per_s);
            let (a, b) = judged(ls.role(r.gpu));
            rep.judge(a, b);
            gpu_stats.insert(r.gpu, (m.gpu_mem_peak_bytes, m.host_mem_bytes));
            traces.push((r.id.clone(), t));
        }
        bus.makespan_ms = out.makespan_ms;
        bus.bytes_moved = out.bytes_moved;
        bus.mean_utilization = out.mean_utilization(s.bus.bandwidth_bytes_per_s);
    }
    let gpus = s
        .gpus
        .iter()
        .map(|g| {
            let (peak, host) = gpu_stats.get(&g.id).copied().unwrap_or((0, 0));
            let intervals = reports
                .iter()
                .filter(|r| r.gpu == g.id)
                .filter_map(|r| {
                    r.interval.map(|i| IntervalChange {
                        event: 0,
                        request: r.id.clone(),
                        current: i,
                        pending: i,
                    })
                })
                .collect();
            GpuReport {
                id: g.id,
                role: g.role,
                gpu_mem_peak_bytes: peak,
                host_mem_bytes: host,
                intervals,
            }
        })
        .collect();
    Ok(SimulateOutput {
        report: Report {
            version: REPORT_VERSION,
            scenario: s.name.clone(),
            command: "simulate".into(),
            policy: kind.as_str().into(),
            requests: reports,
            gpus,
            bus,
        },
        traces,
        unfit,
    })
}

/// `simulate`: like [`run_policy`] but a naive run that does not fit is an
/// error.
pub fn simulate(
    ls: &LoadedScenario,
    records: &[Arc<PerformanceRecord>],
    kind: PolicyKind,
) -> Result<SimulateOutput, HarnessError> {
    let out = run_policy(ls, records, kind)?;
    match out.unfit.first() {
        Some(id) => Err(HarnessError::NaiveInfeasible(id.clone())),
        None => Ok(out),
    }
}

/// Intervals of one active GPU at an admission, for auditing.
#[derive(Clone, Debug, PartialEq)]
pub struct GpuSnapshot {
    pub id: u32,
    pub role: GpuRole,
    pub request: RequestSpec,
    pub min: Interval,
    pub max: Interval,
    pub current: Interval,
    pub pending: Interval,
}

/// What happened at one scenario event.
#[derive(Clone, Debug, PartialEq)]
pub struct EventLog {
    pub event: Event,
    pub decision: Option<Decision>,
    /// Active GPUs after the event.
    pub active: Vec<GpuSnapshot>,
    pub ledger_total: f64,
    /// Steady latency per active request and judged phase in the epoch that
    /// followed, as `(request, phase, latency, slo)`.
    pub latencies: Vec<(String, Phase, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct CoordinateOutput {
    pub report: Report,
    pub log: Vec<EventLog>,
}

/// An idle coordinator for the scenario's bus, verifying over its horizon.
pub fn bus_state(ls: &LoadedScenario, records: &[Arc<PerformanceRecord>]) -> BusState {
    let s = &ls.scenario;
    let knobs = &s.policy;
    let config = CoordinatorConfig {
        policy: knobs.prefetch,
        kv_offload: knobs.kv_offload,
        transfer: knobs.transfer(),
        reoptimize_on_release: true,
        verify_horizon: Some(s.horizon_iterations),
    };
    let gpus = s
        .gpus
        .iter()
        .zip(&ls.profiles)
        .zip(records)
        .map(|((g, p), rec)| GpuInstanceState {
            id: g.id,
            model_id: s.name.clone(),
            role: g.role,
            profile: p.clone(),
            record: rec.clone(),
            active: None,
        })
        .collect();
    BusState::new(s.bus.clone(), config, gpus)
}

/// Select-N on a shared bus: every request arrives in listing order and runs
/// at the interval the coordinator settles on.
fn coordinated_choices(
    ls: &LoadedScenario,
    records: &[Arc<PerformanceRecord>],
) -> Result<BTreeMap<String, PlanChoice>, HarnessError> {
    let knobs = &ls.scenario.policy;
    let mut state = bus_state(ls, records);
    let mut out = BTreeMap::new();
    for r in &ls.scenario.requests {
        if let Decision::Reject { reason } = admit(&mut state, r.gpu, resolve_request(ls, r)?)? {
            out.insert(r.id.clone(), PlanChoice::Rejected(reason));
        }
    }
    for g in &state.gpus {
        if let Some(a) = &g.active {
            let i = a.pending_interval;
            out.insert(
                a.request.id.clone(),
                PlanChoice::Run {
                    plan: plan_from_interval(&g.profile.model, i, knobs.prefetch, knobs.kv_offload),
                    interval: Some(i),
                    portion: None,
                },
            );
        }
    }
    Ok(out)
}

/// Drives admission, boundaries and release over the scenario's events. After
/// every event the active GPUs run a steady-state epoch on the shared bus;
/// pending intervals take effect at the epoch's first boundary. Each request
/// reports the worst latency it saw across epochs.
pub fn coordinate(
    ls: &LoadedScenario,
    records: &[Arc<PerformanceRecord>],
) -> Result<CoordinateOutput, HarnessError> {
    let s = &ls.scenario;
    let mut state = bus_state(ls, records);
    let mut reports: BTreeMap<String, RequestReport> = BTreeMap::new();
    let mut specs: BTreeMap<String, RequestSpec> = BTreeMap::new();
    for r in &s.requests {
        let spec = resolve_request(ls, r)?;
        let mut rep = blank_report(r, &spec);
        rep.reason = Some("never arrived".into());
        reports.insert(r.id.clone(), rep);
        specs.insert(r.id.clone(), spec);
    }
    let mut history: BTreeMap<u32, Vec<IntervalChange>> = BTreeMap::new();
    let mut gpu_peak: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    let mut log = Vec::new();
    let mut bus = BusReport {
        bandwidth_bytes_per_s: s.bus.bandwidth_bytes_per_s,
        makespan_ms: 0.0,
        bytes_moved: 0.0,
        mean_utilization: 0.0,
        peak_ledger_bytes_per_s: Some(0.0),
    };

    for (k, event) in s.effective_events().into_iter().enumerate() {
        let mut decision = None;
        match &event {
            Event::Arrive(id) => {
                let r = s.request(id).expect("validated");
                let d = admit(&mut state, r.gpu, specs[id].clone())?;
                let rep = reports.get_mut(id).expect("known request");
                match &d {
                    Decision::Admit { .. } => {
                        rep.reason = None;
                        rep.verdict = Verdict::Met;
                    }
                    Decision::Reject { reason } => rep.reason = Some(reason.clone()),
                }
                decision = Some(d);
            }
            Event::Depart(id) => {
                let r = s.request(id).expect("validated");
                let serving = state
                    .gpu(r.gpu)?
                    .active
                    .as_ref()
                    .is_some_and(|a| &a.request.id == id);
                if serving {
                    release(&mut state, r.gpu)?;
                }
            }
        }
        let peak = bus.peak_ledger_bytes_per_s.get_or_insert(0.0);
        *peak = peak.max(state.ledger_total());

        let active: Vec<GpuSnapshot> = state
            .gpus
            .iter()
            .filter_map(|g| {
                g.active.as_ref().map(|a| GpuSnapshot {
                    id: g.id,
                    role: g.role,
                    request: a.request.clone(),
                    min: a.min_interval,
                    max: a.max_interval,
                    current: a.current_interval,
                    pending: a.pending_interval,
                })
            })
            .collect();
        for a in &active {
            history.entry(a.id).or_default().push(IntervalChange {
                event: k,
                request: a.request.id.clone(),
                current: a.current,
                pending: a.pending,
            });
        }

        let mut latencies = Vec::new();
        if !active.is_empty() {
            let epoch = run_epoch(&state, s.horizon_iterations)?;
            bus.makespan_ms += epoch.makespan_ms;
            bus.bytes_moved += epoch.bytes_moved;
            for (a, e) in active.iter().zip(&epoch.gpus) {
                let m = &e.metrics;
                let rep = reports.get_mut(&a.request.id).expect("known request");
                for &(phase, lat, slo) in &e.latencies {
                    let slot = match phase {
                        Phase::Prefill => &mut rep.ttft_ms,
                        Phase::Decode => &mut rep.tpot_ms,
                    };
                    *slot = Some(slot.map_or(lat, |w| w.max(lat)));
                    latencies.push((a.request.id.clone(), phase, lat, slo));
                }
                rep.interval = Some(a.pending);
                rep.host_mem_bytes = Some(rep.host_mem_bytes.unwrap_or(0).max(m.host_mem_bytes));
                rep.throughput_tokens_per_s = Some(
                    rep.throughput_tokens_per_s
                        .map_or(m.throughput_tokens_per_s, |t| t.min(m.throughput_tokens_per_s)),
                );
                let g = gpu_peak.entry(a.id).or_default();
                g.0 = g.0.max(m.gpu_mem_peak_bytes);
                g.1 = g.1.max(m.host_mem_bytes);
            }
            for a in &active {
                on_iteration_boundary(&mut state, a.id)?;
            }
        }
        log.push(EventLog {
            event,
            decision,
            active,
            ledger_total: state.ledger_total(),
            latencies,
        });
    }
    if bus.makespan_ms > 0.0 {
        bus.mean_utilization = bus.bytes_moved / (bus.bandwidth_bytes_per_s * bus.makespan_ms / 1000.0);
    }

    let requests = s
        .requests
        .iter()
        .map(|r| {
            let mut rep = reports.remove(&r.id).expect("known request");
            if rep.verdict != Verdict::Rejected {
                let (a, b) = judged(ls.role(r.gpu));
                rep.judge(a, b);
            }
            rep
        })
        .collect();
    let gpus = s
        .gpus
        .iter()
        .map(|g| {
            let (peak, host) = gpu_peak.get(&g.id).copied().unwrap_or((0, 0));
            GpuReport {
                id: g.id,
                role: g.role,
                gpu_mem_peak_bytes: peak,
                host_mem_bytes: host,
                intervals: history.remove(&g.id).unwrap_or_default(),
            }
        })
        .collect();
    Ok(CoordinateOutput {
        report: Report {
            version: REPORT_VERSION,
            scenario: s.name.clone(),
            command: "coordinate".into(),
            policy: PolicyKind::SelectN.as_str().into(),
            requests,
            gpus,
            bus,
        },
        log,
    })
}

/// `compare`: one CSV row per request and policy with host memory and
/// throughput. Cells of runs that could not happen are empty.
pub fn compare(ls: &LoadedScenario, records: &[Arc<PerformanceRecord>]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "request",
        "policy",
        "interval",
        "portion",
        "host_mem_bytes",
        "throughput_tokens_per_s",
        "ttft_ms",
        "tpot_ms",
        "verdict",
    ])?;
    let cell = |v: Option<String>| v.unwrap_or_default();
    let runs = PolicyKind::ALL
        .into_iter()
        .map(|k| run_policy(ls, records, k).map(|o| (k, o)))
        .collect::<Result<Vec<_>, _>>()?;
    for r in &ls.scenario.requests {
        for (kind, out) in &runs {
            let rep = out.report.requests.iter().find(|x| x.id == r.id).expect("every request reported");
            let ran = rep.verdict != Verdict::Rejected;
            w.write_record([
                r.id.clone(),
                kind.as_str().to_string(),
                cell(rep.interval.map(|i| i.to_string())),
                cell(rep.portion.map(|p| p.to_string())),
                cell(rep.host_mem_bytes.map(|b| b.to_string())),
                cell(rep.throughput_tokens_per_s.map(|t| t.to_string())),
                cell(rep.ttft_ms.map(|t| t.to_string())),
                cell(rep.tpot_ms.map(|t| t.to_string())),
                if ran {
                    serde_json::to_value(rep.verdict)?.as_str().unwrap_or_default().to_string()
                } else if out.unfit.contains(&r.id) {
                    String::new()
                } else {
                    "rejected".into()
                },
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Scenario(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Grid of an `analyze` run. With `slo_ratio` set, each key's SLO is that
/// multiple of the resident latency and `slo_ms` is ignored.
#[derive(Clone, Debug)]
pub struct AnalyzeArgs {
    pub slo_ms: Vec<u32>,
    pub slo_ratio: Option<f64>,
    pub batch: Vec<u32>,
    pub seq_len: Vec<u64>,
    pub phases: Vec<Phase>,
    pub prefetch: PrefetchPolicy,
    pub kv_offload: bool,
    pub bus: BusSpec,
    pub transfer: TransferModel,
    pub prune: bool,
    pub model_id: String,
    pub gpu_id: String,
    pub exec: Execution,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnalyzeStats {
    pub keys: usize,
    pub infeasible: usize,
    pub min_interval: Option<u32>,
    pub max_interval: Option<u32>,
}

impl fmt::Display for AnalyzeStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} entries, {} infeasible", self.keys, self.infeasible)?;
        if let (Some(a), Some(b)) = (self.min_interval, self.max_interval) {
            write!(f, ", intervals {a}..={b}")?;
        }
        Ok(())
    }
}

pub fn analyze(profile: &Profile, args: &AnalyzeArgs) -> Result<(PerformanceRecord, AnalyzeStats), HarnessError> {
    let empty = |name: &str| HarnessError::Usage(format!("--{name} needs at least one value"));
    if args.batch.is_empty() {
        return Err(empty("batch"));
    }
    if args.seq_len.is_empty() {
        return Err(empty("seq"));
    }
    if args.phases.is_empty() {
        return Err(empty("phase"));
    }
    let opts = BuildOptions {
        model_id: args.model_id.clone(),
        gpu_id: args.gpu_id.clone(),
        transfer: args.transfer,
        prune: args.prune,
        exec: args.exec,
        ..BuildOptions::default()
    };
    let record = match args.slo_ratio {
        Some(ratio) => {
            if ratio.is_nan() || ratio <= 0.0 {
                return Err(HarnessError::Usage(format!("--slo-ratio must be > 0, got {ratio}")));
            }
            let mut keys = Vec::new();
            for &phase in &args.phases {
                keys.extend(relative_keys(profile, phase, ratio, &args.batch, &args.seq_len)?);
            }
            build_record_keys(profile, &args.bus, &keys, args.prefetch, args.kv_offload, &opts)?
        }
        None => {
            if args.slo_ms.is_empty() {
                return Err(empty("slo"));
            }
            let grid = RecordGrid {
                slo_ms: args.slo_ms.clone(),
                batch: args.batch.clone(),
                seq_len: args.seq_len.clone(),
            };
            build_record(profile, &args.bus, &grid, &args.phases, args.prefetch, args.kv_offload, &opts)?
        }
    };
    let intervals: Vec<u32> = record.entries.values().filter_map(|e| e.interval().and_then(Interval::value)).collect();
    let stats = AnalyzeStats {
        keys: record.entries.len(),
        infeasible: record.entries.values().filter(|e| **e == RecordEntry::Infeasible).count(),
        min_interval: intervals.iter().copied().min(),
        max_interval: intervals.iter().copied().max(),
    };
    Ok((record, stats))
}
