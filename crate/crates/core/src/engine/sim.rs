//! Event-driven two-stream simulation.
//!
//! Each GPU is a [`Lane`] with a serial compute stream and a serial copy
//! stream. Copy-stream transfers of every lane share one fluid bus: with `k`
//! transfers in flight each progresses at `bandwidth(t) / k`. Rates are
//! piecewise constant between events, so completion times are solved exactly
//! instead of sampled.

use std::collections::VecDeque;

use crate::engine::bandwidth::Bandwidth;
use crate::engine::plan::{OffloadPlan, PrefetchPolicy, TransferModel};
use crate::engine::trace::{sort_events, EventKind, IterationTrace, Stream, TraceEvent};
use crate::engine::metrics::IterationSample;
use crate::profiles::{lookup_compute_time, ModelSpec, Profile};
use crate::error::EngineError;
use crate::Phase;

/// Everything the simulator needs about one iteration.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct IterSpec {
    pub phase: Phase,
    pub layer_ms: f64,
    /// Transfer bytes per layer; zero where the layer is resident.
    pub bytes: Vec<u64>,
    pub offloaded: Vec<bool>,
}

impl IterSpec {
    pub fn new(
        model: &ModelSpec,
        transfer: &TransferModel,
        plan: &OffloadPlan,
        phase: Phase,
        layer_ms: f64,
        batch: u32,
        kv_seq: u64,
    ) -> Self {
        let n = plan.num_layers();
        let offloaded: Vec<bool> = (0..n).map(|j| plan.is_offloaded(j)).collect();
        let bytes = (0..n)
            .map(|j| transfer.layer_transfer_bytes(model, plan, j, batch, kv_seq))
            .collect();
        IterSpec {
            phase,
            layer_ms,
            bytes,
            offloaded,
        }
    }

    fn layers(&self) -> usize {
        self.offloaded.len()
    }
}

/// Where a lane gets its iterations from.
#[derive(Clone, Debug)]
pub(crate) enum Job {
    Finite(Vec<IterSpec>),
    /// `prefix`, then `cycle` repeated forever.
    Cycle {
        prefix: Vec<IterSpec>,
        cycle: Vec<IterSpec>,
    },
    /// Pushed one at a time by [`simulate_iteration`].
    External,
}

impl Job {
    fn get(&self, k: usize) -> Option<&IterSpec> {
        match self {
            Job::Finite(v) => v.get(k),
            Job::Cycle { prefix, cycle } => prefix
                .get(k)
                .or_else(|| cycle.get((k - prefix.len()) % cycle.len())),
            Job::External => None,
        }
    }

    fn is_stream(&self) -> bool {
        matches!(self, Job::Cycle { .. })
    }
}

#[derive(Clone, Debug)]
struct IterState {
    spec: IterSpec,
    compute_end: Vec<Option<f64>>,
    prefetch_end: Vec<Option<f64>>,
    prefetch_started: Vec<bool>,
    end: Option<f64>,
}

impl IterState {
    fn new(spec: IterSpec) -> Self {
        let n = spec.layers();
        IterState {
            spec,
            compute_end: vec![None; n],
            prefetch_end: vec![None; n],
            prefetch_started: vec![false; n],
            end: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TransferKind {
    Prefetch,
    Writeback,
    /// A speculative prefetch whose iteration turned out different. It still
    /// occupies the copy stream and its buffer slot until it lands.
    Orphan,
}

#[derive(Clone, Debug)]
struct Transfer {
    lane: usize,
    kind: TransferKind,
    iteration: usize,
    layer: usize,
    bytes: u64,
    remaining: f64,
    start_ms: f64,
}

#[derive(Clone, Copy, Debug)]
struct Running {
    iteration: usize,
    layer: usize,
    start_ms: f64,
    end_ms: f64,
}

/// One GPU instance: a compute stream and a copy stream.
#[derive(Clone, Debug)]
pub(crate) struct Lane {
    policy: PrefetchPolicy,
    slots: u32,
    writeback: bool,
    job: Job,
    iters: Vec<IterState>,
    start_ms: f64,
    /// Next compute op.
    cursor: (usize, usize),
    running: Option<Running>,
    /// Iterations at or beyond this index may not start computing.
    compute_limit: usize,
    /// Where the search for the next prefetch resumes.
    prefetch_cursor: (usize, usize),
    copy_busy: bool,
    free_slots: u32,
    writebacks: VecDeque<(usize, usize, u64)>,
    completed: usize,
    events: Vec<TraceEvent>,
}

impl Lane {
    pub fn new(policy: PrefetchPolicy, slots: u32, writeback: bool, job: Job, start_ms: f64) -> Self {
        Lane {
            policy,
            slots,
            writeback,
            job,
            iters: Vec::new(),
            start_ms,
            cursor: (0, 0),
            running: None,
            compute_limit: usize::MAX,
            prefetch_cursor: (0, 0),
            copy_busy: false,
            free_slots: slots,
            writebacks: VecDeque::new(),
            completed: 0,
            events: Vec::new(),
        }
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn is_stream(&self) -> bool {
        self.job.is_stream()
    }

    /// True once a finite job has nothing left to compute and its last
    /// writebacks have landed.
    pub fn is_done(&self) -> bool {
        match &self.job {
            Job::Finite(v) => self.completed == v.len() && self.writebacks.is_empty() && !self.copy_busy,
            _ => false,
        }
    }

    fn materialize(&mut self, k: usize) -> bool {
        while self.iters.len() <= k {
            match self.job.get(self.iters.len()) {
                Some(spec) => {
                    let spec = spec.clone();
                    self.iters.push(IterState::new(spec));
                }
                None => return false,
            }
        }
        true
    }

    /// Time the compute stream reaches `(k, j)`, ignoring `j`'s own prefetch.
    fn reach(&self, k: usize, j: usize) -> Option<f64> {
        if j > 0 {
            self.iters[k].compute_end[j - 1]
        } else if k > 0 {
            self.iters[k - 1].end
        } else {
            Some(self.start_ms)
        }
    }

    fn try_start_compute(&mut self, now: f64) -> bool {
        if self.running.is_some() {
            return false;
        }
        let (k, j) = self.cursor;
        if k >= self.compute_limit || !self.materialize(k) {
            return false;
        }
        let it = &self.iters[k];
        if it.spec.offloaded[j] && it.prefetch_end[j].is_none() {
            return false;
        }
        self.running = Some(Running {
            iteration: k,
            layer: j,
            start_ms: now,
            end_ms: now + it.spec.layer_ms,
        });
        self.cursor = if j + 1 == it.spec.layers() {
            (k + 1, 0)
        } else {
            (k, j + 1)
        };
        true
    }

    fn complete_compute(&mut self) {
        let r = self.running.take().expect("compute running");
        let it = &mut self.iters[r.iteration];
        it.compute_end[r.layer] = Some(r.end_ms);
        self.events.push(TraceEvent {
            stream: Stream::Compute,
            layer: r.layer as u32 + 1,
            kind: EventKind::Compute,
            start_ms: r.start_ms,
            end_ms: r.end_ms,
            iteration: r.iteration,
            bytes: 0,
        });
        if it.spec.offloaded[r.layer] {
            if self.writeback {
                self.writebacks
                    .push_back((r.iteration, r.layer, it.spec.bytes[r.layer]));
            } else {
                self.free_slots += 1;
            }
        }
        if r.layer + 1 == it.spec.layers() {
            it.end = Some(r.end_ms);
            self.completed += 1;
        }
    }

    fn next_prefetch(&mut self) -> Option<(usize, usize)> {
        // One iteration of lookahead past the one computing or about to.
        let base = self.running.map_or(self.cursor.0, |r| r.iteration);
        let horizon = base.min(self.compute_limit.saturating_sub(1)) + 1;
        let (mut k, mut j) = self.prefetch_cursor;
        loop {
            if k > horizon || !self.materialize(k) {
                return None;
            }
            let off = &self.iters[k].spec.offloaded;
            if let Some(found) = (j..off.len()).find(|&x| off[x]) {
                self.prefetch_cursor = (k, found);
                return Some((k, found));
            }
            k += 1;
            j = 0;
        }
    }

    fn eligible(&self, k: usize, m: usize, now: f64) -> bool {
        let at = match self.policy {
            PrefetchPolicy::Eager => return true,
            PrefetchPolicy::IntervalStart => {
                let off = &self.iters[k].spec.offloaded;
                let first = (0..m).rev().find(|&x| off[x]).map_or(0, |x| x + 1);
                self.reach(k, first)
            }
            PrefetchPolicy::OneAhead => {
                if m > 0 {
                    self.reach(k, m - 1)
                } else if k > 0 {
                    self.reach(k - 1, self.iters[k - 1].spec.layers() - 1)
                } else {
                    Some(self.start_ms)
                }
            }
        };
        at.is_some_and(|t| t <= now)
    }

    fn try_start_copy(&mut self, now: f64, lane: usize, bus: &mut Vec<Transfer>) -> bool {
        if self.copy_busy {
            return false;
        }
        if let Some((k, j, bytes)) = self.writebacks.pop_front() {
            self.copy_busy = true;
            bus.push(Transfer {
                lane,
                kind: TransferKind::Writeback,
                iteration: k,
                layer: j,
                bytes,
                remaining: bytes as f64,
                start_ms: now,
            });
            return true;
        }
        if self.free_slots == 0 {
            return false;
        }
        let Some((k, j)) = self.next_prefetch() else {
            return false;
        };
        if !self.eligible(k, j, now) {
            return false;
        }
        self.free_slots -= 1;
        self.prefetch_cursor = (k, j + 1);
        self.iters[k].prefetch_started[j] = true;
        let bytes = self.iters[k].spec.bytes[j];
        let t = Transfer {
            lane,
            kind: TransferKind::Prefetch,
            iteration: k,
            layer: j,
            bytes,
            remaining: bytes as f64,
            start_ms: now,
        };
        self.copy_busy = true;
        if bytes == 0 {
            self.complete_transfer(&t, now);
        } else {
            bus.push(t);
        }
        true
    }

    fn complete_transfer(&mut self, t: &Transfer, now: f64) {
        self.copy_busy = false;
        let kind = match t.kind {
            TransferKind::Prefetch => {
                self.iters[t.iteration].prefetch_end[t.layer] = Some(now);
                EventKind::Prefetch
            }
            TransferKind::Writeback => {
                self.free_slots += 1;
                EventKind::Writeback
            }
            TransferKind::Orphan => {
                self.free_slots += 1;
                return;
            }
        };
        self.events.push(TraceEvent {
            stream: Stream::Copy,
            layer: t.layer as u32 + 1,
            kind,
            start_ms: t.start_ms,
            end_ms: now,
            iteration: t.iteration,
            bytes: t.bytes,
        });
    }

    /// Completed iterations as metric samples.
    pub fn samples(&self) -> Vec<IterationSample> {
        (0..self.completed)
            .map(|k| {
                let it = &self.iters[k];
                let begin = self.reach(k, 0).expect("completed iteration has a start");
                let one_way: u64 = it.spec.bytes.iter().sum();
                IterationSample {
                    phase: it.spec.phase,
                    duration_ms: it.end.expect("completed") - begin,
                    bytes: if self.writeback { 2 * one_way } else { one_way },
                }
            })
            .collect()
    }

    pub fn trace(&self) -> IterationTrace {
        IterationTrace::new(self.events.clone())
    }
}

/// Instantaneous bus state between two events.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UtilSample {
    pub t_ms: f64,
    pub active_transfers: u32,
    pub bytes_per_s: f64,
}

/// A set of lanes sharing one bus.
pub(crate) struct Sim<'a> {
    pub lanes: Vec<Lane>,
    bus: Vec<Transfer>,
    bw: &'a dyn Bandwidth,
    pub now: f64,
    pub util: Vec<UtilSample>,
    pub bytes_moved: f64,
}

impl<'a> Sim<'a> {
    pub fn new(lanes: Vec<Lane>, bw: &'a dyn Bandwidth, now: f64) -> Self {
        Sim {
            lanes,
            bus: Vec::new(),
            bw,
            now,
            util: Vec::new(),
            bytes_moved: 0.0,
        }
    }

    fn settle(&mut self) {
        let now = self.now;
        loop {
            let mut progressed = false;
            for (i, lane) in self.lanes.iter_mut().enumerate() {
                while lane.try_start_compute(now) | lane.try_start_copy(now, i, &mut self.bus) {
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }

    /// Per-transfer rate in bytes per millisecond.
    fn share(&self) -> f64 {
        self.bw.rate_at(self.now) / 1000.0 / self.bus.len() as f64
    }

    fn next_event(&self) -> f64 {
        let mut t = f64::INFINITY;
        for lane in &self.lanes {
            if let Some(r) = lane.running {
                t = t.min(r.end_ms);
            }
        }
        if !self.bus.is_empty() {
            let share = self.share();
            for tr in &self.bus {
                t = t.min(self.now + tr.remaining / share);
            }
            if let Some(c) = self.bw.next_change_after(self.now) {
                t = t.min(c);
            }
        }
        t
    }

    fn record_util(&mut self) {
        let active = self.bus.len() as u32;
        let rate = if active > 0 { self.bw.rate_at(self.now) } else { 0.0 };
        let changed = self
            .util
            .last()
            .is_none_or(|u| u.active_transfers != active || u.bytes_per_s != rate);
        if changed {
            self.util.push(UtilSample {
                t_ms: self.now,
                active_transfers: active,
                bytes_per_s: rate,
            });
        }
    }

    fn advance(&mut self, t: f64) {
        self.record_util();
        if !self.bus.is_empty() {
            let share = self.share();
            let dt = t - self.now;
            let mut done = Vec::new();
            let mut kept = Vec::with_capacity(self.bus.len());
            for mut tr in self.bus.drain(..) {
                let lands = self.now + tr.remaining / share <= t
                    || tr.remaining - share * dt <= 1e-9 * (tr.bytes.max(1) as f64);
                if lands {
                    self.bytes_moved += tr.remaining;
                    done.push(tr);
                } else {
                    self.bytes_moved += share * dt;
                    tr.remaining -= share * dt;
                    kept.push(tr);
                }
            }
            self.bus = kept;
            for tr in done {
                self.lanes[tr.lane].complete_transfer(&tr, t);
            }
        }
        self.now = t;
        for lane in &mut self.lanes {
            if lane.running.is_some_and(|r| r.end_ms <= t) {
                lane.complete_compute();
            }
        }
    }

    /// Runs until `stop` holds after the streams have settled.
    pub fn run(&mut self, mut stop: impl FnMut(&Sim) -> bool) {
        loop {
            self.settle();
            if stop(self) {
                self.record_util();
                return;
            }
            let t = self.next_event();
            assert!(
                t.is_finite(),
                "simulation stalled at {} ms with work pending",
                self.now
            );
            self.advance(t);
        }
    }
}

/// Copy-stream state carried from one [`simulate_iteration`] call to the next.
///
/// Under the eager and one-ahead policies the copy stream may start fetching
/// the next iteration's layers before the current one ends. The carry assumes
/// the next iteration repeats the current plan as a decode step one token
/// longer; a different next iteration keeps the transfers that still match and
/// abandons the rest.
#[derive(Default)]
pub struct Carry {
    lane: Option<Lane>,
    bus: Vec<Transfer>,
    now: f64,
}

impl Carry {
    /// Time at which the next iteration starts.
    pub fn now_ms(&self) -> f64 {
        self.now
    }
}

/// Model state and transfer accounting for one GPU.
#[derive(Clone, Copy, Debug)]
pub struct Instance<'a> {
    pub profile: &'a Profile,
    pub transfer: TransferModel,
}

impl<'a> Instance<'a> {
    pub fn new(profile: &'a Profile) -> Self {
        Instance {
            profile,
            transfer: TransferModel::default(),
        }
    }

    pub fn with_transfer(profile: &'a Profile, transfer: TransferModel) -> Self {
        Instance { profile, transfer }
    }

    fn model(&self) -> &ModelSpec {
        &self.profile.model
    }
}

/// Simulates one iteration starting where `carry` left off.
///
/// Returns the compute-stream makespan of this iteration and its events.
pub fn simulate_iteration(
    inst: Instance<'_>,
    plan: &OffloadPlan,
    phase: Phase,
    batch: u32,
    seq_len: u64,
    bandwidth: &dyn Bandwidth,
    carry: &mut Carry,
) -> Result<(f64, IterationTrace), EngineError> {
    plan.validate(inst.model())?;
    let layer_ms = lookup_compute_time(&inst.profile.latency, phase, batch, seq_len)?;
    let spec = IterSpec::new(inst.model(), &inst.transfer, plan, phase, layer_ms, batch, seq_len);
    let writeback = inst.transfer.writeback_counted;
    let mut lane = match carry.lane.take() {
        Some(lane) => {
            if lane.policy != plan.prefetch_policy
                || lane.slots != plan.buffer_slots
                || lane.writeback != writeback
            {
                carry.lane = Some(lane);
                return Err(EngineError::InvalidPlan(
                    "carry was produced under a different policy, slot count or writeback mode"
                        .into(),
                ));
            }
            lane
        }
        None => Lane::new(
            plan.prefetch_policy,
            plan.buffer_slots,
            writeback,
            Job::External,
            carry.now,
        ),
    };
    let k = lane.completed;
    if lane.iters.len() > k {
        reconcile(&mut lane, &mut carry.bus, k, spec.clone());
    } else {
        lane.iters.push(IterState::new(spec.clone()));
    }
    let guess = IterSpec::new(inst.model(), &inst.transfer, plan, Phase::Decode, layer_ms, batch, seq_len + 1);
    lane.iters.push(IterState::new(guess));
    lane.compute_limit = k + 1;

    let mut sim = Sim::new(vec![lane], bandwidth, carry.now);
    sim.bus = std::mem::take(&mut carry.bus);
    sim.run(|s| s.lanes[0].iters[k].end.is_some());
    let begin = sim.lanes[0].reach(k, 0).expect("iteration started");
    let end = sim.lanes[0].iters[k].end.expect("iteration finished");
    let mut events: Vec<TraceEvent> = sim.lanes[0]
        .events
        .iter()
        .filter(|e| e.iteration == k)
        .cloned()
        .collect();
    sort_events(&mut events);
    sim.lanes[0].events.retain(|e| e.iteration > k);
    carry.now = sim.now;
    carry.bus = std::mem::take(&mut sim.bus);
    carry.lane = sim.lanes.pop();
    Ok((end - begin, IterationTrace { events }))
}

/// Swaps a speculative iteration for the real one, keeping in-flight or landed
/// prefetches that still apply.
fn reconcile(lane: &mut Lane, bus: &mut [Transfer], k: usize, actual: IterSpec) {
    let old = &lane.iters[k];
    if old.spec == actual {
        return;
    }
    let started: Vec<usize> = (0..old.spec.layers())
        .filter(|&j| old.prefetch_started[j])
        .collect();
    let wanted: Vec<usize> = (0..actual.layers()).filter(|&j| actual.offloaded[j]).collect();
    let keep = started
        .iter()
        .zip(&wanted)
        .take_while(|(a, b)| a == b && old.spec.bytes[**a] == actual.bytes[**b])
        .count();
    let mut fresh = IterState::new(actual);
    for &j in &started[..keep] {
        fresh.prefetch_started[j] = true;
        fresh.prefetch_end[j] = old.prefetch_end[j];
    }
    for &j in &started[keep..] {
        if old.prefetch_end[j].is_some() {
            lane.free_slots += 1;
        } else if let Some(t) = bus
            .iter_mut()
            .find(|t| t.iteration == k && t.layer == j && t.kind == TransferKind::Prefetch)
        {
            t.kind = TransferKind::Orphan;
        }
    }
    lane.events.retain(|e| !(e.iteration == k && started[keep..].contains(&(e.layer as usize - 1))));
    lane.prefetch_cursor = (k, started[..keep].last().map_or(0, |&j| j + 1));
    lane.iters[k] = fresh;
}

/// Batch, prompt and output lengths of a request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RequestShape {
    pub batch: u32,
    pub seq_len: u64,
    pub output_len: u64,
}

impl RequestShape {
    /// Cached tokens at the end of the request.
    pub fn total_tokens(&self) -> u64 {
        u64::from(self.batch) * (self.seq_len + self.output_len)
    }
}

/// Prefill, then `output_len - 1` decode steps. Decode compute is looked up at
/// the prompt length; KV transfer bytes follow the growing context.
pub(crate) fn request_iterations(
    inst: Instance<'_>,
    plan: &OffloadPlan,
    req: RequestShape,
) -> Result<Vec<IterSpec>, EngineError> {
    check_request(inst, plan, req)?;
    check_capacity(inst, plan, req)?;
    shape_iterations(inst, plan, req)
}

fn shape_iterations(
    inst: Instance<'_>,
    plan: &OffloadPlan,
    req: RequestShape,
) -> Result<Vec<IterSpec>, EngineError> {
    let lat = &inst.profile.latency;
    let prefill_ms = lookup_compute_time(lat, Phase::Prefill, req.batch, req.seq_len)?;
    let mut v = vec![IterSpec::new(
        inst.model(),
        &inst.transfer,
        plan,
        Phase::Prefill,
        prefill_ms,
        req.batch,
        req.seq_len,
    )];
    if req.output_len > 1 {
        let decode_ms = lookup_compute_time(lat, Phase::Decode, req.batch, req.seq_len)?;
        for d in 1..req.output_len {
            v.push(IterSpec::new(
                inst.model(),
                &inst.transfer,
                plan,
                Phase::Decode,
                decode_ms,
                req.batch,
                req.seq_len + d,
            ));
        }
    }
    Ok(v)
}

fn check_request(inst: Instance<'_>, plan: &OffloadPlan, req: RequestShape) -> Result<(), EngineError> {
    let model = inst.model();
    plan.validate(model)?;
    if req.output_len == 0 {
        return Err(EngineError::ZeroOutput);
    }
    let tokens = req.seq_len + req.output_len;
    if tokens > model.max_position_tokens {
        return Err(EngineError::TooLong {
            tokens,
            limit: model.max_position_tokens,
        });
    }
    Ok(())
}

fn check_capacity(inst: Instance<'_>, plan: &OffloadPlan, req: RequestShape) -> Result<(), EngineError> {
    let model = inst.model();
    let needed = crate::engine::memory::gpu_memory_usage(
        model,
        &inst.profile.gpu,
        plan,
        req.batch,
        req.total_tokens(),
    );
    let capacity = inst.profile.gpu.mem_capacity_bytes;
    if needed > capacity {
        return Err(EngineError::DoesNotFit { needed, capacity });
    }
    Ok(())
}

fn lane_metrics(
    inst: Instance<'_>,
    plan: &OffloadPlan,
    req: RequestShape,
    lane: &Lane,
) -> crate::engine::Metrics {
    let model = inst.model();
    let peak = crate::engine::memory::gpu_memory_usage(
        model,
        &inst.profile.gpu,
        plan,
        req.batch,
        req.total_tokens(),
    );
    crate::engine::Metrics::from_samples(
        lane.samples(),
        req.batch,
        peak,
        plan.host_bytes(model, req.total_tokens()),
    )
}

/// Like [`simulate_request`] but without the capacity check, for latency
/// searches where capacity bounds the answer separately.
pub(crate) fn probe_latency(
    inst: Instance<'_>,
    plan: &OffloadPlan,
    req: RequestShape,
    bandwidth: &dyn Bandwidth,
) -> Result<crate::engine::Metrics, EngineError> {
    check_request(inst, plan, req)?;
    run_alone(inst, plan, req, shape_iterations(inst, plan, req)?, bandwidth).map(|(m, _)| m)
}

fn run_alone(
    inst: Instance<'_>,
    plan: &OffloadPlan,
    req: RequestShape,
    iters: Vec<IterSpec>,
    bandwidth: &dyn Bandwidth,
) -> Result<(crate::engine::Metrics, IterationTrace), EngineError> {
    let lane = Lane::new(
        plan.prefetch_policy,
        plan.buffer_slots,
        inst.transfer.writeback_counted,
        Job::Finite(iters),
        0.0,
    );
    let mut sim = Sim::new(vec![lane], bandwidth, 0.0);
    sim.run(|s| s.lanes[0].is_done());
    let lane = &sim.lanes[0];
    Ok((lane_metrics(inst, plan, req, lane), lane.trace()))
}

/// Runs a whole request alone on a bus with the given bandwidth.
pub fn simulate_request(
    inst: Instance<'_>,
    plan: &OffloadPlan,
    req: RequestShape,
    bandwidth: &dyn Bandwidth,
) -> Result<crate::engine::Metrics, EngineError> {
    simulate_request_traced(inst, plan, req, bandwidth).map(|(m, _)| m)
}

pub fn simulate_request_traced(
    inst: Instance<'_>,
    plan: &OffloadPlan,
    req: RequestShape,
    bandwidth: &dyn Bandwidth,
) -> Result<(crate::engine::Metrics, IterationTrace), EngineError> {
    let iters = request_iterations(inst, plan, req)?;
    run_alone(inst, plan, req, iters, bandwidth)
}

/// What a GPU on a shared bus runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobMode {
    /// The request once: prefill then decode, then the GPU goes quiet.
    Full,
    /// Back-to-back prefill iterations of the request's prompt.
    PrefillStream,
    /// Back-to-back decode iterations at the request's final context length.
    DecodeStream,
    /// The full request, repeated.
    FullStream,
}

/// A plan change applied from iteration `at_iteration` on.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanSwitch {
    pub at_iteration: usize,
    pub plan: OffloadPlan,
}

#[derive(Clone, Debug)]
pub struct BusJob<'a> {
    pub inst: Instance<'a>,
    pub plan: OffloadPlan,
    pub request: RequestShape,
    pub mode: JobMode,
    pub switch: Option<PlanSwitch>,
}

#[derive(Clone, Debug)]
pub struct BusOutcome {
    pub metrics: Vec<crate::engine::Metrics>,
    pub traces: Vec<IterationTrace>,
    pub utilization: Vec<UtilSample>,
    pub makespan_ms: f64,
    pub bytes_moved: f64,
}

impl BusOutcome {
    /// Mean fraction of the bus capacity in use over the run.
    pub fn mean_utilization(&self, bandwidth_bytes_per_s: f64) -> f64 {
        if self.makespan_ms <= 0.0 {
            return 0.0;
        }
        self.bytes_moved / (bandwidth_bytes_per_s * self.makespan_ms / 1000.0)
    }
}

fn job_for(j: &BusJob<'_>) -> Result<Job, EngineError> {
    let shape = |v: Vec<IterSpec>| -> Result<Vec<IterSpec>, EngineError> {
        match j.mode {
            JobMode::Full | JobMode::FullStream => Ok(v),
            JobMode::PrefillStream => Ok(vec![v[0].clone()]),
            JobMode::DecodeStream => v
                .into_iter()
                .rev()
                .find(|s| s.phase == Phase::Decode)
                .map(|s| vec![s])
                .ok_or(EngineError::InvalidPlan(
                    "a decode stream needs output_len >= 2".into(),
                )),
        }
    };
    let cycle = shape(request_iterations(j.inst, &j.plan, j.request)?)?;
    let switched = match &j.switch {
        Some(s) => {
            if s.plan.prefetch_policy != j.plan.prefetch_policy
                || s.plan.buffer_slots != j.plan.buffer_slots
            {
                return Err(EngineError::InvalidPlan(
                    "a plan switch must keep the prefetch policy and slot count".into(),
                ));
            }
            Some((s.at_iteration, shape(request_iterations(j.inst, &s.plan, j.request)?)?))
        }
        None => None,
    };
    Ok(match (j.mode, switched) {
        (JobMode::Full, None) => Job::Finite(cycle),
        (JobMode::Full, Some((at, next))) => Job::Finite(
            cycle
                .into_iter()
                .zip(next)
                .enumerate()
                .map(|(k, (old, new))| if k < at { old } else { new })
                .collect(),
        ),
        (_, switched) => stream_job(cycle, switched),
    })
}

fn stream_job(cycle: Vec<IterSpec>, switch: Option<(usize, Vec<IterSpec>)>) -> Job {
    match switch {
        None => Job::Cycle {
            prefix: Vec::new(),
            cycle,
        },
        Some((at, next)) => Job::Cycle {
            prefix: (0..at).map(|k| cycle[k % cycle.len()].clone()).collect(),
            cycle: next,
        },
    }
}

/// Runs several GPUs on one bus with fluid sharing.
///
/// Full jobs run to completion. Stream jobs keep iterating until every stream
/// has completed at least `horizon_iterations` and every full job is done, so
/// each stream sees contention for its whole measured window.
pub fn simulate_bus(
    jobs: &[BusJob<'_>],
    bandwidth: &dyn Bandwidth,
    horizon_iterations: usize,
) -> Result<BusOutcome, EngineError> {
    if jobs.is_empty() {
        return Err(EngineError::InvalidPlan("simulate_bus needs at least one GPU".into()));
    }
    let mut lanes = Vec::with_capacity(jobs.len());
    for j in jobs {
        lanes.push(Lane::new(
            j.plan.prefetch_policy,
            j.plan.buffer_slots,
            j.inst.transfer.writeback_counted,
            job_for(j)?,
            0.0,
        ));
    }
    let horizon = horizon_iterations.max(1);
    let mut sim = Sim::new(lanes, bandwidth, 0.0);
    sim.run(|s| {
        s.lanes
            .iter()
            .all(|l| l.is_done() || (l.is_stream() && l.completed() >= horizon))
    });
    let metrics = jobs
        .iter()
        .zip(&sim.lanes)
        .map(|(j, lane)| lane_metrics(j.inst, &j.plan, j.request, lane))
        .collect();
    let traces = sim.lanes.iter().map(Lane::trace).collect();
    Ok(BusOutcome {
        metrics,
        traces,
        utilization: sim.util.clone(),
        makespan_ms: sim.now,
        bytes_moved: sim.bytes_moved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Constant, STEADY_WINDOW};
    use crate::fixtures::{fig2b, tp1};
    use crate::interval::{plan_from_interval, Interval};

    fn bw24() -> Constant {
        Constant::new(24e9).unwrap()
    }

    fn plan(p: &Profile, i: u32, policy: PrefetchPolicy) -> OffloadPlan {
        plan_from_interval(&p.model, Interval::Every(i), policy, false)
    }

    fn first_decode(p: &Profile, plan: &OffloadPlan) -> (f64, IterationTrace) {
        let mut carry = Carry::default();
        simulate_iteration(Instance::new(p), plan, Phase::Decode, 8, 64, &bw24(), &mut carry).unwrap()
    }

    fn req(out: u64) -> RequestShape {
        RequestShape {
            batch: 8,
            seq_len: 64,
            output_len: out,
        }
    }

    #[test]
    fn tp1_interval_four_hides_both_transfers() {
        let p = tp1();
        let (d, trace) = first_decode(&p, &plan(&p, 4, PrefetchPolicy::IntervalStart));
        assert_eq!(d, 16.0);
        trace.check().unwrap();
        let spans: Vec<(u32, f64, f64)> = trace
            .copy_events()
            .map(|e| (e.layer, e.start_ms, e.end_ms))
            .collect();
        assert_eq!(spans, [(4, 0.0, 5.0), (8, 8.0, 13.0)]);
        let l8 = trace.compute_events().find(|e| e.layer == 8).unwrap();
        assert_eq!((l8.start_ms, l8.end_ms), (14.0, 16.0));
    }

    #[test]
    fn tp1_interval_start_durations() {
        let p = tp1();
        for (i, want) in [(3, 18.0), (2, 28.0), (1, 56.0)] {
            let (d, t) = first_decode(&p, &plan(&p, i, PrefetchPolicy::IntervalStart));
            assert_eq!(d, want, "interval {i}");
            t.check().unwrap();
        }
        let none = OffloadPlan::resident(8, PrefetchPolicy::IntervalStart, false);
        let (d, t) = first_decode(&p, &none);
        assert_eq!(d, 16.0);
        assert_eq!(t.copy_events().count(), 0);
    }

    #[test]
    fn tp1_requests() {
        let p = tp1();
        let inst = Instance::new(&p);
        let m = simulate_request(inst, &plan(&p, 3, PrefetchPolicy::IntervalStart), req(50), &bw24()).unwrap();
        assert_eq!(m.steady_tpot_ms, Some(18.0));
        let none = OffloadPlan::resident(8, PrefetchPolicy::IntervalStart, false);
        let m = simulate_request(inst, &none, req(50), &bw24()).unwrap();
        assert_eq!(m.tpot_ms, Some(16.0));
        assert_eq!(m.bytes_transferred_per_iter, 0);
        let eager = plan(&p, 2, PrefetchPolicy::Eager);
        assert_eq!(eager.buffer_slots, 2);
        let (m, trace) = simulate_request_traced(inst, &eager, req(50), &bw24()).unwrap();
        assert_eq!(m.steady_tpot_ms, Some(20.0));
        assert_eq!(m.bytes_transferred_per_iter, 480_000_000);
        trace.check().unwrap();
    }

    #[test]
    fn eager_crosses_iteration_boundaries() {
        let p = tp1();
        let eager = plan(&p, 2, PrefetchPolicy::Eager);
        let mut carry = Carry::default();
        let inst = Instance::new(&p);
        let mut durations = Vec::new();
        for _ in 0..4 {
            let (d, t) =
                simulate_iteration(inst, &eager, Phase::Decode, 8, 64, &bw24(), &mut carry).unwrap();
            t.check().unwrap();
            durations.push(d);
        }
        assert_eq!(durations, [22.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn chained_iterations_match_a_request() {
        let p = tp1();
        let inst = Instance::new(&p);
        for policy in [PrefetchPolicy::IntervalStart, PrefetchPolicy::Eager, PrefetchPolicy::OneAhead] {
            for i in 1..=8 {
                let pl = plan(&p, i, policy);
                let m = simulate_request(inst, &pl, req(20), &bw24()).unwrap();
                let mut carry = Carry::default();
                let mut chained = Vec::new();
                let (d, _) =
                    simulate_iteration(inst, &pl, Phase::Prefill, 8, 64, &bw24(), &mut carry).unwrap();
                chained.push(d);
                for _ in 1..20 {
                    let (d, _) =
                        simulate_iteration(inst, &pl, Phase::Decode, 8, 64, &bw24(), &mut carry).unwrap();
                    chained.push(d);
                }
                let direct: Vec<f64> = m.iterations.iter().map(|s| s.duration_ms).collect();
                assert_eq!(direct, chained, "{policy:?} interval {i}");
            }
        }
    }

    #[test]
    fn mismatched_speculation_is_reconciled() {
        let p = tp1();
        let inst = Instance::new(&p);
        let mut carry = Carry::default();
        let a = plan(&p, 2, PrefetchPolicy::Eager);
        let b = plan(&p, 4, PrefetchPolicy::Eager);
        let bw = bw24();
        simulate_iteration(inst, &a, Phase::Decode, 8, 64, &bw, &mut carry).unwrap();
        // The carry speculated interval 2 (layer 2 and 4 first); interval 4
        // keeps nothing of that prefix beyond what matches.
        let (d, t) = simulate_iteration(inst, &b, Phase::Decode, 8, 64, &bw, &mut carry).unwrap();
        t.check().unwrap();
        assert!(d >= 16.0);
        let layers: Vec<u32> = t.copy_events().map(|e| e.layer).collect();
        assert_eq!(layers, [4, 8]);
        let (d, _) = simulate_iteration(inst, &b, Phase::Decode, 8, 64, &bw, &mut carry).unwrap();
        assert_eq!(d, 16.0);
        let wrong = plan(&p, 4, PrefetchPolicy::IntervalStart);
        assert!(simulate_iteration(inst, &wrong, Phase::Decode, 8, 64, &bw, &mut carry).is_err());
    }

    #[test]
    fn deepspeed_period_is_the_transfer_time() {
        let p = fig2b();
        let all = plan_from_interval(&p.model, Interval::Every(1), PrefetchPolicy::OneAhead, false);
        let bw = Constant::new(24e9).unwrap();
        let r = RequestShape {
            batch: 1,
            seq_len: 64,
            output_len: 40,
        };
        let m = simulate_request(Instance::new(&p), &all, r, &bw).unwrap();
        let steady = m.steady_tpot_ms.unwrap();
        let per_layer = steady / 40.0;
        assert!((per_layer - 18.128).abs() < 1e-6, "{per_layer}");
    }

    #[test]
    fn writebacks_share_the_bus_when_counted() {
        let p = tp1();
        let inst = Instance::with_transfer(
            &p,
            TransferModel {
                writeback_counted: true,
            },
        );
        let pl = plan(&p, 4, PrefetchPolicy::IntervalStart);
        let (m, t) = simulate_request_traced(inst, &pl, req(10), &bw24()).unwrap();
        t.check().unwrap();
        assert_eq!(m.bytes_transferred_per_iter, 480_000_000);
        assert!(t.events.iter().any(|e| e.kind == EventKind::Writeback));
        for k in 0..m.iterations.len() {
            assert_eq!(t.copy_bytes(k), 480_000_000);
        }
    }

    #[test]
    fn trace_bytes_match_the_transfer_model() {
        let mut p = tp1();
        p.model.kv_bytes_per_token_per_layer = 4096;
        let pl = plan_from_interval(&p.model, Interval::Every(3), PrefetchPolicy::Eager, true);
        let tm = TransferModel::default();
        let (m, t) = simulate_request_traced(Instance::new(&p), &pl, req(30), &bw24()).unwrap();
        for (k, s) in m.iterations.iter().enumerate() {
            assert_eq!(t.copy_bytes(k), s.bytes);
        }
        let last_ctx = 64 + 29;
        assert_eq!(
            m.bytes_transferred_per_iter,
            tm.bytes_per_iteration(&p.model, &pl, 8, last_ctx)
        );
    }

    #[test]
    fn request_errors() {
        let p = tp1();
        let inst = Instance::new(&p);
        let pl = plan(&p, 4, PrefetchPolicy::IntervalStart);
        assert!(matches!(
            simulate_request(inst, &pl, req(0), &bw24()),
            Err(EngineError::ZeroOutput)
        ));
        let long = RequestShape {
            batch: 1,
            seq_len: 64,
            output_len: 5000,
        };
        assert!(matches!(
            simulate_request(inst, &pl, long, &bw24()),
            Err(EngineError::TooLong { .. })
        ));
        let mut small = tp1();
        small.gpu.mem_capacity_bytes = 2_000_000_000;
        let none = OffloadPlan::resident(8, PrefetchPolicy::IntervalStart, false);
        assert!(matches!(
            simulate_request(Instance::new(&small), &none, req(4), &bw24()),
            Err(EngineError::DoesNotFit { .. })
        ));
    }

    #[test]
    fn single_gpu_bus_matches_request() {
        let p = tp1();
        let inst = Instance::new(&p);
        let pl = plan(&p, 2, PrefetchPolicy::Eager);
        let alone = simulate_request(inst, &pl, req(30), &bw24()).unwrap();
        let job = BusJob {
            inst,
            plan: pl,
            request: req(30),
            mode: JobMode::Full,
            switch: None,
        };
        let out = simulate_bus(&[job], &bw24(), 1).unwrap();
        assert_eq!(out.metrics[0], alone);
    }

    #[test]
    fn two_synchronized_eager_gpus_at_interval_three_meet_twenty() {
        let p = tp1();
        let inst = Instance::new(&p);
        let job = BusJob {
            inst,
            plan: plan(&p, 3, PrefetchPolicy::Eager),
            request: req(50),
            mode: JobMode::DecodeStream,
            switch: None,
        };
        let out = simulate_bus(&[job.clone(), job], &bw24(), 48).unwrap();
        for m in &out.metrics {
            let s = m.steady_tpot_ms.unwrap();
            assert!(s <= 20.0 + 1e-9, "{s}");
        }
        for t in &out.traces {
            t.check().unwrap();
        }
        assert!(out.utilization.iter().all(|u| u.bytes_per_s <= 24e9));
    }

    #[test]
    fn disjoint_transfers_see_full_bandwidth() {
        let p = tp1();
        let inst = Instance::new(&p);
        let only = |layer: usize, policy| {
            let mut pl = OffloadPlan::resident(8, policy, false);
            pl.per_layer_host_fraction[layer] = 1.0;
            pl
        };
        // GPU A fetches layer 4 at the start of each iteration; GPU B fetches
        // layer 8 once layer 7 is reached, 12 ms in.
        let a = BusJob {
            inst,
            plan: only(3, PrefetchPolicy::IntervalStart),
            request: req(1),
            mode: JobMode::Full,
            switch: None,
        };
        let b = BusJob {
            plan: only(7, PrefetchPolicy::OneAhead),
            ..a.clone()
        };
        let out = simulate_bus(&[a, b], &bw24(), 1).unwrap();
        assert!(out.utilization.iter().all(|u| u.active_transfers <= 1));
        for t in &out.traces {
            assert!(t.copy_events().all(|e| e.end_ms - e.start_ms == 5.0));
        }
        assert_eq!(out.metrics[0].ttft_ms, Some(16.0));
        // B's layer 8 lands at 17 ms, 3 ms after layer 7 finished.
        assert_eq!(out.metrics[1].ttft_ms, Some(19.0));
    }

    #[test]
    fn overlapping_transfers_split_the_bus() {
        let p = tp1();
        let job = BusJob {
            inst: Instance::new(&p),
            plan: plan(&p, 8, PrefetchPolicy::IntervalStart),
            request: req(1),
            mode: JobMode::Full,
            switch: None,
        };
        let out = simulate_bus(&[job.clone(), job], &bw24(), 1).unwrap();
        for t in &out.traces {
            let e = t.copy_events().next().unwrap();
            assert_eq!((e.start_ms, e.end_ms), (0.0, 10.0));
        }
        assert_eq!(out.utilization[0].active_transfers, 2);
    }

    #[test]
    fn plan_switch_happens_between_iterations() {
        let p = tp1();
        let inst = Instance::new(&p);
        let job = BusJob {
            inst,
            plan: plan(&p, 2, PrefetchPolicy::Eager),
            request: req(STEADY_WINDOW as u64),
            mode: JobMode::DecodeStream,
            switch: Some(PlanSwitch {
                at_iteration: 1,
                plan: plan(&p, 4, PrefetchPolicy::Eager),
            }),
        };
        let out = simulate_bus(&[job], &bw24(), 6).unwrap();
        let t = &out.traces[0];
        let layers_of = |k: usize| -> Vec<u32> {
            t.events
                .iter()
                .filter(|e| e.iteration == k && e.kind == EventKind::Prefetch)
                .map(|e| e.layer)
                .collect()
        };
        assert_eq!(layers_of(0), [2, 4, 6, 8]);
        assert_eq!(layers_of(1), [4, 8]);
        assert_eq!(layers_of(5), [4, 8]);
    }

    #[test]
    fn piecewise_bandwidth_integrates_exactly() {
        let p = tp1();
        let pl = plan(&p, 8, PrefetchPolicy::IntervalStart);
        // 12 GB/s for the first 5 ms then 24 GB/s: 60 MB land by 5 ms and the
        // remaining 60 MB take 2.5 ms more.
        let bw = crate::engine::Piecewise::new(vec![(0.0, 12e9), (5.0, 24e9)]).unwrap();
        let mut carry = Carry::default();
        let (_, t) =
            simulate_iteration(Instance::new(&p), &pl, Phase::Decode, 8, 64, &bw, &mut carry).unwrap();
        let e = t.copy_events().next().unwrap();
        assert_eq!((e.start_ms, e.end_ms), (0.0, 7.5));
    }
}
