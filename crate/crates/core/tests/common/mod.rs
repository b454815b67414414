//! Random bus scenarios and an exhaustive oracle for the coordinator.
//!
//! The oracle does not call into the coordinator's selection code. It derives
//! each GPU's interval range from the record and the memory bound, enumerates
//! every combination, applies the ledger sum, and co-simulates the survivors on
//! the fluid bus itself.

#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use offload_core::coordinator::{
    admit, on_iteration_boundary, release, run_epoch, BusState, Decision, GpuRole, RequestSpec,
};
use offload_core::engine::{simulate_bus, BusJob, Constant, Instance, JobMode, PlanSwitch, RequestShape};
use offload_core::harness::scenario::Event;
use offload_core::harness::{bus_state, parse_scenario, records_for, resolve_request, LoadedScenario};
use offload_core::profiles::{PhaseFlops, PhaseTable, TableEntry};
use offload_core::{
    lookup_interval, max_feasible_interval, plan_from_interval, GpuSpec, Interval, LatencyProfile,
    ModelSpec, PerformanceRecord, Phase, Profile,
};

pub const BATCHES: [u32; 4] = [1, 2, 4, 8];
pub const SEQS: [u64; 2] = [64, 128];

fn random_profile(rng: &mut ChaCha8Rng) -> Profile {
    let l: u32 = rng.gen_range(4..=12);
    let w: u64 = rng.gen_range(4..=24) * 10_000_000;
    let kv: u64 = rng.gen_range(1..=20) * 1000;
    let decode = f64::from(rng.gen_range(2u32..=16)) * 0.25;
    let slope = f64::from(rng.gen_range(0u32..=4)) * 0.05;
    let workspace = 200_000_000;
    let fraction = rng.gen_range(0.3..1.4);
    let capacity = workspace + (f64::from(l) * w as f64 * fraction) as u64 + 100_000_000;
    let table = |phase: Phase| {
        let mut entries = Vec::new();
        for b in BATCHES {
            for s in SEQS {
                let d = decode + slope * f64::from(b);
                let t = match phase {
                    Phase::Decode => d,
                    Phase::Prefill => d * (f64::from(b) * s as f64 / 256.0).max(1.0),
                };
                entries.push(TableEntry {
                    batch: b,
                    seq_len: s,
                    layer_compute_ms: t,
                });
            }
        }
        PhaseTable::new(phase, entries).unwrap()
    };
    Profile {
        model: ModelSpec {
            num_layers: l,
            layer_weight_bytes: w,
            kv_bytes_per_token_per_layer: kv,
            flops_per_token_per_layer: PhaseFlops {
                prefill: 5e8,
                decode: 5e8,
            },
            max_position_tokens: 2048,
        },
        gpu: GpuSpec {
            mem_capacity_bytes: capacity,
            peak_flops: 1e12,
            workspace_bytes: workspace,
        },
        latency: LatencyProfile {
            prefill: table(Phase::Prefill),
            decode: table(Phase::Decode),
        },
    }
}

/// Two GPUs, three requests: `a` and `b` arrive, one departs, `c` takes the
/// freed GPU, then everything drains.
pub fn random_scenario(seed: u64) -> LoadedScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = ["interval_start", "eager", "one_ahead"][rng.gen_range(0..3)];
    let split = rng.gen_bool(0.5);
    let bw = [12e9, 24e9, 32e9][rng.gen_range(0..3)];
    let gpus: Vec<serde_json::Value> = (0..2)
        .map(|id| {
            let role = if split { "decode" } else { "mixed" };
            serde_json::json!({"id": id, "profile": random_profile(&mut rng).to_value(), "role": role})
        })
        .collect();
    let request = |id: &str, gpu: u32, rng: &mut ChaCha8Rng| {
        let ratio = |rng: &mut ChaCha8Rng| f64::from(rng.gen_range(10u32..=30)) / 10.0;
        serde_json::json!({
            "id": id,
            "gpu": gpu,
            "batch": BATCHES[rng.gen_range(0..BATCHES.len())],
            "seq_len": SEQS[rng.gen_range(0..SEQS.len())],
            "output_len": rng.gen_range(8..=32),
            "ttft_slo": {"relative": ratio(rng)},
            "tpot_slo": {"relative": ratio(rng)},
        })
    };
    let first = rng.gen_range(0..2u32);
    let leaves = if rng.gen_bool(0.5) { "a" } else { "b" };
    let freed = if leaves == "a" { first } else { 1 - first };
    let requests = vec![
        request("a", first, &mut rng),
        request("b", 1 - first, &mut rng),
        request("c", freed, &mut rng),
    ];
    let stays = if leaves == "a" { "b" } else { "a" };
    let doc = serde_json::json!({
        "version": 1,
        "name": format!("random-{seed}"),
        "bus": {"bandwidth_bytes_per_s": bw, "gpu_count": 2},
        "policy": {"prefetch": policy, "phase_split": split},
        "gpus": gpus,
        "requests": requests,
        "events": [
            {"arrive": "a"}, {"arrive": "b"}, {"depart": leaves},
            {"arrive": "c"}, {"depart": stays}, {"depart": "c"}
        ],
        "seed": seed,
        "horizon_iterations": 24,
    });
    parse_scenario(&doc.to_string(), Path::new(".")).unwrap()
}

/// The interval range the spec allows for `req` on GPU `gpu`.
fn range(ls: &LoadedScenario, rec: &PerformanceRecord, gpu: u32, req: &RequestSpec) -> Option<Vec<Interval>> {
    let p = ls.profile(gpu);
    let knobs = &ls.scenario.policy;
    let mut min = Interval::Every(1);
    for &phase in ls.role(gpu).phases() {
        min = min.max(lookup_interval(rec, phase, req.slo(phase), req.batch, req.seq_len).interval()?);
    }
    let max = max_feasible_interval(&p.model, &p.gpu, req.batch, req.total_tokens(), knobs.prefetch, knobs.kv_offload)?;
    if min > max {
        return None;
    }
    let l = p.model.num_layers;
    let mut out: Vec<Interval> = (1..=l).map(Interval::Every).filter(|&i| min <= i && i <= max).collect();
    if max == Interval::NoOffload {
        out.push(Interval::NoOffload);
    }
    Some(out)
}

#[derive(Clone, Debug)]
struct Slot {
    gpu: u32,
    req: RequestSpec,
    current: Interval,
    options: Vec<Interval>,
}

impl Slot {
    fn figures(&self, ls: &LoadedScenario, i: Interval) -> (u64, f64) {
        let p = ls.profile(self.gpu);
        let knobs = &ls.scenario.policy;
        let plan = plan_from_interval(&p.model, i, knobs.prefetch, knobs.kv_offload);
        let mut rate: f64 = 0.0;
        for &phase in ls.role(self.gpu).phases() {
            let ctx = match phase {
                Phase::Prefill => self.req.seq_len,
                Phase::Decode => self.req.seq_len + self.req.output_len,
            };
            let bytes = knobs.transfer().bytes_per_iteration(&p.model, &plan, self.req.batch, ctx);
            rate = rate.max(bytes as f64 * 1000.0 / self.req.slo(phase));
        }
        (plan.host_bytes(&p.model, self.req.total_tokens()), rate)
    }
}

fn mode(role: GpuRole) -> JobMode {
    match role {
        GpuRole::Prefill => JobMode::PrefillStream,
        GpuRole::Decode => JobMode::DecodeStream,
        GpuRole::Mixed => JobMode::FullStream,
    }
}

/// Runs every slot from `from` to `to` (switching after one iteration) and
/// reports whether every judged phase meets its SLO.
fn epoch_meets(ls: &LoadedScenario, slots: &[Slot], from: &[Interval], to: &[Interval]) -> bool {
    let knobs = &ls.scenario.policy;
    let jobs: Vec<BusJob<'_>> = slots
        .iter()
        .zip(from.iter().zip(to))
        .map(|(s, (&a, &b))| {
            let p = ls.profile(s.gpu);
            let plan = |i| plan_from_interval(&p.model, i, knobs.prefetch, knobs.kv_offload);
            BusJob {
                inst: Instance::with_transfer(p, knobs.transfer()),
                plan: plan(a),
                request: RequestShape {
                    batch: s.req.batch,
                    seq_len: s.req.seq_len,
                    output_len: s.req.output_len,
                },
                mode: mode(ls.role(s.gpu)),
                switch: (a != b).then(|| PlanSwitch {
                    at_iteration: 1,
                    plan: plan(b),
                }),
            }
        })
        .collect();
    let bw = Constant::new(ls.scenario.bus.bandwidth_bytes_per_s).unwrap();
    let out = simulate_bus(&jobs, &bw, ls.scenario.horizon_iterations).unwrap();
    slots.iter().zip(&out.metrics).all(|(s, m)| {
        ls.role(s.gpu).phases().iter().all(|&ph| {
            let lat = m.phase_latency(ph).unwrap();
            lat <= s.req.slo(ph) * (1.0 + 1e-9)
        })
    })
}

/// Best verified host total over every ledger-feasible combination, with
/// `target` (if any) switching immediately.
fn best_total(ls: &LoadedScenario, slots: &[Slot], target: Option<u32>) -> Option<u64> {
    let bw = ls.scenario.bus.bandwidth_bytes_per_s;
    let mut combos: Vec<(u64, Vec<Interval>)> = Vec::new();
    let mut idx = vec![0usize; slots.len()];
    loop {
        let pick: Vec<Interval> = slots.iter().zip(&idx).map(|(s, &k)| s.options[k]).collect();
        let (host, rate) = slots
            .iter()
            .zip(&pick)
            .map(|(s, &i)| s.figures(ls, i))
            .fold((0u64, 0.0), |(h, r), (a, b)| (h + a, r + b));
        if rate <= bw * (1.0 + 1e-12) {
            combos.push((host, pick));
        }
        let mut p = slots.len();
        loop {
            if p == 0 {
                combos.sort_by_key(|c| std::cmp::Reverse(c.0));
                return combos.into_iter().find_map(|(host, pick)| {
                    let from: Vec<Interval> = slots
                        .iter()
                        .zip(&pick)
                        .map(|(s, &i)| if Some(s.gpu) == target { i } else { s.current })
                        .collect();
                    (epoch_meets(ls, slots, &from, &pick) && epoch_meets(ls, slots, &pick, &pick)).then_some(host)
                });
            }
            p -= 1;
            idx[p] += 1;
            if idx[p] < slots[p].options.len() {
                break;
            }
            idx[p] = 0;
        }
    }
}

fn slots(ls: &LoadedScenario, records: &[Arc<PerformanceRecord>], state: &BusState) -> Vec<Slot> {
    state
        .gpus
        .iter()
        .filter_map(|g| {
            let a = g.active.as_ref()?;
            let k = ls.scenario.gpus.iter().position(|e| e.id == g.id).unwrap();
            Some(Slot {
                gpu: g.id,
                req: a.request.clone(),
                current: a.current_interval,
                options: range(ls, &records[k], g.id, &a.request).expect("admitted request has a range"),
            })
        })
        .collect()
}

fn total(ls: &LoadedScenario, state: &BusState) -> u64 {
    state
        .gpus
        .iter()
        .filter_map(|g| {
            let a = g.active.as_ref()?;
            let p = ls.profile(g.id);
            let knobs = &ls.scenario.policy;
            let plan = plan_from_interval(&p.model, a.pending_interval, knobs.prefetch, knobs.kv_offload);
            Some(plan.host_bytes(&p.model, a.request.total_tokens()))
        })
        .sum()
}

/// Outcome counts of one checked scenario.
#[derive(Clone, Copy, Debug, Default)]
pub struct Checked {
    pub admitted: usize,
    pub rejected: usize,
    pub shared: usize,
    pub released: usize,
}

/// Replays the scenario through the coordinator and checks every decision
/// against the oracle and every epoch against the SLOs.
pub fn check_scenario(ls: &LoadedScenario) -> Result<Checked, String> {
    let records = records_for(ls, None).map_err(|e| e.to_string())?;
    let mut state = bus_state(ls, &records);
    let mut out = Checked::default();
    let name = &ls.scenario.name;
    for (k, event) in ls.scenario.effective_events().into_iter().enumerate() {
        let at = format!("{name} event {k} {event:?}");
        match &event {
            Event::Arrive(id) => {
                let r = ls.scenario.request(id).unwrap();
                let spec = resolve_request(ls, r).map_err(|e| e.to_string())?;
                let gi = ls.scenario.gpus.iter().position(|g| g.id == r.gpu).unwrap();
                let own = range(ls, &records[gi], r.gpu, &spec);
                let mut all = slots(ls, &records, &state);
                let lone = all.is_empty();
                let d = admit(&mut state, r.gpu, spec.clone()).map_err(|e| format!("{at}: {e}"))?;
                let Some(options) = own else {
                    if !matches!(d, Decision::Reject { .. }) {
                        return Err(format!("{at}: admitted {d:?} outside its interval range"));
                    }
                    out.rejected += 1;
                    continue_epoch(ls, &mut state, &at)?;
                    continue;
                };
                if lone {
                    let want = Decision::Admit {
                        assignments: vec![(r.gpu, options[0])],
                    };
                    if d != want {
                        return Err(format!("{at}: lone request got {d:?}, expected {want:?}"));
                    }
                    out.admitted += 1;
                } else {
                    all.push(Slot {
                        gpu: r.gpu,
                        req: spec,
                        current: options[0],
                        options,
                    });
                    all.sort_by_key(|s| s.gpu);
                    match (best_total(ls, &all, Some(r.gpu)), &d) {
                        (None, Decision::Reject { .. }) => out.rejected += 1,
                        (Some(best), Decision::Admit { .. }) => {
                            let got = total(ls, &state);
                            if got != best {
                                return Err(format!("{at}: chose {got} host bytes, oracle best is {best}"));
                            }
                            out.admitted += 1;
                            out.shared += 1;
                        }
                        (best, d) => return Err(format!("{at}: coordinator said {d:?}, oracle best {best:?}")),
                    }
                }
            }
            Event::Depart(id) => {
                let r = ls.scenario.request(id).unwrap();
                let serving = state
                    .gpu(r.gpu)
                    .unwrap()
                    .active
                    .as_ref()
                    .is_some_and(|a| &a.request.id == id);
                if serving {
                    let survivors: Vec<Slot> = slots(ls, &records, &state)
                        .into_iter()
                        .filter(|s| s.gpu != r.gpu)
                        .collect();
                    release(&mut state, r.gpu).map_err(|e| format!("{at}: {e}"))?;
                    if !survivors.is_empty() {
                        match best_total(ls, &survivors, None) {
                            Some(best) if total(ls, &state) != best => {
                                return Err(format!(
                                    "{at}: survivors hold {} host bytes, oracle best is {best}",
                                    total(ls, &state)
                                ));
                            }
                            Some(_) => {}
                            None => {
                                for s in &survivors {
                                    let a = state.gpu(s.gpu).unwrap().active.as_ref().unwrap();
                                    if a.pending_interval != s.current {
                                        return Err(format!("{at}: gpu {} moved without a verified combination", s.gpu));
                                    }
                                }
                            }
                        }
                    }
                    out.released += 1;
                }
            }
        }
        continue_epoch(ls, &mut state, &at)?;
    }
    Ok(out)
}

/// Ledger and SLO checks on the epoch after an event, then the boundary.
fn continue_epoch(ls: &LoadedScenario, state: &mut BusState, at: &str) -> Result<(), String> {
    let bw = ls.scenario.bus.bandwidth_bytes_per_s;
    if state.ledger_total() > bw * (1.0 + 1e-12) {
        return Err(format!("{at}: ledger {} over {bw}", state.ledger_total()));
    }
    let epoch = run_epoch(state, ls.scenario.horizon_iterations).map_err(|e| e.to_string())?;
    if !epoch.meets_slo() {
        let lat: Vec<_> = epoch.gpus.iter().map(|g| (g.gpu, g.latencies.clone())).collect();
        return Err(format!("{at}: epoch misses an SLO: {lat:?}"));
    }
    let active: Vec<u32> = state.gpus.iter().filter(|g| g.active.is_some()).map(|g| g.id).collect();
    for g in active {
        on_iteration_boundary(state, g).map_err(|e| e.to_string())?;
    }
    Ok(())
}
