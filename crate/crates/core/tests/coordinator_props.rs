//! Coordinator decisions against the exhaustive oracle, and plan switches in
//! the bus simulation.

mod common;

use std::path::Path;

use proptest::prelude::*;

use offload_core::engine::{simulate_bus, BusJob, Constant, EventKind, Instance, JobMode, PlanSwitch, RequestShape};
use offload_core::fixtures::tp1;
use offload_core::harness::load_scenario;
use offload_core::{plan_from_interval, Interval, PrefetchPolicy};

#[test]
fn bundled_scenarios_match_the_oracle() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut checked = 0;
    for path in paths {
        let ls = load_scenario(&path).unwrap();
        if ls.scenario.gpus.len() < 2 {
            continue;
        }
        common::check_scenario(&ls).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        checked += 1;
    }
    assert!(checked >= 4);
}

#[test]
fn seeded_scenarios_exercise_every_branch() {
    let mut seen = common::Checked::default();
    for seed in 0..40 {
        let c = common::check_scenario(&common::random_scenario(seed)).unwrap_or_else(|e| panic!("{e}"));
        seen.admitted += c.admitted;
        seen.rejected += c.rejected;
        seen.shared += c.shared;
        seen.released += c.released;
    }
    assert!(seen.shared > 0 && seen.rejected > 0 && seen.released > 0, "{seen:?}");
}

fn policy() -> impl Strategy<Value = PrefetchPolicy> {
    prop::sample::select(vec![
        PrefetchPolicy::IntervalStart,
        PrefetchPolicy::Eager,
        PrefetchPolicy::OneAhead,
    ])
}

fn interval() -> impl Strategy<Value = Interval> {
    prop_oneof![(1u32..=8).prop_map(Interval::Every), Just(Interval::NoOffload)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_scenarios_match_the_oracle(seed in 1000u64..1_000_000) {
        let ls = common::random_scenario(seed);
        if let Err(e) = common::check_scenario(&ls) {
            prop_assert!(false, "{}", e);
        }
    }

    #[test]
    fn plans_switch_only_between_iterations(
        policy in policy(),
        from in interval(),
        to in interval(),
        at in 1usize..4,
        full in any::<bool>(),
    ) {
        let p = tp1();
        let plan = |i| plan_from_interval(&p.model, i, policy, false);
        let job = BusJob {
            inst: Instance::new(&p),
            plan: plan(from),
            request: RequestShape { batch: 8, seq_len: 64, output_len: 6 },
            mode: if full { JobMode::Full } else { JobMode::DecodeStream },
            switch: Some(PlanSwitch { at_iteration: at, plan: plan(to) }),
        };
        let out = simulate_bus(&[job], &Constant::new(24e9).unwrap(), 6).unwrap();
        let t = &out.traces[0];
        prop_assert_eq!(t.check(), Ok(()));
        let iterations = out.metrics[0].iterations.len();
        prop_assert!(iterations > at);
        for k in 0..iterations {
            let want: Vec<u32> = plan(if k < at { from } else { to })
                .offloaded_layers()
                .map(|j| j as u32 + 1)
                .collect();
            let got: Vec<u32> = t
                .events
                .iter()
                .filter(|e| e.iteration == k && e.kind == EventKind::Prefetch)
                .map(|e| e.layer)
                .collect();
            prop_assert_eq!(got, want, "iteration {}", k);
        }
        // Iteration k's compute never interleaves with k + 1's.
        let computes: Vec<_> = t.compute_events().collect();
        for w in computes.windows(2) {
            prop_assert!(w[0].iteration <= w[1].iteration);
        }
    }
}
