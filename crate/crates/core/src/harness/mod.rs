//! Scenario files, reports and the drivers behind the `offload-sim` CLI.

mod commands;
pub mod report;
pub mod scenario;

pub use commands::{
    analyze, bus_state, compare, coordinate, parse_prefetch, plan_choice, records_for, resolve_request,
    run_policy, select_n_choice, simulate, AnalyzeArgs, AnalyzeStats, CoordinateOutput, EventLog,
    GpuSnapshot, PlanChoice, PolicyKind, SimulateOutput,
};
pub use report::{Report, RequestReport, Verdict};
pub use scenario::{load_scenario, parse_scenario, LoadedScenario, Scenario};
