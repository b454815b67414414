//! `offload-sim`: build records, run scenarios and compare policies.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use offload_core::analyzer::{record_from_json, record_to_json};
use offload_core::engine::TransferModel;
use offload_core::harness::{
    analyze, compare, coordinate, load_scenario, parse_prefetch, records_for, simulate, AnalyzeArgs,
    LoadedScenario, PolicyKind,
};
use offload_core::profiles::load_profile;
use offload_core::{BusSpec, Execution, HarnessError, Phase};

#[derive(Parser)]
#[command(name = "offload-sim", version, about = "SLO-aware layer offloading simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a performance record from a profile.
    Analyze(AnalyzeCli),
    /// Run a scenario's requests concurrently under one policy.
    Simulate(SimulateCli),
    /// Drive the bus coordinator over a scenario's arrival sequence.
    Coordinate(ScenarioCli),
    /// Host memory and throughput of every policy as CSV.
    Compare(ScenarioCli),
}

#[derive(Args)]
struct AnalyzeCli {
    #[arg(long)]
    profile: PathBuf,
    /// SLO buckets in ms, comma-separated.
    #[arg(long, value_delimiter = ',')]
    slo: Vec<u32>,
    /// SLO as a multiple of each key's resident latency; replaces --slo.
    #[arg(long)]
    slo_ratio: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    batch: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    seq: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "prefill,decode")]
    phase: Vec<String>,
    #[arg(long, default_value = "interval-start")]
    prefetch: String,
    #[arg(long)]
    kv_offload: bool,
    #[arg(long)]
    writeback_counted: bool,
    /// Bus bandwidth in bytes per second.
    #[arg(long, default_value_t = 24e9)]
    bandwidth: f64,
    /// Fill rows past interval 1 without simulating (relative SLOs only).
    #[arg(long)]
    prune: bool,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScenarioCli {
    #[arg(long)]
    scenario: PathBuf,
    /// Record to use for every GPU; built from the requests when absent.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Overrides the scenario's prefetch policy.
    #[arg(long)]
    prefetch: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateCli {
    #[command(flatten)]
    common: ScenarioCli,
    #[arg(long, default_value = "select-n")]
    policy: String,
    /// Write per-request timelines here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), HarnessError> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn phase(s: &str) -> Result<Phase, HarnessError> {
    match s {
        "prefill" => Ok(Phase::Prefill),
        "decode" => Ok(Phase::Decode),
        _ => Err(HarnessError::Usage(format!("unknown phase {s:?}"))),
    }
}

fn load(c: &ScenarioCli) -> Result<(LoadedScenario, Vec<std::sync::Arc<offload_core::PerformanceRecord>>), HarnessError> {
    let mut ls = load_scenario(&c.scenario)?;
    if let Some(p) = &c.prefetch {
        ls.scenario.policy.prefetch = parse_prefetch(p)?;
    }
    let record = match &c.record {
        Some(p) => Some(record_from_json(&read(p)?)?),
        None => None,
    };
    let records = records_for(&ls, record.as_ref())?;
    Ok((ls, records))
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.cmd {
        Cmd::Analyze(a) => {
            let profile = load_profile(&read(&a.profile)?)?;
            let args = AnalyzeArgs {
                slo_ms: a.slo,
                slo_ratio: a.slo_ratio,
                batch: a.batch,
                seq_len: a.seq,
                phases: a.phase.iter().map(|s| phase(s)).collect::<Result<_, _>>()?,
                prefetch: parse_prefetch(&a.prefetch)?,
                kv_offload: a.kv_offload,
                bus: BusSpec {
                    bandwidth_bytes_per_s: a.bandwidth,
                    gpu_count: 1,
                },
                transfer: TransferModel {
                    writeback_counted: a.writeback_counted,
                },
                prune: a.prune,
                model_id: a.profile.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()),
                gpu_id: "gpu".into(),
                exec: if a.sequential { Execution::Sequential } else { Execution::Parallel },
            };
            let (record, stats) = analyze(&profile, &args)?;
            write(&a.out, &record_to_json(&record))?;
            eprintln!("{}: {stats}", a.out.display());
            Ok(true)
        }
        Cmd::Simulate(s) => {
            let (ls, records) = load(&s.common)?;
            let kind: PolicyKind = s.policy.parse()?;
            let out = simulate(&ls, &records, kind)?;
            if let Some(t) = &s.trace {
                write(t, &out.traces_json())?;
            }
            emit(s.common.out.as_deref(), &out.report.to_json())?;
            Ok(!out.report.any_violated())
        }
        Cmd::Coordinate(c) => {
            let (ls, records) = load(&c)?;
            let out = coordinate(&ls, &records)?;
            emit(c.out.as_deref(), &out.report.to_json())?;
            Ok(!out.report.any_violated())
        }
        Cmd::Compare(c) => {
            let (ls, records) = load(&c)?;
            emit(c.out.as_deref(), &compare(&ls, &records)?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
