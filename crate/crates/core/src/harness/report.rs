//! Report documents written by `simulate` and `coordinate`.

use serde::{Deserialize, Serialize};

use crate::coordinator::GpuRole;
use crate::interval::Interval;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Met,
    Violated,
    /// Refused before running; carries no latency verdict.
    Rejected,
}

/// Latency over SLO, rounded to nine decimals so that float noise in
/// simulated sums cannot flip a verdict.
pub fn slo_ratio(latency_ms: f64, slo_ms: f64) -> f64 {
    (latency_ms / slo_ms * 1e9).round() / 1e9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestReport {
    pub id: String,
    pub gpu: u32,
    pub ttft_ms: Option<f64>,
    /// Steady-state TPOT.
    pub tpot_ms: Option<f64>,
    pub ttft_slo_ms: f64,
    pub tpot_slo_ms: f64,
    /// Only for phases the GPU's role is judged on.
    pub slo_ratio_ttft: Option<f64>,
    pub slo_ratio_tpot: Option<f64>,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
    pub interval: Option<Interval>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub portion: Option<f64>,
    pub host_mem_bytes: Option<u64>,
    pub throughput_tokens_per_s: Option<f64>,
}

impl RequestReport {
    /// Fills ratios and the verdict from the judged latencies.
    pub fn judge(&mut self, ttft: bool, tpot: bool) {
        self.slo_ratio_ttft = ttft
            .then(|| self.ttft_ms.map(|l| slo_ratio(l, self.ttft_slo_ms)))
            .flatten();
        self.slo_ratio_tpot = tpot
            .then(|| self.tpot_ms.map(|l| slo_ratio(l, self.tpot_slo_ms)))
            .flatten();
        let ok = [self.slo_ratio_ttft, self.slo_ratio_tpot]
            .into_iter()
            .flatten()
            .all(|r| r <= 1.0);
        self.verdict = if ok { Verdict::Met } else { Verdict::Violated };
    }
}

/// Interval state of a GPU after a scenario event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalChange {
    pub event: usize,
    pub request: String,
    pub current: Interval,
    pub pending: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpuReport {
    pub id: u32,
    pub role: GpuRole,
    pub gpu_mem_peak_bytes: u64,
    pub host_mem_bytes: u64,
    pub intervals: Vec<IntervalChange>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusReport {
    pub bandwidth_bytes_per_s: f64,
    pub makespan_ms: f64,
    pub bytes_moved: f64,
    pub mean_utilization: f64,
    /// Largest ledger sum seen by the coordinator.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub peak_ledger_bytes_per_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub scenario: String,
    pub command: String,
    pub policy: String,
    pub requests: Vec<RequestReport>,
    pub gpus: Vec<GpuReport>,
    pub bus: BusReport,
}

impl Report {
    pub fn any_violated(&self) -> bool {
        self.requests.iter().any(|r| r.verdict == Verdict::Violated)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
