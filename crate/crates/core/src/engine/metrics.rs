use serde::{Deserialize, Serialize};

use crate::Phase;

/// Iterations averaged for the steady-state figures.
pub const STEADY_WINDOW: usize = 16;

/// One completed iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSample {
    pub phase: Phase,
    pub duration_ms: f64,
    /// Bytes this iteration put on the bus.
    pub bytes: u64,
}

/// Latency, throughput and memory figures of one request or stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// First prefill iteration.
    pub ttft_ms: Option<f64>,
    /// Mean decode iteration; the first token comes from prefill.
    pub tpot_ms: Option<f64>,
    /// Mean of the last [`STEADY_WINDOW`] decode iterations.
    pub steady_tpot_ms: Option<f64>,
    /// Mean of the last [`STEADY_WINDOW`] prefill iterations.
    pub steady_ttft_ms: Option<f64>,
    pub throughput_tokens_per_s: f64,
    pub gpu_mem_peak_bytes: u64,
    pub host_mem_bytes: u64,
    /// Bus bytes of the final iteration.
    pub bytes_transferred_per_iter: u64,
    pub iterations: Vec<IterationSample>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn tail_mean(xs: &[f64]) -> Option<f64> {
    mean(&xs[xs.len().saturating_sub(STEADY_WINDOW)..])
}

impl Metrics {
    pub fn from_samples(
        samples: Vec<IterationSample>,
        batch: u32,
        gpu_mem_peak_bytes: u64,
        host_mem_bytes: u64,
    ) -> Self {
        let of = |phase| -> Vec<f64> {
            samples
                .iter()
                .filter(|s| s.phase == phase)
                .map(|s| s.duration_ms)
                .collect()
        };
        let prefill = of(Phase::Prefill);
        let decode = of(Phase::Decode);
        let tpot_ms = mean(&decode);
        let ttft_ms = prefill.first().copied();
        let per_iter = tpot_ms.or(ttft_ms);
        let throughput_tokens_per_s = match per_iter {
            Some(t) if t > 0.0 => f64::from(batch) * 1000.0 / t,
            _ => 0.0,
        };
        Metrics {
            ttft_ms,
            tpot_ms,
            steady_tpot_ms: tail_mean(&decode),
            steady_ttft_ms: tail_mean(&prefill),
            throughput_tokens_per_s,
            gpu_mem_peak_bytes,
            host_mem_bytes,
            bytes_transferred_per_iter: samples.last().map_or(0, |s| s.bytes),
            iterations: samples,
        }
    }

    /// Latency compared against a phase SLO: TTFT for prefill, steady TPOT for
    /// decode. Stream runs without a first-token figure fall back to steady.
    pub fn phase_latency(&self, phase: Phase) -> Option<f64> {
        match phase {
            Phase::Prefill => match (self.ttft_ms, self.steady_ttft_ms) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            },
            Phase::Decode => self.steady_tpot_ms,
        }
    }
}
