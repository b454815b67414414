use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Compute,
    Copy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Compute,
    Prefetch,
    Writeback,
}

/// One span on a stream. Only the first five fields are exported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub stream: Stream,
    /// 1-based layer number.
    pub layer: u32,
    pub kind: EventKind,
    pub start_ms: f64,
    pub end_ms: f64,
    #[serde(skip)]
    pub iteration: usize,
    #[serde(skip)]
    pub bytes: u64,
}

/// Events of one or more iterations, sorted by start time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationTrace {
    pub events: Vec<TraceEvent>,
}

const EPS: f64 = 1e-9;

impl IterationTrace {
    pub fn new(mut events: Vec<TraceEvent>) -> Self {
        sort_events(&mut events);
        IterationTrace { events }
    }

    pub fn compute_events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| e.kind == EventKind::Compute)
    }

    pub fn copy_events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| e.stream == Stream::Copy)
    }

    /// Bytes moved by copy events of `iteration`.
    pub fn copy_bytes(&self, iteration: usize) -> u64 {
        self.copy_events()
            .filter(|e| e.iteration == iteration)
            .map(|e| e.bytes)
            .sum()
    }

    /// Checks stream exclusivity, compute order, and that every offloaded
    /// layer's compute waits for its prefetch.
    pub fn check(&self) -> Result<(), String> {
        for stream in [Stream::Compute, Stream::Copy] {
            let mut spans: Vec<&TraceEvent> =
                self.events.iter().filter(|e| e.stream == stream).collect();
            spans.sort_by(|a, b| a.start_ms.total_cmp(&b.start_ms));
            for w in spans.windows(2) {
                if w[1].start_ms < w[0].end_ms - EPS {
                    return Err(format!(
                        "{stream:?} overlap: layer {} [{}, {}] and layer {} [{}, {}]",
                        w[0].layer, w[0].start_ms, w[0].end_ms, w[1].layer, w[1].start_ms, w[1].end_ms
                    ));
                }
            }
        }
        for e in &self.events {
            if e.end_ms < e.start_ms {
                return Err(format!("layer {} ends before it starts", e.layer));
            }
        }
        let mut compute: Vec<&TraceEvent> = self.compute_events().collect();
        compute.sort_by_key(|e| (e.iteration, e.layer));
        for w in compute.windows(2) {
            if w[1].start_ms < w[0].end_ms - EPS {
                return Err(format!(
                    "compute of iteration {} layer {} starts before layer {} ends",
                    w[1].iteration, w[1].layer, w[0].layer
                ));
            }
        }
        for p in self.events.iter().filter(|e| e.kind == EventKind::Prefetch) {
            let c = compute
                .iter()
                .find(|c| c.iteration == p.iteration && c.layer == p.layer);
            if let Some(c) = c {
                if c.start_ms < p.end_ms - EPS {
                    return Err(format!(
                        "iteration {} layer {} computes at {} before its prefetch ends at {}",
                        p.iteration, p.layer, c.start_ms, p.end_ms
                    ));
                }
            }
        }
        Ok(())
    }

    /// JSON array of `{stream, layer, kind, start_ms, end_ms}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.events).expect("trace serializes")
    }
}

pub(crate) fn sort_events(events: &mut [TraceEvent]) {
    events.sort_by(|a, b| {
        a.start_ms
            .total_cmp(&b.start_ms)
            .then(a.stream.cmp(&b.stream))
            .then(a.iteration.cmp(&b.iteration))
            .then(a.layer.cmp(&b.layer))
    });
}
