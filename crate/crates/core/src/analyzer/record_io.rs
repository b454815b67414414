use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{PerformanceRecord, RecordEntry, RecordKey, RecordMeta, SLO_BUCKET_MS};
use crate::error::AnalyzerError;
use crate::Phase;

impl Serialize for RecordEntry {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            RecordEntry::Interval(i) => s.serialize_u32(*i),
            RecordEntry::NoOffload => s.serialize_str("none"),
            RecordEntry::Infeasible => s.serialize_str("infeasible"),
        }
    }
}

impl<'de> Deserialize<'de> for RecordEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("interval must be >= 1")),
            Raw::N(i) => Ok(RecordEntry::Interval(i)),
            Raw::S(s) if s == "infeasible" => Ok(RecordEntry::Infeasible),
            Raw::S(s) if s == "none" => Ok(RecordEntry::NoOffload),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "expected an interval >= 1, \"none\" or \"infeasible\", got {s:?}"
            ))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDoc {
    phase: Phase,
    slo_ms: u32,
    batch: u32,
    seq_len: u64,
    interval: RecordEntry,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordDoc {
    meta: RecordMeta,
    entries: Vec<EntryDoc>,
}

/// Pretty JSON with entries in key order.
pub fn record_to_json(record: &PerformanceRecord) -> String {
    let doc = RecordDoc {
        meta: record.meta.clone(),
        entries: record
            .entries
            .iter()
            .map(|(k, &interval)| EntryDoc {
                phase: k.phase,
                slo_ms: k.slo_ms,
                batch: k.batch,
                seq_len: k.seq_len,
                interval,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("record serializes")
}

pub fn record_from_json(text: &str) -> Result<PerformanceRecord, AnalyzerError> {
    let doc: RecordDoc =
        serde_json::from_str(text).map_err(|e| AnalyzerError::Schema(e.to_string()))?;
    let grid = &doc.meta.grid;
    grid.validate()
        .map_err(|e| AnalyzerError::Schema(format!("meta.grid: {e}")))?;
    let slos: BTreeSet<u32> = grid.slo_ms.iter().copied().collect();
    let batches: BTreeSet<u32> = grid.batch.iter().copied().collect();
    let seqs: BTreeSet<u64> = grid.seq_len.iter().copied().collect();
    let mut entries = BTreeMap::new();
    for (n, e) in doc.entries.into_iter().enumerate() {
        let at = format!("entries[{n}]");
        if e.slo_ms % SLO_BUCKET_MS != 0 || !slos.contains(&e.slo_ms) {
            return Err(AnalyzerError::Schema(format!(
                "{at}.slo_ms: {} is not a grid bucket",
                e.slo_ms
            )));
        }
        if !batches.contains(&e.batch) {
            return Err(AnalyzerError::Schema(format!("{at}.batch: {} is not on the grid", e.batch)));
        }
        if !seqs.contains(&e.seq_len) {
            return Err(AnalyzerError::Schema(format!(
                "{at}.seq_len: {} is not on the grid",
                e.seq_len
            )));
        }
        let key = RecordKey {
            phase: e.phase,
            slo_ms: e.slo_ms,
            batch: e.batch,
            seq_len: e.seq_len,
        };
        if entries.insert(key, e.interval).is_some() {
            return Err(AnalyzerError::Schema(format!("{at}: duplicate key")));
        }
    }
    Ok(PerformanceRecord {
        meta: doc.meta,
        entries,
    })
}
