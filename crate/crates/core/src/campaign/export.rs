use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ResultSet;
use crate::dcutr::{HolePunchResult, RttKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    JsonLines,
    Csv,
}

/// One JSON Lines record: provenance followed by the result's fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub scenario_digest: String,
    pub master_seed: u64,
    pub trial: u64,
    #[serde(flatten)]
    pub result: HolePunchResult,
}

pub const CSV_COLUMNS: &[&str] = &[
    "scenario_digest",
    "master_seed",
    "trial",
    "network_id",
    "client_id",
    "remote_id",
    "relay_id",
    "client_nat",
    "remote_nat",
    "outcome",
    "attempt_count",
    "attempt_outcomes",
    "success_attempt",
    "transport_filter",
    "transport_used",
    "port_mappings",
    "to_relay_mean_ms",
    "to_relay_std_ms",
    "to_remote_through_relay_mean_ms",
    "to_remote_through_relay_std_ms",
    "to_remote_after_holepunch_mean_ms",
    "to_remote_after_holepunch_std_ms",
    "signal_bytes_initiator_to_listener",
    "signal_bytes_listener_to_initiator",
    "relay_closed",
    "error",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_row(rs: &ResultSet, trial: usize, r: &HolePunchResult) -> Vec<String> {
    let rtt = |k: RttKind| r.rtt(k);
    let mut row = vec![
        rs.scenario_digest.clone(),
        rs.master_seed.to_string(),
        trial.to_string(),
        r.network_id.clone(),
        r.client_id.clone(),
        r.remote_id.clone(),
        r.relay_id.clone(),
        r.client_nat.clone(),
        r.remote_nat.clone(),
        r.outcome.as_str().to_string(),
        r.attempts.len().to_string(),
        r.attempts
            .iter()
            .map(|a| a.outcome.as_str())
            .collect::<Vec<_>>()
            .join(";"),
        opt(r.success_attempt()),
        serde_plain(&r.transport_filter),
        opt(r.transport_used.map(|t| t.label())),
        r.port_mappings
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(";"),
    ];
    for k in [
        RttKind::ToRelay,
        RttKind::ToRemoteThroughRelay,
        RttKind::ToRemoteAfterHolepunch,
    ] {
        row.push(opt(rtt(k).map(|s| s.mean_ms())));
        row.push(opt(rtt(k).map(|s| s.std_ms())));
    }
    row.extend([
        r.signal_bytes.initiator_to_listener.to_string(),
        r.signal_bytes.listener_to_initiator.to_string(),
        r.relay_closed.to_string(),
        r.error.clone().unwrap_or_default(),
    ]);
    row
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v).expect("serializable") {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

/// Writes `rs` to `path` and returns the number of bytes written.
pub fn export(rs: &ResultSet, format: ExportFormat, path: &Path) -> io::Result<u64> {
    let mut buf = Vec::new();
    match format {
        ExportFormat::JsonLines => {
            for (trial, r) in rs.results.iter().enumerate() {
                let rec = ExportRecord {
                    scenario_digest: rs.scenario_digest.clone(),
                    master_seed: rs.master_seed,
                    trial: trial as u64,
                    result: r.clone(),
                };
                serde_json::to_writer(&mut buf, &rec)?;
                buf.push(b'\n');
            }
        }
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(CSV_COLUMNS)?;
            for (trial, r) in rs.results.iter().enumerate() {
                w.write_record(csv_row(rs, trial, r))?;
            }
            w.flush()?;
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&buf)?;
    f.flush()?;
    Ok(buf.len() as u64)
}

/// Reads a JSON Lines export back. Records must be in trial order.
pub fn import_jsonl(path: &Path) -> io::Result<ResultSet> {
    let reader = BufReader::new(File::open(path)?);
    let mut rs = ResultSet {
        scenario_digest: String::new(),
        master_seed: 0,
        results: Vec::new(),
    };
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExportRecord = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1)))?;
        if rs.results.is_empty() {
            rs.scenario_digest = rec.scenario_digest.clone();
            rs.master_seed = rec.master_seed;
        }
        if rec.trial != rs.results.len() as u64 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("line {}: trial {} out of order", n + 1, rec.trial),
            ));
        }
        rs.results.push(rec.result);
    }
    Ok(rs)
}
