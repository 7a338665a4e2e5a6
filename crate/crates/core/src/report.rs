//! Per-trial CSV output and the versioned JSON run summary.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{arm_pulls, epoch_means, RoundRecord};

/// Column order of every per-trial CSV.
pub const CSV_COLUMNS: [&str; 7] = [
    "t",
    "arm",
    "pattern",
    "reward",
    "candidate_set_size",
    "cumulative_regret",
    "queries",
];

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::Config(format!("write failed: {e}"))
}

/// Writes `records` as CSV. Absent optional fields are left empty.
pub fn write_records_csv<W: Write>(out: W, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS).map_err(io_err)?;
    for r in records {
        let opt = |v: Option<String>| v.unwrap_or_default();
        w.write_record([
            r.t.to_string(),
            r.arm.to_string(),
            opt(r.pattern.as_ref().map(|p| p.to_string())),
            r.reward.to_string(),
            r.candidate_set_size.to_string(),
            opt(r.cumulative_regret.map(|v| v.to_string())),
            opt(r.queries.map(|v| v.to_string())),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Parses CSV written by [`write_records_csv`].
pub fn read_records_csv<R: std::io::Read>(input: R) -> Result<Vec<RoundRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if header.iter().ne(CSV_COLUMNS) {
        return Err(Error::Parse(format!("unexpected CSV header {header:?}")));
    }
    let parse_err = |e: &dyn std::fmt::Display| Error::Parse(e.to_string());
    rdr.records()
        .map(|row| {
            let row = row.map_err(|e| parse_err(&e))?;
            let field = |i: usize| row.get(i).unwrap_or("");
            let opt = |i: usize| (!field(i).is_empty()).then(|| field(i));
            Ok(RoundRecord {
                t: field(0).parse().map_err(|e| parse_err(&e))?,
                arm: field(1).parse().map_err(|e| parse_err(&e))?,
                pattern: opt(2).map(str::parse).transpose()?,
                reward: field(3).parse().map_err(|e| parse_err(&e))?,
                candidate_set_size: field(4).parse().map_err(|e| parse_err(&e))?,
                cumulative_regret: opt(5).map(str::parse).transpose().map_err(|e| parse_err(&e))?,
                queries: opt(6).map(str::parse).transpose().map_err(|e| parse_err(&e))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub seed: u64,
    /// CSV file name relative to the summary.
    pub csv: String,
    pub epoch_means: Vec<f64>,
    pub final_regret: Option<f64>,
    pub arm_pulls: Vec<u64>,
}

impl TrialSummary {
    pub fn from_records(seed: u64, csv: String, records: &[RoundRecord], arms: usize, epoch_rounds: usize) -> Self {
        let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
        Self {
            seed,
            csv,
            epoch_means: epoch_means(&rewards, epoch_rounds),
            final_regret: records.last().and_then(|r| r.cumulative_regret),
            arm_pulls: arm_pulls(records, arms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub command: String,
    pub policy: String,
    pub rounds: usize,
    pub epoch_rounds: usize,
    pub trials: Vec<TrialSummary>,
    /// Epoch means averaged over trials.
    pub mean_epoch_means: Vec<f64>,
    pub mean_final_regret: Option<f64>,
}

impl RunSummary {
    pub fn new(command: &str, policy: String, rounds: usize, epoch_rounds: usize, trials: Vec<TrialSummary>) -> Self {
        let epochs = trials.iter().map(|t| t.epoch_means.len()).min().unwrap_or(0);
        let n = trials.len().max(1) as f64;
        let mean_epoch_means = (0..epochs)
            .map(|e| trials.iter().map(|t| t.epoch_means[e]).sum::<f64>() / n)
            .collect();
        let regrets: Option<Vec<f64>> = trials.iter().map(|t| t.final_regret).collect();
        let mean_final_regret = regrets
            .filter(|r| !r.is_empty())
            .map(|r| r.iter().sum::<f64>() / r.len() as f64);
        Self {
            schema_version: SUMMARY_SCHEMA_VERSION,
            command: command.to_string(),
            policy,
            rounds,
            epoch_rounds,
            trials,
            mean_epoch_means,
            mean_final_regret,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}
