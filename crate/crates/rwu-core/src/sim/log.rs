use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::control::ManeuverPhase;
use crate::error::SimError;

/// One control tick. Field order is the CSV column order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q4: f64,
    pub q5: f64,
    pub dq1: f64,
    pub dq2: f64,
    pub dq3: f64,
    pub dq4: f64,
    pub dq5: f64,
    pub x: f64,
    pub y: f64,
    #[serde(rename = "q1A")]
    pub q1a: f64,
    #[serde(rename = "q2A")]
    pub q2a: f64,
    #[serde(rename = "q1G")]
    pub q1g: f64,
    #[serde(rename = "q2G")]
    pub q2g: f64,
    #[serde(rename = "q3G")]
    pub q3g: f64,
    pub q1_hat: f64,
    pub q2_hat: f64,
    pub pivot_ax: f64,
    pub u1: f64,
    pub u2: f64,
    pub i1: f64,
    pub i2: f64,
    pub phase: String,
    pub dist_flag: u8,
}

pub const CSV_COLUMNS: [&str; 27] = [
    "t", "q1", "q2", "q3", "q4", "q5", "dq1", "dq2", "dq3", "dq4", "dq5", "x", "y", "q1A", "q2A", "q1G", "q2G",
    "q3G", "q1_hat", "q2_hat", "pivot_ax", "u1", "u2", "i1", "i2", "phase", "dist_flag",
];

pub fn write_csv<W: Write>(rows: &[LogRow], out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<LogRow>, SimError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_COLUMNS {
        return Err(SimError::Config(format!("unexpected CSV header {header:?}")));
    }
    Ok(r.deserialize().collect::<Result<Vec<LogRow>, _>>()?)
}

fn phase_of(row: &LogRow) -> Option<ManeuverPhase> {
    ManeuverPhase::ALL.into_iter().find(|p| p.name() == row.phase)
}

/// Headline numbers of a run, all recomputable from its log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub success: bool,
    pub peak_abs_q1: f64,
    pub peak_abs_q2: f64,
    pub peak_abs_u1: f64,
    pub peak_abs_u2: f64,
    /// time from the end of the last disturbance until both estimated tilts
    /// stay within the settle band; None if they never do
    pub recovery_time: Option<f64>,
    /// time from the first stand-up step (or roll-up contact) to full balance
    pub erection_time: Option<f64>,
    pub phases: Vec<(f64, ManeuverPhase)>,
    pub failure: Option<String>,
}

pub const SETTLE_BAND: f64 = std::f64::consts::PI / 180.0;

impl RunSummary {
    pub fn from_rows(name: &str, rows: &[LogRow], failure: Option<String>) -> Self {
        let peak = |f: fn(&LogRow) -> f64| rows.iter().map(|r| f(r).abs()).fold(0.0, f64::max);
        let mut phases: Vec<(f64, ManeuverPhase)> = Vec::new();
        for r in rows {
            if let Some(p) = phase_of(r) {
                if phases.last().map(|l| l.1) != Some(p) {
                    phases.push((r.t, p));
                }
            }
        }
        let last = phases.last().map(|p| p.1);
        // a run that never leaves Idle has no controller to fail
        let idle_only = phases.iter().all(|p| p.1 == ManeuverPhase::Idle);
        let success = failure.is_none()
            && (last == Some(ManeuverPhase::BalanceFull) || idle_only && !phases.is_empty())
            && !phases.iter().any(|p| p.1 == ManeuverPhase::Fallen);

        let dist_end = rows.iter().rev().find(|r| r.dist_flag != 0).map(|r| r.t);
        let recovery_time = dist_end.and_then(|t_end| {
            let mut settled_at = None;
            for r in rows.iter().filter(|r| r.t > t_end) {
                if r.q1_hat.abs() < SETTLE_BAND && r.q2_hat.abs() < SETTLE_BAND {
                    settled_at.get_or_insert(r.t);
                } else {
                    settled_at = None;
                }
            }
            settled_at.map(|t| t - t_end)
        });

        let start = phases
            .iter()
            .find(|p| matches!(p.1, ManeuverPhase::StandupStep1 | ManeuverPhase::RollupContact))
            .map(|p| p.0);
        let full = phases.iter().find(|p| p.1 == ManeuverPhase::BalanceFull).map(|p| p.0);
        let erection_time = match (start, full) {
            (Some(s), Some(f)) if f > s => Some(f - s),
            _ => None,
        };

        Self {
            name: name.to_owned(),
            success,
            peak_abs_q1: peak(|r| r.q1),
            peak_abs_q2: peak(|r| r.q2),
            peak_abs_u1: peak(|r| r.u1),
            peak_abs_u2: peak(|r| r.u2),
            recovery_time,
            erection_time,
            phases,
            failure,
        }
    }
}
