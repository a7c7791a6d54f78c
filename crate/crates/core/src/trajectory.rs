//! Per-iteration run records and their file formats.
//!
//! Record `k` holds the state `y^k` after `k` steps, so a trajectory of `K`
//! iterations has records `k = 1..=K`; the initial `y^0` is kept separately.
//! Numbers are written as 17-significant-digit decimals, which round-trip
//! every `f64` exactly.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::delay::DelaySample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    Converged,
    MaxIter,
    Stalled,
    Diverged,
}

impl std::fmt::Display for TerminalStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TerminalStatus::Converged => "converged",
            TerminalStatus::MaxIter => "max_iter",
            TerminalStatus::Stalled => "stalled",
            TerminalStatus::Diverged => "diverged",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Sync,
    Async,
}

/// Async-only fields of a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsyncInfo {
    /// `sum_j ||R_1j||_p` for this step's delay pattern.
    pub condition_value: f64,
    pub zeta: u8,
    pub updated: bool,
    pub delays: DelaySample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub k: usize,
    pub y: Vec<f64>,
    /// `||y^k - y^{k-1}||_p`
    pub residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<AsyncInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: RunKind,
    pub y0: Vec<f64>,
    pub records: Vec<Record>,
    pub terminal_status: TerminalStatus,
}

impl Trajectory {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn final_y(&self) -> &[f64] {
        self.records.last().map_or(&self.y0, |r| &r.y)
    }

    pub fn holds(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.info.as_ref().is_some_and(|i| !i.updated))
            .count()
    }

    pub fn converged(&self) -> bool {
        self.terminal_status == TerminalStatus::Converged
    }

    pub fn m(&self) -> usize {
        self.y0.len()
    }

    /// CSV text. Sync runs have columns `k, y_1..y_m, residual`; async runs
    /// `k, y_1..y_m, condition_value, zeta, updated, delay_sample, residual`.
    pub fn to_csv(&self) -> String {
        let m = self.m();
        let mut out = String::new();
        let mut header = vec!["k".to_string()];
        header.extend((1..=m).map(|i| format!("y_{i}")));
        if self.kind == RunKind::Async {
            header.extend(["condition_value", "zeta", "updated", "delay_sample"].map(String::from));
        }
        header.push("residual".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{}", r.k);
            for v in &r.y {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            if let Some(info) = &r.info {
                let _ = write!(
                    out,
                    ",{},{},{},{}",
                    fmt_f64(info.condition_value),
                    info.zeta,
                    info.updated,
                    info.delays.joined()
                );
            }
            let _ = writeln!(out, ",{}", fmt_f64(r.residual));
        }
        out
    }

    /// Parses [`Trajectory::to_csv`] output. `y0` and the terminal status are
    /// not part of the CSV and must be supplied.
    pub fn from_csv(text: &str, y0: Vec<f64>, terminal_status: TerminalStatus) -> Result<Self> {
        let ctx = "trajectory CSV";
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::format(ctx, e))?.clone();
        let m = headers.iter().filter(|h| h.starts_with("y_")).count();
        let kind = if headers.iter().any(|h| h == "zeta") {
            RunKind::Async
        } else {
            RunKind::Sync
        };
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::format(ctx, e));
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| Error::format(ctx, e))?;
            let k = row[0].parse::<usize>().map_err(|e| Error::format(ctx, e))?;
            let y = (1..=m).map(|i| num(&row[i])).collect::<Result<Vec<_>>>()?;
            let info = match kind {
                RunKind::Sync => None,
                RunKind::Async => Some(AsyncInfo {
                    condition_value: num(&row[m + 1])?,
                    zeta: row[m + 2].parse().map_err(|e| Error::format(ctx, e))?,
                    updated: row[m + 3].parse().map_err(|e| Error::format(ctx, e))?,
                    delays: DelaySample::parse_joined(&row[m + 4])?,
                }),
            };
            let residual = num(&row[row.len() - 1])?;
            records.push(Record { k, y, residual, info });
        }
        Ok(Trajectory {
            kind,
            y0,
            records,
            terminal_status,
        })
    }

    pub fn to_json(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "{{\"kind\":\"{}\",\"terminal_status\":\"{}\",\"y0\":{},\"records\":[",
            match self.kind {
                RunKind::Sync => "sync",
                RunKind::Async => "async",
            },
            self.terminal_status,
            json_array(&self.y0)
        );
        for (i, r) in self.records.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "\n{{\"k\":{},\"y\":{},\"residual\":{}", r.k, json_array(&r.y), json_number(r.residual));
            if let Some(info) = &r.info {
                let _ = write!(
                    out,
                    ",\"info\":{{\"condition_value\":{},\"zeta\":{},\"updated\":{},\"delays\":{{\"staleness\":[{}]}}}}",
                    json_number(info.condition_value),
                    info.zeta,
                    info.updated,
                    info.delays.staleness.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                );
            }
            out.push('}');
        }
        out.push_str("\n]}\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("trajectory JSON", e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    /// `Err` for stalled or diverged runs.
    pub fn check(&self) -> Result<()> {
        let k = self.iterations();
        let last_norm = self.final_y().iter().fold(0.0f64, |a, x| a.max(x.abs()));
        match self.terminal_status {
            TerminalStatus::Diverged => Err(Error::Diverged { k, norm: last_norm }),
            TerminalStatus::Stalled => Err(Error::Stalled {
                k,
                holds: trailing_holds(self),
            }),
            _ => Ok(()),
        }
    }
}

fn trailing_holds(t: &Trajectory) -> usize {
    t.records
        .iter()
        .rev()
        .take_while(|r| r.info.as_ref().is_some_and(|i| !i.updated))
        .count()
}

/// 17 significant digits, or `NaN` / `inf` / `-inf`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// JSON cannot carry non-finite numbers; those become `null`.
fn json_number(v: f64) -> String {
    if v.is_finite() {
        fmt_f64(v)
    } else {
        "null".into()
    }
}

fn json_array(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| json_number(*x)).collect();
    format!("[{}]", parts.join(","))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_async() -> Trajectory {
        Trajectory {
            kind: RunKind::Async,
            y0: vec![0.0, 1.0],
            records: vec![
                Record {
                    k: 1,
                    y: vec![0.1, 1.0 / 3.0],
                    residual: 0.7,
                    info: Some(AsyncInfo {
                        condition_value: 0.95,
                        zeta: 0,
                        updated: true,
                        delays: DelaySample::new(vec![0, 2, 1]),
                    }),
                },
                Record {
                    k: 2,
                    y: vec![0.1, 1.0 / 3.0],
                    residual: 0.0,
                    info: Some(AsyncInfo {
                        condition_value: 1.25,
                        zeta: 1,
                        updated: false,
                        delays: DelaySample::new(vec![1, 1, 0]),
                    }),
                },
            ],
            terminal_status: TerminalStatus::MaxIter,
        }
    }

    #[test]
    fn csv_layout() {
        let t = sample_async();
        let csv = t.to_csv();
        let header = csv.lines().next().unwrap();
        assert_eq!(header, "k,y_1,y_2,condition_value,zeta,updated,delay_sample,residual");
        assert!(csv.lines().nth(1).unwrap().contains(",0;2;1,"));
        let back = Trajectory::from_csv(&csv, t.y0.clone(), t.terminal_status).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn json_round_trip() {
        let t = sample_async();
        assert_eq!(Trajectory::from_json(&t.to_json()).unwrap(), t);
        let sync = Trajectory {
            kind: RunKind::Sync,
            records: info_free(),
            ..t
        };
        assert_eq!(Trajectory::from_json(&sync.to_json()).unwrap(), sync);
    }

    fn info_free() -> Vec<Record> {
        vec![Record {
            k: 1,
            y: vec![f64::MIN_POSITIVE, -1e300],
            residual: 2.5,
            info: None,
        }]
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn check_maps_failures() {
        let mut t = sample_async();
        assert!(t.check().is_ok());
        t.terminal_status = TerminalStatus::Stalled;
        assert!(matches!(t.check(), Err(Error::Stalled { .. })));
        t.terminal_status = TerminalStatus::Diverged;
        assert!(matches!(t.check(), Err(Error::Diverged { .. })));
    }
}
