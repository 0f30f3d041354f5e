//! Per-iteration training metrics and their CSV form.
//!
//! Row `t` describes the `t`-th update and is evaluated at the iterate that
//! update starts from. Columns that do not apply to a trainer (the potential
//! without an oracle optimum, Fisher diagnostics outside policy training) are
//! `nan`. For policy training the two objective columns hold the worst-case
//! weighted and uniform minibatch *values* rather than losses.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::float17;

pub const CSV_COLUMNS: [&str; 9] = [
    "iter",
    "robust_minibatch_loss",
    "uniform_minibatch_loss",
    "grad_norm",
    "mass_moved",
    "potential",
    "fisher_min_eig",
    "compatible_loss",
    "wallclock_ms",
];

/// Identifies the code that produced an artifact.
pub fn build_id() -> String {
    format!("dro-pref-{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub iter: usize,
    pub robust_minibatch_loss: f64,
    pub uniform_minibatch_loss: f64,
    pub grad_norm: f64,
    pub mass_moved: f64,
    pub potential: f64,
    pub fisher_min_eig: f64,
    pub compatible_loss: f64,
    pub wallclock_ms: f64,
}

impl ReportRow {
    pub fn new(iter: usize) -> Self {
        Self {
            iter,
            robust_minibatch_loss: f64::NAN,
            uniform_minibatch_loss: f64::NAN,
            grad_norm: f64::NAN,
            mass_moved: f64::NAN,
            potential: f64::NAN,
            fisher_min_eig: f64::NAN,
            compatible_loss: f64::NAN,
            wallclock_ms: f64::NAN,
        }
    }

    fn values(&self) -> [f64; 8] {
        [
            self.robust_minibatch_loss,
            self.uniform_minibatch_loss,
            self.grad_norm,
            self.mass_moved,
            self.potential,
            self.fisher_min_eig,
            self.compatible_loss,
            self.wallclock_ms,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub config_digest: String,
    pub build_id: String,
    pub rows: Vec<ReportRow>,
}

fn csv_float(v: f64) -> String {
    if v.is_finite() {
        float17::format(v)
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn parse_float(s: &str) -> Result<f64> {
    match s {
        "nan" => Ok(f64::NAN),
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s
            .parse()
            .map_err(|_| Error::Parse(format!("bad float {s:?} in report"))),
    }
}

impl TrainReport {
    pub fn new(config_digest: String) -> Self {
        Self {
            config_digest,
            build_id: build_id(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, f: impl Fn(&ReportRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    /// CSV text; `with_wallclock = false` blanks the timing column so the
    /// output is a deterministic function of the inputs.
    pub fn to_csv_with(&self, with_wallclock: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# config_digest={}", self.config_digest);
        let _ = writeln!(out, "# build_id={}", self.build_id);
        out.push_str(&CSV_COLUMNS.join(","));
        out.push('\n');
        for r in &self.rows {
            let mut vals = r.values();
            if !with_wallclock {
                vals[7] = f64::NAN;
            }
            let cells: Vec<String> = vals.iter().map(|v| csv_float(*v)).collect();
            let _ = writeln!(out, "{},{}", r.iter, cells.join(","));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        self.to_csv_with(true)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut config_digest = None;
        let mut build = None;
        let mut rows = Vec::new();
        let mut header_seen = false;
        for line in text.lines() {
            if let Some(meta) = line.strip_prefix("# ") {
                if let Some(v) = meta.strip_prefix("config_digest=") {
                    config_digest = Some(v.to_string());
                } else if let Some(v) = meta.strip_prefix("build_id=") {
                    build = Some(v.to_string());
                }
                continue;
            }
            if !header_seen {
                if line != CSV_COLUMNS.join(",") {
                    return Err(Error::Parse(format!("unexpected report header {line:?}")));
                }
                header_seen = true;
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != CSV_COLUMNS.len() {
                return Err(Error::Parse(format!("report row has {} cells", cells.len())));
            }
            let iter = cells[0]
                .parse()
                .map_err(|_| Error::Parse(format!("bad iteration {:?}", cells[0])))?;
            let v: Vec<f64> = cells[1..].iter().map(|c| parse_float(c)).collect::<Result<_>>()?;
            rows.push(ReportRow {
                iter,
                robust_minibatch_loss: v[0],
                uniform_minibatch_loss: v[1],
                grad_norm: v[2],
                mass_moved: v[3],
                potential: v[4],
                fisher_min_eig: v[5],
                compatible_loss: v[6],
                wallclock_ms: v[7],
            });
        }
        if !header_seen {
            return Err(Error::Parse("report has no header".into()));
        }
        Ok(Self {
            config_digest: config_digest.ok_or_else(|| Error::Parse("missing config_digest".into()))?,
            build_id: build.ok_or_else(|| Error::Parse("missing build_id".into()))?,
            rows,
        })
    }
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
