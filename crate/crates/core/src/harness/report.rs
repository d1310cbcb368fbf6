//! Run reports and their CSV / Markdown rendering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{AttackReport, DefenseReport};

/// Everything one pipeline run measured, plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Column header in rendered tables.
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub candidates: usize,
    pub attack: AttackReport,
    pub defense: Option<DefenseReport>,
    /// Wall-clock seconds per pipeline stage.
    pub stage_times: BTreeMap<String, f64>,
}

impl RunReport {
    /// Copy with every wall-clock-derived field cleared.
    pub fn without_timing(&self) -> Self {
        Self {
            attack: self.attack.without_timing(),
            defense: self.defense.as_ref().map(DefenseReport::without_timing),
            stage_times: BTreeMap::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::config(format!("unknown report format `{other}`"))),
        }
    }
}

pub const ATTACK_ROWS: [&str; 9] = ["MR", "ACAC", "ACTC", "ALDp", "ASS", "PSD", "NTE", "RGB", "CC"];
pub const DEFENSE_ROWS: [&str; 7] = ["ACC (raw)", "ACC (defended)", "CAV", "CRR", "CSR", "CCV", "COS"];
pub const NA: &str = "n/a";

fn fixed(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| NA.to_string(), |v| format!("{v:.decimals$}"))
}

fn percent_signed(v: f64) -> String {
    format!("{:+.2}%", 100.0 * v)
}

fn attack_column(a: &AttackReport) -> Vec<String> {
    let aldp = a.aldp.map_or_else(
        || NA.to_string(),
        |d| format!("L0 {:.3}; L1 {:.3}; L2 {:.3}; Linf {:.3}", d.l0, d.l1, d.l2, d.linf),
    );
    vec![
        fixed(Some(a.mr), 3),
        fixed(a.acac, 3),
        fixed(a.actc, 3),
        aldp,
        fixed(a.ass, 3),
        fixed(a.psd, 3),
        fixed(a.nte, 3),
        fixed(a.rgb, 3),
        // milliseconds per example
        fixed(Some(a.cc * 1e3), 3),
    ]
}

fn defense_column(d: Option<&DefenseReport>) -> Vec<String> {
    match d {
        None => vec![NA.to_string(); DEFENSE_ROWS.len()],
        Some(d) => vec![
            fixed(Some(d.acc_raw), 3),
            fixed(Some(d.acc_defended), 3),
            percent_signed(d.cav),
            fixed(Some(d.crr), 3),
            fixed(Some(d.csr), 3),
            fixed(d.ccv, 3),
            fixed(d.cos, 4),
        ],
    }
}

/// Row-major cell grid: `(title, row labels, one column per run)`.
pub struct Table {
    pub title: &'static str,
    pub rows: Vec<&'static str>,
    pub columns: Vec<(String, Vec<String>)>,
}

impl Table {
    pub fn cell(&self, row: &str, column: usize) -> Option<&str> {
        let r = self.rows.iter().position(|&l| l == row)?;
        self.columns.get(column).map(|c| c.1[r].as_str())
    }
}

pub fn tables(runs: &[RunReport]) -> [Table; 2] {
    [
        Table {
            title: "Attack utility",
            rows: ATTACK_ROWS.to_vec(),
            columns: runs.iter().map(|r| (r.name.clone(), attack_column(&r.attack))).collect(),
        },
        Table {
            title: "Defense utility",
            rows: DEFENSE_ROWS.to_vec(),
            columns: runs.iter().map(|r| (r.name.clone(), defense_column(r.defense.as_ref()))).collect(),
        },
    ]
}

fn markdown(tables: &[Table]) -> String {
    let mut out = String::new();
    for t in tables {
        out.push_str(&format!("## {}\n\n| Metric |", t.title));
        for (name, _) in &t.columns {
            out.push_str(&format!(" {name} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(t.columns.len()));
        out.push('\n');
        for (i, row) in t.rows.iter().enumerate() {
            out.push_str(&format!("| {row} |"));
            for (_, cells) in &t.columns {
                out.push_str(&format!(" {} |", cells[i]));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out.push_str("CC is in milliseconds per example; CAV is a signed percentage; COS uses natural log.\n");
    out
}

fn csv(tables: &[Table]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::internal(e.to_string());
    for t in tables {
        let mut header = vec!["table".to_string(), "metric".to_string()];
        header.extend(t.columns.iter().map(|c| c.0.clone()));
        w.write_record(&header).map_err(err)?;
        for (i, row) in t.rows.iter().enumerate() {
            let mut rec = vec![t.title.to_string(), row.to_string()];
            rec.extend(t.columns.iter().map(|c| c.1[i].clone()));
            w.write_record(&rec).map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::internal(e.to_string()))
}

/// Renders the attack and defense tables for `runs`, one column per run.
pub fn emit_report(runs: &[RunReport], format: ReportFormat) -> Result<String> {
    let t = tables(runs);
    match format {
        ReportFormat::Markdown => Ok(markdown(&t)),
        ReportFormat::Csv => csv(&t),
    }
}
