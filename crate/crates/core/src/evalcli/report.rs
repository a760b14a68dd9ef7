//! Aggregation of run directories into comparison tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::{MetricEntry, MetricsReport};
use crate::error::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Column order of `report_long.csv`.
pub const LONG_HEADER: &str = "run,command,mode,rank,targets,region,lead_hours,variable,rmse,acc,trainable_params,total_params,peak_bytes";

/// Deterministic per-run facts written next to the metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub command: String,
    /// `fft`, `lora`, `reslora`, `glora`, or `none` for untrained runs.
    pub mode: String,
    /// 0 when the mode has no rank.
    pub rank: usize,
    /// Target selector, empty when no adapters are attached.
    pub targets: String,
    /// Region label, `global` when uncropped.
    pub region: String,
    pub trainable_params: usize,
    pub total_params: usize,
    /// Tracked peak bytes during training; 0 when nothing was trained.
    pub peak_bytes: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub run: String,
    pub summary: RunSummary,
    pub metrics: Vec<MetricEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    /// Variables in first-seen order; the wide table's column order.
    pub variables: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Run directories: each root that itself holds metrics, plus its direct
/// children that do.
pub fn discover_runs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for root in roots {
        if root.join(METRICS_JSON).is_file() {
            out.push(root.clone());
            continue;
        }
        let entries = std::fs::read_dir(root).map_err(|e| Error::Config(format!("cannot list {}: {e}", root.display())))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(METRICS_JSON).is_file() && p.join(SUMMARY_FILE).is_file())
            .collect();
        dirs.sort();
        out.extend(dirs);
    }
    if out.is_empty() {
        return Err(Error::Config("no run directories with metrics.json and summary.json found".into()));
    }
    Ok(out)
}

impl RunReport {
    /// Rows ordered by command, mode, targets, rank, then run id.
    pub fn collect(dirs: &[PathBuf]) -> Result<Self> {
        let mut rows = Vec::with_capacity(dirs.len());
        for d in dirs {
            let metrics: MetricsReport = read_json(&d.join(METRICS_JSON))?;
            let summary: RunSummary = read_json(&d.join(SUMMARY_FILE))?;
            let run = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            rows.push(ReportRow {
                run,
                summary,
                metrics: metrics.entries,
            });
        }
        rows.sort_by(|a, b| {
            let key = |r: &ReportRow| (r.summary.command.clone(), r.summary.mode.clone(), r.summary.targets.clone(), r.summary.rank, r.run.clone());
            key(a).cmp(&key(b))
        });
        let mut variables: Vec<String> = Vec::new();
        for r in &rows {
            for m in &r.metrics {
                if !variables.contains(&m.variable) {
                    variables.push(m.variable.clone());
                }
            }
        }
        Ok(Self { variables, rows })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One line per (run, lead, variable); columns [`LONG_HEADER`].
    pub fn to_long_csv(&self) -> String {
        let mut out = format!("{LONG_HEADER}\n");
        for r in &self.rows {
            let s = &r.summary;
            for m in &r.metrics {
                let acc = m.acc.map(|a| format!("{a:?}")).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{:?},{},{},{},{}",
                    r.run, s.command, s.mode, s.rank, csv_field(&s.targets), csv_field(&s.region), m.lead_hours, m.variable, m.rmse, acc,
                    s.trainable_params, s.total_params, s.peak_bytes
                );
            }
        }
        out
    }

    /// One line per (run, lead): identifying columns, then `<var>_rmse` for
    /// every variable, then `<var>_acc`.
    pub fn to_wide_csv(&self) -> String {
        let mut out = "run,mode,rank,targets,region,lead_hours,trainable_params,total_params,peak_bytes".to_string();
        for v in &self.variables {
            let _ = write!(out, ",{v}_rmse");
        }
        for v in &self.variables {
            let _ = write!(out, ",{v}_acc");
        }
        out.push('\n');
        for r in &self.rows {
            let s = &r.summary;
            let mut leads: Vec<u32> = r.metrics.iter().map(|m| m.lead_hours).collect();
            leads.dedup();
            for lead in leads {
                let _ = write!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    r.run, s.mode, s.rank, csv_field(&s.targets), csv_field(&s.region), lead, s.trainable_params, s.total_params, s.peak_bytes
                );
                let find = |v: &str| r.metrics.iter().find(|m| m.variable == v && m.lead_hours == lead);
                for v in &self.variables {
                    let cell = find(v).map(|m| format!("{:?}", m.rmse)).unwrap_or_default();
                    let _ = write!(out, ",{cell}");
                }
                for v in &self.variables {
                    let cell = find(v).and_then(|m| m.acc).map(|a| format!("{a:?}")).unwrap_or_default();
                    let _ = write!(out, ",{cell}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Writes `report.json`, `report_long.csv` and `report_table.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("report_long.csv"), self.to_long_csv())?;
        std::fs::write(dir.join("report_table.csv"), self.to_wide_csv())?;
        Ok(())
    }
}

/// Quotes fields holding commas or quotes.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
