//! Aligned text tables, and merging of run directories into them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricLog;
use crate::pipeline::{StageSummary, METRICS_FILE, PLAN_FILE, RESULTS_CSV, SUMMARY_FILE};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    /// Left-aligned columns separated by ` | `, with a rule under the header.
    pub fn render(&self) -> String {
        let cols = self.headers.len();
        let mut width: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (i, c) in r.iter().enumerate().take(cols) {
                width[i] = width[i].max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = (0..cols)
                .map(|i| {
                    let c = cells.get(i).map_or("", String::as_str);
                    format!("{c:<w$}", w = width[i])
                })
                .collect();
            parts.join(" | ").trim_end().to_string()
        };
        let mut out = String::new();
        writeln!(out, "{}", line(&self.headers)).unwrap();
        let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
        writeln!(out, "{}", rule.join("-+-")).unwrap();
        for r in &self.rows {
            writeln!(out, "{}", line(r)).unwrap();
        }
        out
    }
}

/// Table from a grid's `results.csv`, minus the bookkeeping columns.
pub fn grid_table(dir: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(dir.join(RESULTS_CSV))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let keep: Vec<usize> = (0..header.len())
        .filter(|&i| header[i] != "student_hash" && header[i] != "error")
        .collect();
    let acc = header.iter().position(|h| h == "accuracy");
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(
            keep.iter()
                .map(|&i| {
                    let v = rec.get(i).unwrap_or("");
                    match (Some(i) == acc, v.parse::<f32>()) {
                        (true, Ok(a)) => format!("{:.1}", 100.0 * a),
                        _ if v.is_empty() => "-".to_string(),
                        _ => v.to_string(),
                    }
                })
                .collect(),
        );
    }
    Ok(Table {
        headers: keep.iter().map(|&i| header[i].clone()).collect(),
        rows,
    })
}

/// One row per stage directory: loss strategy, steps and final losses.
pub fn runs_table(dirs: &[&Path]) -> Result<Table> {
    let mut components: Vec<String> = Vec::new();
    let mut logs = Vec::new();
    for d in dirs {
        let log = MetricLog::read_csv(&d.join(METRICS_FILE))?;
        for c in &log.component_names {
            if !components.contains(c) {
                components.push(c.clone());
            }
        }
        let sp = d.join(SUMMARY_FILE);
        let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let summary: StageSummary = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: sp.clone(),
            message: e.to_string(),
        })?;
        let pp = d.join(PLAN_FILE);
        let plan: serde_json::Value = fs::read_to_string(&pp)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        logs.push((d, log, summary, plan));
    }
    let mut headers: Vec<String> = ["run", "strategy", "target_block", "steps", "loss_total"].map(String::from).into();
    headers.extend(components.iter().cloned());
    let rows = logs
        .iter()
        .map(|(d, log, s, plan)| {
            let strategy = &plan["loss_strategy"];
            let kind = strategy["kind"].as_str().unwrap_or("?").to_string();
            let detail = match kind.as_str() {
                "feature" => format!("feature:{}", strategy["feature_target"].as_str().unwrap_or("output")),
                "relation" => format!(
                    "relation:{}",
                    strategy["relation_pairs"]
                        .as_array()
                        .map(|a| a.iter().filter_map(|p| p.as_str()).collect::<Vec<_>>().join("+"))
                        .unwrap_or_default()
                ),
                _ => kind,
            };
            let mut row = vec![
                d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned()),
                detail,
                s.target_block.to_string(),
                s.steps.to_string(),
                s.final_loss.map_or("-".into(), |v| format!("{v:.5}")),
            ];
            let last = log.rows.last();
            for c in &components {
                let v = log
                    .component_names
                    .iter()
                    .position(|n| n == c)
                    .and_then(|i| last.map(|r| r.components[i]));
                row.push(v.map_or("-".into(), |v| format!("{v:.5}")));
            }
            row
        })
        .collect();
    Ok(Table { headers, rows })
}

/// Renders every directory: grid directories as their results table, stage
/// and chain directories merged into one runs table.
pub fn report(dirs: &[&Path]) -> Result<String> {
    let mut out = String::new();
    let mut runs: Vec<std::path::PathBuf> = Vec::new();
    for d in dirs {
        if d.join(RESULTS_CSV).exists() {
            writeln!(out, "## {}", d.display()).unwrap();
            out.push_str(&grid_table(d)?.render());
            out.push('\n');
        } else if d.join(SUMMARY_FILE).exists() {
            runs.push(d.to_path_buf());
        } else {
            let mut stages: Vec<_> = fs::read_dir(d)
                .map_err(|e| Error::io(*d, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(SUMMARY_FILE).exists())
                .collect();
            if stages.is_empty() {
                return Err(Error::Contract(format!("{} holds no run results", d.display())));
            }
            stages.sort();
            runs.extend(stages);
        }
    }
    if !runs.is_empty() {
        let refs: Vec<&Path> = runs.iter().map(|p| p.as_path()).collect();
        out.push_str(&runs_table(&refs)?.render());
    }
    Ok(out)
}
