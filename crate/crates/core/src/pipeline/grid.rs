//! Cartesian ablation grids over a base plan.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::classify::{evaluate, EvalConfig};
use super::plan::{canonical_hash, DistillPlan};
use super::train::{run_stage, STUDENT_CHECKPOINT};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::report::Table;
use crate::vit::ViTModel;

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_TABLE: &str = "results.txt";
pub const GRID_FILE: &str = "grid.json";

/// One factor of the grid. With `path`, each value is written at that dotted
/// path of the plan. Without it, each value is an object mapping dotted
/// paths to values, which varies several fields together (one row per
/// object).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub name: String,
    #[serde(default)]
    pub path: Option<String>,
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub base_plan: DistillPlan,
    pub axes: Vec<GridAxis>,
    /// When present (and labeled data is supplied) each cell is evaluated.
    #[serde(default)]
    pub eval: Option<EvalConfig>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        self.base_plan.validate("$.base_plan")?;
        for (i, a) in self.axes.iter().enumerate() {
            if a.values.is_empty() {
                return Err(Error::config(format!("$.axes[{i}].values"), "axis has no values"));
            }
            if a.path.is_none() {
                if let Some(j) = a.values.iter().position(|v| !v.is_object()) {
                    return Err(Error::config(
                        format!("$.axes[{i}].values[{j}]"),
                        "without `path`, values must be objects of path → value",
                    ));
                }
            }
        }
        if let Some(e) = &self.eval {
            e.train.validate("$.eval.train")?;
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// Axis value indices of every cell, first axis varying slowest.
    pub fn cells(&self) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for a in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..a.values.len()).map(move |i| {
                        let mut p = prefix.clone();
                        p.push(i);
                        p
                    })
                })
                .collect();
        }
        out
    }

    /// The plan of one cell.
    pub fn cell_plan(&self, cell: &[usize]) -> Result<DistillPlan> {
        let mut v = serde_json::to_value(&self.base_plan).expect("serializable");
        for (a, &i) in self.axes.iter().zip(cell) {
            match &a.path {
                Some(p) => set_path(&mut v, p, a.values[i].clone())?,
                None => {
                    for (p, x) in a.values[i].as_object().expect("validated") {
                        set_path(&mut v, p, x.clone())?;
                    }
                }
            }
        }
        let plan: DistillPlan =
            serde_json::from_value(v).map_err(|e| Error::config("$.axes", format!("cell plan is invalid: {e}")))?;
        plan.validate("$")?;
        Ok(plan)
    }

    pub fn cell_labels(&self, cell: &[usize]) -> Vec<String> {
        self.axes
            .iter()
            .zip(cell)
            .map(|(a, &i)| match &a.values[i] {
                Value::Object(m) => m.values().map(label).collect::<Vec<_>>().join(" / "),
                v => label(v),
            })
            .collect()
    }
}

fn label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(xs) => xs.iter().map(label).collect::<Vec<_>>().join(","),
        Value::Null => "-".into(),
        v => v.to_string(),
    }
}

/// Writes `value` at a dotted path, creating objects along the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::config("$.axes", format!("bad path {path:?}")));
        }
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(Error::config("$.axes", format!("{path:?} descends into a non-object")));
            }
        }
        let obj = cur.as_object_mut().expect("object");
        if k + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: usize,
    pub labels: Vec<String>,
    pub ok: bool,
    pub final_loss: Option<f32>,
    pub accuracy: Option<f32>,
    pub student_hash: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub axis_names: Vec<String>,
    pub rows: Vec<GridRow>,
}

impl GridReport {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok).count()
    }

    pub fn table(&self) -> Table {
        let mut headers = vec!["cell".to_string()];
        headers.extend(self.axis_names.iter().cloned());
        headers.extend(["status", "final_loss", "accuracy"].map(String::from));
        let fmt = |x: Option<f32>, digits: usize| x.map_or("-".into(), |v| format!("{v:.digits$}"));
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.cell.to_string()];
                row.extend(r.labels.iter().cloned());
                row.push(if r.ok { "ok".into() } else { "failed".into() });
                row.push(fmt(r.final_loss, 5));
                row.push(fmt(r.accuracy.map(|a| 100.0 * a), 1));
                row
            })
            .collect();
        Table { headers, rows }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESULTS_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["cell".to_string()];
        header.extend(self.axis_names.iter().cloned());
        header.extend(["status", "final_loss", "accuracy", "student_hash", "error"].map(String::from));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.cell.to_string()];
            rec.extend(r.labels.iter().cloned());
            rec.push(if r.ok { "ok".into() } else { "failed".into() });
            rec.push(r.final_loss.map(|v| v.to_string()).unwrap_or_default());
            rec.push(r.accuracy.map(|v| v.to_string()).unwrap_or_default());
            rec.push(r.student_hash.clone().unwrap_or_default());
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let tp = dir.join(RESULTS_TABLE);
        fs::write(&tp, self.table().render()).map_err(|e| Error::io(&tp, e))
    }
}

/// Data a grid needs: the distillation set and, optionally, labeled
/// train/test sets for per-cell evaluation.
pub struct GridData<'a> {
    pub distill: &'a Dataset,
    pub eval: Option<(&'a Dataset, &'a Dataset)>,
}

pub fn cell_dir(root: &Path, cell: usize, plan_hash: &str) -> PathBuf {
    root.join("cells").join(format!("{cell:03}-{plan_hash}"))
}

/// Runs every cell (train, then evaluate when configured). Cells fail
/// independently; the merged table is written either way.
pub fn run_grid(spec: &GridSpec, data: &GridData, root: &Path) -> Result<GridReport> {
    spec.validate()?;
    let teacher = spec
        .base_plan
        .teacher_checkpoint
        .clone()
        .ok_or_else(|| Error::config("$.base_plan.teacher_checkpoint", "grid needs a teacher"))?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let gp = root.join(GRID_FILE);
    fs::write(&gp, serde_json::to_string_pretty(spec).expect("serializable")).map_err(|e| Error::io(&gp, e))?;
    let mut rows = Vec::with_capacity(spec.num_cells());
    for (n, cell) in spec.cells().iter().enumerate() {
        let labels = spec.cell_labels(cell);
        let result = spec.cell_plan(cell).and_then(|plan| {
            let dir = cell_dir(root, n, &canonical_hash(&plan));
            let summary = run_stage(&plan, &plan.teacher_checkpoint.clone().unwrap_or(teacher.clone()), data.distill, &dir)?;
            let accuracy = match (&spec.eval, data.eval) {
                (Some(cfg), Some((train, test))) => {
                    let student = ViTModel::load(&dir.join(STUDENT_CHECKPOINT))?;
                    Some(evaluate(&student, train, test, cfg)?.accuracy)
                }
                _ => None,
            };
            Ok((summary, accuracy))
        });
        rows.push(match result {
            Ok((s, accuracy)) => GridRow {
                cell: n,
                labels,
                ok: true,
                final_loss: s.final_loss,
                accuracy,
                student_hash: Some(s.student_hash),
                error: None,
            },
            Err(e) => GridRow {
                cell: n,
                labels,
                ok: false,
                final_loss: None,
                accuracy: None,
                student_hash: None,
                error: Some(e.to_string()),
            },
        });
    }
    let report = GridReport {
        axis_names: spec.axes.iter().map(|a| a.name.clone()).collect(),
        rows,
    };
    report.write(root)?;
    Ok(report)
}
