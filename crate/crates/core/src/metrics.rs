//! Per-step training metrics and their CSV form.
//!
//! Column order: `step, lr, loss_total, <components...>, eval_accuracy, wall_ms`.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f32,
    pub components: Vec<f32>,
    pub eval_accuracy: Option<f32>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub component_names: Vec<String>,
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn new(component_names: Vec<String>) -> Self {
        MetricLog {
            component_names,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if row.components.len() != self.component_names.len() {
            return Err(Error::Contract(format!(
                "{} components for {} columns",
                row.components.len(),
                self.component_names.len()
            )));
        }
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Contract(format!("step {} after step {}", row.step, last.step)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["step".to_string(), "lr".into(), "loss_total".into()];
        h.extend(self.component_names.iter().cloned());
        h.push("eval_accuracy".into());
        h.push("wall_ms".into());
        h
    }

    pub fn last_loss(&self) -> Option<f32> {
        self.rows.last().map(|r| r.loss_total)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), format!("{:e}", r.lr), r.loss_total.to_string()];
            rec.extend(r.components.iter().map(|c| c.to_string()));
            rec.push(r.eval_accuracy.map(|a| a.to_string()).unwrap_or_default());
            rec.push(r.wall_ms.to_string());
            w.write_record(rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let n = header.len();
        if n < 5 || header[0] != "step" || header[n - 1] != "wall_ms" {
            return Err(Error::Contract(format!("{} is not a metrics file", path.display())));
        }
        let mut log = MetricLog::new(header[3..n - 2].to_vec());
        let bad = |what: &str| Error::Contract(format!("{}: bad {what}", path.display()));
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            let comps = (3..n - 2)
                .map(|i| f(i).parse::<f32>().map_err(|_| bad("loss")))
                .collect::<Result<Vec<_>>>()?;
            log.push(MetricRow {
                step: f(0).parse().map_err(|_| bad("step"))?,
                lr: f(1).parse().map_err(|_| bad("lr"))?,
                loss_total: f(2).parse().map_err(|_| bad("loss_total"))?,
                components: comps,
                eval_accuracy: if f(n - 2).is_empty() {
                    None
                } else {
                    Some(f(n - 2).parse().map_err(|_| bad("eval_accuracy"))?)
                },
                wall_ms: f(n - 1).parse().map_err(|_| bad("wall_ms"))?,
            })?;
        }
        Ok(log)
    }
}
