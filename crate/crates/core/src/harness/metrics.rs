//! Append-only training log, exported as CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub tau: f64,
    pub terms: Vec<f64>,
    pub total: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

/// Rows of one run; the loss-term columns are fixed by the first row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub terms: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, names: &[&str], row: MetricsRow) -> Result<()> {
        if self.rows.is_empty() {
            self.terms = names.iter().map(|s| s.to_string()).collect();
        } else if self.terms.iter().map(String::as_str).ne(names.iter().copied()) {
            return Err(Error::Parameter(format!("loss terms changed to {names:?}")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Attaches an evaluation accuracy to the latest row.
    pub fn set_eval(&mut self, acc: f64) {
        if let Some(r) = self.rows.last_mut() {
            r.eval_acc = Some(acc);
        }
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["step", "epoch", "lr", "tau"];
        cols.extend(self.terms.iter().map(String::as_str));
        cols.extend(["total", "train_acc", "eval_acc"]);
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{}", r.step, r.epoch, r.lr, r.tau);
            for t in &r.terms {
                let _ = write!(s, ",{t}");
            }
            let _ = write!(s, ",{},{},", r.total, r.train_acc);
            if let Some(e) = r.eval_acc {
                let _ = write!(s, "{e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Totals smoothed with a trailing window of `w` steps.
    pub fn smoothed_totals(&self, w: usize) -> Vec<f64> {
        smooth(&self.rows.iter().map(|r| r.total).collect::<Vec<_>>(), w)
    }
}

/// Trailing moving average; the first entries average what is available.
pub fn smooth(v: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(v.len());
    let mut acc = 0.0;
    for i in 0..v.len() {
        acc += v[i];
        if i >= w {
            acc -= v[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
