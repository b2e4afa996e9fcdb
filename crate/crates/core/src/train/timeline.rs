use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    pub valid_loss: f64,
    /// `Sink_k^ε` for each tracked `k`, in column order.
    pub sinks: Vec<f64>,
}

/// Metric rows recorded at each evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    /// Tracked sink positions; column `sink_{k}` per entry.
    pub ks: Vec<usize>,
    pub eps: f64,
    pub rows: Vec<TimelineRow>,
}

impl Timeline {
    pub fn new(ks: Vec<usize>, eps: f64) -> Self {
        Self {
            ks,
            eps,
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> String {
        let mut h = String::from("step,lr,train_loss,valid_loss");
        for k in &self.ks {
            let _ = write!(h, ",sink_{k}");
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{}", r.step, r.lr, r.train_loss, r.valid_loss);
            for s in &r.sinks {
                let _ = write!(out, ",{s}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses CSV written by [`Timeline::to_csv`]; `eps` is not stored in the file.
    pub fn from_csv(text: &str, eps: f64) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty timeline".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[..4] != ["step", "lr", "train_loss", "valid_loss"] {
            return Err(Error::Format(format!("unexpected timeline header `{header}`")));
        }
        let ks = cols[4..]
            .iter()
            .map(|c| {
                c.strip_prefix("sink_")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad sink column `{c}`")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let mut timeline = Timeline::new(ks, eps);
        for (n, line) in lines.enumerate() {
            let bad = || Error::Format(format!("timeline line {}: `{line}`", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            timeline.rows.push(TimelineRow {
                step: f[0].parse().map_err(|_| bad())?,
                lr: num(f[1])?,
                train_loss: num(f[2])?,
                valid_loss: num(f[3])?,
                sinks: f[4..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            });
        }
        Ok(timeline)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut t = Timeline::new(vec![1, 2], 0.3);
        t.rows.push(TimelineRow {
            step: 10,
            lr: 1e-4,
            train_loss: 5.25,
            valid_loss: 5.5,
            sinks: vec![0.25, 0.0],
        });
        let csv = t.to_csv();
        assert!(csv.starts_with("step,lr,train_loss,valid_loss,sink_1,sink_2\n"));
        assert_eq!(Timeline::from_csv(&csv, 0.3).unwrap(), t);
        assert!(Timeline::from_csv("a,b\n", 0.3).is_err());
    }
}
