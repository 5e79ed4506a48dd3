use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged optimizer step; loss parts are averaged over the step's
/// micro-batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub recon_masked: f64,
    pub recon_unmasked: f64,
    pub kl_masked: f64,
    pub kl_unmasked: f64,
    pub masked_accuracy: f64,
    pub kl_per_token: f64,
    pub learning_rate: f64,
    /// Seconds since training started. Not written to CSV.
    #[serde(skip)]
    pub wall_clock: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
}

pub const CSV_HEADER: &str =
    "step,epoch,total,recon_masked,recon_unmasked,kl_masked,kl_unmasked,masked_accuracy,kl_per_token,learning_rate";

impl ReportRow {
    fn values(&self) -> [f64; 8] {
        [
            self.total,
            self.recon_masked,
            self.recon_unmasked,
            self.kl_masked,
            self.kl_unmasked,
            self.masked_accuracy,
            self.kl_per_token,
            self.learning_rate,
        ]
    }
}

impl TrainReport {
    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Contract(format!("report step {} after {}", row.step, last.step)));
            }
        }
        if row.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite report row at step {}", row.step)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn last(&self) -> Option<&ReportRow> {
        self.rows.last()
    }

    /// Fixed header, one line per row, shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{}", r.step, r.epoch));
            for v in r.values() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(Error::Data {
                    line: 1,
                    msg: "missing or unexpected train report header".into(),
                })
            }
        }
        let mut report = TrainReport::default();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Data { line: i + 1, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad(format!("expected 10 fields, found {}", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("'{s}': {e}")));
            let num: Vec<f64> = f[2..]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| bad(format!("'{s}': {e}"))))
                .collect::<Result<_>>()?;
            report.push(ReportRow {
                step: int(f[0])?,
                epoch: int(f[1])?,
                total: num[0],
                recon_masked: num[1],
                recon_unmasked: num[2],
                kl_masked: num[3],
                kl_unmasked: num[4],
                masked_accuracy: num[5],
                kl_per_token: num[6],
                learning_rate: num[7],
                wall_clock: 0.0,
            })?;
        }
        Ok(report)
    }
}
