use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pretrain::report::TrainReport;

pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 0.01;
pub const MIN_HISTORY: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollapseStatus {
    Healthy,
    Collapsed,
}

/// Mean per-token KL over the trailing 20% of logged rows (at least one).
pub fn trailing_kl(report: &TrainReport) -> Result<f64> {
    let n = report.rows.len();
    if n < MIN_HISTORY {
        return Err(Error::InsufficientHistory(format!(
            "{n} logged steps, need at least {MIN_HISTORY}"
        )));
    }
    let window = n.div_ceil(5);
    let tail = &report.rows[n - window..];
    Ok(tail.iter().map(|r| r.kl_per_token).sum::<f64>() / window as f64)
}

/// Collapsed iff the trailing mean per-token KL is below `threshold` nats.
pub fn collapse_monitor(report: &TrainReport, threshold: f64) -> Result<CollapseStatus> {
    Ok(if trailing_kl(report)? < threshold {
        CollapseStatus::Collapsed
    } else {
        CollapseStatus::Healthy
    })
}
