//! Grid sweeps: one pretrain + finetune run per (axis value, objective)
//! cell, aggregated into a table with one row per cell and one column per
//! task plus their average.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use varmae::Objective;

use crate::commands::{run_finetune, run_pretrain, TaskScore};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::fsio::{read_input, write_atomic};

pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    MaskingRatio,
    CorpusFraction,
    Objective,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::MaskingRatio => "masking_ratio",
            Axis::CorpusFraction => "corpus_fraction",
            Axis::Objective => "objective",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Number(f64),
    Text(String),
}

impl std::fmt::Display for AxisValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AxisValue::Number(v) => write!(f, "{v}"),
            AxisValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    /// Base run config shared by every cell.
    pub config: PathBuf,
    pub axis: Axis,
    pub values: Vec<AxisValue>,
    /// Objectives crossed with `values`; ignored when the axis is the
    /// objective itself.
    #[serde(default = "both_objectives")]
    pub objectives: Vec<String>,
    pub output_dir: PathBuf,
}

fn both_objectives() -> Vec<String> {
    vec!["mae".into(), "varmae".into()]
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("grid key '{key}': {msg}"))
}

/// One row of the table.
#[derive(Clone, Debug)]
pub struct Cell {
    pub value: AxisValue,
    pub objective: Objective,
    pub dir: PathBuf,
    pub result: Result<Vec<TaskScore>, String>,
}

impl SweepGrid {
    pub fn load(path: &Path, output_root: Option<&Path>) -> CliResult<(Self, RunConfig)> {
        let text = read_input(path, "grid")?;
        let mut grid: SweepGrid = toml::from_str(&text).map_err(|e| CliError::usage(format!("grid: {}", e.message())))?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        if grid.config.is_relative() {
            grid.config = base.join(&grid.config);
        }
        if grid.output_dir.is_relative() {
            grid.output_dir = output_root.unwrap_or(&base).join(&grid.output_dir);
        }
        let cfg = RunConfig::load(&grid.config, output_root)?;
        grid.validate()?;
        Ok((grid, cfg))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.values.is_empty() {
            return Err(bad("values", "needs at least one value"));
        }
        for v in &self.values {
            match (self.axis, v) {
                (Axis::MaskingRatio, AxisValue::Number(r)) if *r > 0.0 && *r < 1.0 => {}
                (Axis::CorpusFraction, AxisValue::Number(f)) if *f > 0.0 && *f <= 1.0 => {}
                (Axis::Objective, AxisValue::Text(s)) if s.parse::<Objective>().is_ok() => {}
                (Axis::MaskingRatio, _) => return Err(bad("values", format!("masking ratio {v} outside (0, 1)"))),
                (Axis::CorpusFraction, _) => return Err(bad("values", format!("corpus fraction {v} outside (0, 1]"))),
                (Axis::Objective, _) => return Err(bad("values", format!("'{v}' is not mae or varmae"))),
            }
        }
        if self.axis != Axis::Objective {
            if self.objectives.is_empty() {
                return Err(bad("objectives", "needs at least one objective"));
            }
            for o in &self.objectives {
                o.parse::<Objective>().map_err(|e| bad("objectives", e))?;
            }
        }
        Ok(())
    }

    /// (value, objective) pairs in table order.
    pub fn cells(&self) -> Vec<(AxisValue, Objective)> {
        let parse = |s: &str| s.parse::<Objective>().expect("validated");
        match self.axis {
            Axis::Objective => self
                .values
                .iter()
                .map(|v| (v.clone(), parse(&v.to_string())))
                .collect(),
            _ => self
                .values
                .iter()
                .flat_map(|v| self.objectives.iter().map(move |o| (v.clone(), parse(o))))
                .collect(),
        }
    }

    /// The base config with one cell's settings applied.
    pub fn cell_config(&self, base: &RunConfig, value: &AxisValue, objective: Objective, index: usize) -> RunConfig {
        let mut cfg = base.clone();
        match (self.axis, value) {
            (Axis::MaskingRatio, AxisValue::Number(r)) => cfg.pretrain.masking_ratio = *r,
            (Axis::CorpusFraction, AxisValue::Number(f)) => cfg.data.corpus_fraction = *f,
            _ => {}
        }
        cfg.pretrain.objective = objective.to_string();
        cfg.output_dir = self
            .output_dir
            .join(format!("cell{index:02}_{}={value}_{objective}", self.axis.name()));
        cfg
    }
}

fn run_cell(cfg: &RunConfig) -> CliResult<Vec<TaskScore>> {
    cfg.validate()?;
    let pre = run_pretrain(cfg)?;
    Ok(run_finetune(cfg, &pre.checkpoint)?.scores)
}

/// Runs every cell; failures are recorded in the table rather than
/// stopping the sweep.
pub fn run_sweep(grid: &SweepGrid, base: &RunConfig, mut progress: impl FnMut(&Cell)) -> CliResult<(Vec<Cell>, PathBuf)> {
    let mut cells = Vec::new();
    for (i, (value, objective)) in grid.cells().into_iter().enumerate() {
        let cfg = grid.cell_config(base, &value, objective, i);
        let result = run_cell(&cfg).map_err(|e| e.to_string());
        let cell = Cell {
            value,
            objective,
            dir: cfg.output_dir,
            result,
        };
        progress(&cell);
        cells.push(cell);
    }
    let tasks: Vec<String> = base.tasks.iter().map(|t| t.name.clone()).collect();
    let path = grid.output_dir.join(SWEEP_FILE);
    write_atomic(&path, sweep_csv(grid.axis, &tasks, &cells).as_bytes())?;
    Ok((cells, path))
}

/// Mean of the per-task scores, or `None` when there are none.
pub fn average(scores: &[TaskScore]) -> Option<f64> {
    (!scores.is_empty()).then(|| scores.iter().map(|s| s.mean).sum::<f64>() / scores.len() as f64)
}

pub fn sweep_csv(axis: Axis, tasks: &[String], cells: &[Cell]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![axis.name().to_string(), "objective".into()];
    header.extend(tasks.iter().cloned());
    header.extend(["average".into(), "status".into()]);
    w.write_record(&header).expect("in-memory write");
    for c in cells {
        let mut row = vec![c.value.to_string(), c.objective.to_string()];
        match &c.result {
            Ok(scores) => {
                for t in tasks {
                    row.push(scores.iter().find(|s| &s.task == t).map(|s| s.mean.to_string()).unwrap_or_default());
                }
                row.push(average(scores).map(|a| a.to_string()).unwrap_or_default());
                row.push("ok".into());
            }
            Err(e) => {
                row.extend(std::iter::repeat_n(String::new(), tasks.len() + 1));
                row.push(format!("failed: {e}"));
            }
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(axis: Axis, values: Vec<AxisValue>) -> SweepGrid {
        SweepGrid {
            config: "c.toml".into(),
            axis,
            values,
            objectives: both_objectives(),
            output_dir: "/tmp/s".into(),
        }
    }

    #[test]
    fn cells_cross_values_with_objectives() {
        let g = grid(Axis::MaskingRatio, vec![AxisValue::Number(0.05), AxisValue::Number(0.15), AxisValue::Number(0.3)]);
        g.validate().unwrap();
        let cells = g.cells();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1], (AxisValue::Number(0.05), Objective::VarMae));
        let o = grid(Axis::Objective, vec![AxisValue::Text("mae".into())]);
        assert_eq!(o.cells(), vec![(AxisValue::Text("mae".into()), Objective::Mae)]);
    }

    #[test]
    fn out_of_domain_values_are_rejected() {
        assert!(grid(Axis::MaskingRatio, vec![AxisValue::Number(1.0)]).validate().is_err());
        assert!(grid(Axis::CorpusFraction, vec![AxisValue::Number(0.0)]).validate().is_err());
        grid(Axis::CorpusFraction, vec![AxisValue::Number(1.0)]).validate().unwrap();
        assert!(grid(Axis::Objective, vec![AxisValue::Text("bert".into())]).validate().is_err());
        let e = grid(Axis::MaskingRatio, vec![]).validate().unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn failed_cells_keep_their_row() {
        let score = |t: &str, m: f64| TaskScore {
            task: t.into(),
            metric: "accuracy".into(),
            mean: m,
            per_seed: vec![],
        };
        let cells = vec![
            Cell {
                value: AxisValue::Number(0.15),
                objective: Objective::Mae,
                dir: "a".into(),
                result: Ok(vec![score("x", 0.5), score("y", 1.0)]),
            },
            Cell {
                value: AxisValue::Number(0.15),
                objective: Objective::VarMae,
                dir: "b".into(),
                result: Err("boom".into()),
            },
        ];
        let csv = sweep_csv(Axis::MaskingRatio, &["x".into(), "y".into()], &cells);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "masking_ratio,objective,x,y,average,status");
        assert_eq!(lines[1], "0.15,mae,0.5,1,0.75,ok");
        assert_eq!(lines[2], "0.15,varmae,,,,failed: boom");
    }
}
