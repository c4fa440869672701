//! Parallel search over the KL weight.

use std::fmt::Write as _;

use modfuse_core::metrics::evaluate;
use modfuse_core::{
    train, EvalReport, FusionModel, ModelConfig, Record, ScheduleConfig, TrainConfig, TrainLog,
};
use rayon::prelude::*;

use crate::config::fmt_f64;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub val: EvalReport,
    pub test: Option<EvalReport>,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub lambda: f64,
    /// A failed cell keeps its error message; the rest of the sweep runs on.
    pub outcome: std::result::Result<SweepRow, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    /// One cell per grid value, in grid order.
    pub cells: Vec<SweepCell>,
    /// Cell with the best validation R@P95, ties to the smaller lambda.
    pub selected: Option<usize>,
}

impl SweepTable {
    pub fn selected_cell(&self) -> Option<&SweepCell> {
        self.selected.map(|i| &self.cells[i])
    }

    pub fn row(&self, lambda: f64) -> Option<&SweepRow> {
        self.cells
            .iter()
            .find(|c| c.lambda == lambda)
            .and_then(|c| c.outcome.as_ref().ok())
    }
}

pub struct SweepData<'a> {
    pub train: &'a [Record],
    pub val: &'a [Record],
    pub test: Option<&'a [Record]>,
}

fn run_cell(
    data: &SweepData<'_>,
    base: &ModelConfig,
    lambda: f64,
    model_seed: u64,
    tcfg: &TrainConfig,
    scfg: &ScheduleConfig,
) -> modfuse_core::Result<SweepRow> {
    let mut config = base.clone();
    config.merger.lambda = lambda;
    let mut model = FusionModel::new(config, model_seed)?;
    let log = train(&mut model, data.train, None, tcfg, scfg)?;
    let report = |records: &[Record]| evaluate(&model.predict(records, 256)?, &tcfg.eval);
    let val = report(data.val)?;
    let test = data.test.map(report).transpose()?;
    Ok(SweepRow { val, test, log })
}

/// Trains one model per grid value. Every cell starts from the same
/// initialization (`model_seed`) and batch order (`tcfg.seed`), so lambda is
/// the only thing that varies.
pub fn lambda_sweep(
    data: &SweepData<'_>,
    grid: &[f64],
    base: &ModelConfig,
    model_seed: u64,
    tcfg: &TrainConfig,
    scfg: &ScheduleConfig,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::format("sweep", "empty lambda grid"));
    }
    if data.val.is_empty() {
        return Err(Error::format("sweep", "empty validation set"));
    }
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&lambda| SweepCell {
            lambda,
            outcome: run_cell(data, base, lambda, model_seed, tcfg, scfg)
                .map_err(|e| e.to_string()),
        })
        .collect();
    let mut selected: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        let Ok(row) = &c.outcome else { continue };
        let better = match selected {
            None => true,
            Some(j) => {
                let best = cells[j].outcome.as_ref().expect("selected cell succeeded");
                row.val.r_at_p95 > best.val.r_at_p95
                    || (row.val.r_at_p95 == best.val.r_at_p95 && c.lambda < cells[j].lambda)
            }
        };
        if better {
            selected = Some(i);
        }
    }
    Ok(SweepTable { cells, selected })
}

/// Tab-separated table, one row per cell, then the selection line.
/// Validation metrics come first; `test_*` columns appear when a test set was
/// given. Gate-free models show `-` for collapse and KL.
pub fn format_sweep_table(t: &SweepTable) -> String {
    let has_test = t
        .cells
        .iter()
        .any(|c| matches!(&c.outcome, Ok(r) if r.test.is_some()));
    let mut out = String::from(
        "lambda\tmicro_f1\tmacro_f1\tweighted_f1\tr_at_p95\tcollapse_fraction\tmean_kl",
    );
    if has_test {
        out.push_str("\ttest_micro_f1\ttest_r_at_p95\ttest_collapse_fraction");
    }
    out.push('\n');
    let f = |x: f64| format!("{x:.6}");
    for c in &t.cells {
        let _ = write!(out, "{}", fmt_f64(c.lambda));
        match &c.outcome {
            Ok(r) => {
                let a = r.val.attention.as_ref();
                let _ = write!(
                    out,
                    "\t{}\t{}\t{}\t{}\t{}\t{}",
                    f(r.val.micro_f1),
                    f(r.val.macro_f1),
                    f(r.val.weighted_f1),
                    f(r.val.r_at_p95),
                    a.map_or("-".into(), |a| f(a.collapse_fraction)),
                    a.map_or("-".into(), |a| f(a.mean_kl)),
                );
                if let Some(test) = &r.test {
                    let _ = write!(
                        out,
                        "\t{}\t{}\t{}",
                        f(test.micro_f1),
                        f(test.r_at_p95),
                        test.attention
                            .as_ref()
                            .map_or("-".into(), |a| f(a.collapse_fraction)),
                    );
                }
            }
            Err(e) => {
                let _ = write!(out, "\terror: {e}");
            }
        }
        out.push('\n');
    }
    match t.selected_cell() {
        Some(c) => {
            let _ = writeln!(out, "selected lambda={}", fmt_f64(c.lambda));
        }
        None => out.push_str("selected lambda=-\n"),
    }
    out
}
