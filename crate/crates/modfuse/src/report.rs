//! Text renderings of training logs, evaluation reports and analyses.
//!
//! Machine-readable lines are space-separated `key=value` pairs in a fixed
//! order, floats in shortest round-trip form, `-` for an absent value.
//!
//! TrainLog, one line per epoch:
//! `epoch step lr loss_ce loss_kl val_micro_f1 val_macro_f1 val_weighted_f1
//! val_r_at_p95 val_collapse_fraction`.
//!
//! EvalReport, one line prefixed `eval`:
//! `micro_f1 macro_f1 weighted_f1 [accuracy] r_at_p95 r_at_p95_threshold
//! threshold [p_txt_min p_txt_q1 p_txt_median p_txt_q3 p_txt_max p_txt_mean
//! collapse_fraction mean_kl mean_abs_dev]`. `accuracy` appears only for
//! multiclass models and the attention block only for models with a gate.

use std::fmt::Write as _;

use modfuse_core::metrics::{AttentionStats, ModalityWins};
use modfuse_core::optim::EpochLog;
use modfuse_core::{EvalReport, TrainLog};

use crate::config::fmt_f64;

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), fmt_f64)
}

pub fn epoch_line(e: &EpochLog) -> String {
    let v = e.val.as_ref();
    format!(
        "epoch={} step={} lr={} loss_ce={} loss_kl={} val_micro_f1={} val_macro_f1={} val_weighted_f1={} val_r_at_p95={} val_collapse_fraction={}",
        e.epoch,
        e.step,
        fmt_f64(e.lr),
        fmt_f64(e.loss_ce),
        fmt_f64(e.loss_kl),
        opt(v.map(|v| v.micro_f1)),
        opt(v.map(|v| v.macro_f1)),
        opt(v.map(|v| v.weighted_f1)),
        opt(v.map(|v| v.r_at_p95)),
        opt(v.and_then(|v| v.collapse_fraction)),
    )
}

pub fn format_train_log(log: &TrainLog) -> String {
    log.epochs.iter().map(|e| epoch_line(e) + "\n").collect()
}

fn attention_pairs(a: &AttentionStats) -> [(&'static str, f64); 9] {
    [
        ("p_txt_min", a.min),
        ("p_txt_q1", a.q1),
        ("p_txt_median", a.median),
        ("p_txt_q3", a.q3),
        ("p_txt_max", a.max),
        ("p_txt_mean", a.mean),
        ("collapse_fraction", a.collapse_fraction),
        ("mean_kl", a.mean_kl),
        ("mean_abs_dev", a.mean_abs_dev),
    ]
}

fn report_pairs(r: &EvalReport) -> Vec<(&'static str, f64)> {
    let mut pairs = vec![
        ("micro_f1", r.micro_f1),
        ("macro_f1", r.macro_f1),
        ("weighted_f1", r.weighted_f1),
    ];
    if let Some(a) = r.accuracy {
        pairs.push(("accuracy", a));
    }
    pairs.extend([
        ("r_at_p95", r.r_at_p95),
        ("r_at_p95_threshold", r.r_at_p95_threshold),
        ("threshold", r.threshold_used),
    ]);
    if let Some(a) = &r.attention {
        pairs.extend(attention_pairs(a));
    }
    pairs
}

pub fn eval_line(r: &EvalReport) -> String {
    let mut out = String::from("eval");
    for (k, v) in report_pairs(r) {
        let _ = write!(out, " {k}={}", fmt_f64(v));
    }
    out
}

pub fn eval_table(r: &EvalReport) -> String {
    let mut out = format!("{:<20} {:>10}\n", "metric", "value");
    for (k, v) in report_pairs(r) {
        let _ = writeln!(out, "{k:<20} {v:>10.6}");
    }
    out
}

/// Table followed by the machine-readable line.
pub fn format_eval_report(r: &EvalReport) -> String {
    format!("{}{}\n", eval_table(r), eval_line(r))
}

/// Plot-ready histogram with a header row.
pub fn histogram_table(bins: &[(f64, f64, usize)]) -> String {
    let mut out = String::from("bin_lo\tbin_hi\tcount\n");
    for (lo, hi, c) in bins {
        let _ = writeln!(out, "{lo:.3}\t{hi:.3}\t{c}");
    }
    out
}

pub fn wins_line(label: &str, w: &ModalityWins) -> String {
    let n = (w.text + w.image + w.ties).max(1) as f64;
    format!(
        "best_modality criterion={label} text_wins={} image_wins={} ties={} text_share={} image_share={}",
        w.text,
        w.image,
        w.ties,
        fmt_f64(w.text as f64 / n),
        fmt_f64(w.image as f64 / n),
    )
}
