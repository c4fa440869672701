//! Evaluation metrics and the attention analyses.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Default cutoff on `min(p)` below which a sample counts as collapsed.
pub const COLLAPSE_CUTOFF: f64 = 0.1;

/// Model scores and ground truth for a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    ids: Vec<String>,
    labels: usize,
    scores: Vec<f64>,
    targets: Vec<f64>,
    attention: Option<Vec<f64>>,
}

impl PredictionSet {
    /// `scores` and `targets` are row-major `n x labels`; `attention`, when
    /// present, holds `p_txt` per sample.
    pub fn new(
        ids: Vec<String>,
        labels: usize,
        scores: Vec<f64>,
        targets: Vec<f64>,
        attention: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = ids.len();
        if labels == 0 || scores.len() != n * labels || targets.len() != n * labels {
            return Err(Error::invalid(
                "prediction set",
                format!(
                    "{n} ids x {labels} labels vs {} scores and {} targets",
                    scores.len(),
                    targets.len()
                ),
            ));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::invalid("scores", format!("{s} outside [0, 1]")));
        }
        if let Some(t) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::invalid("targets", format!("{t} is not binary")));
        }
        if let Some(a) = &attention {
            if a.len() != n {
                return Err(Error::invalid(
                    "attention",
                    format!("{} weights for {n} samples", a.len()),
                ));
            }
            if let Some(p) = a.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::invalid("attention", format!("{p} outside [0, 1]")));
            }
        }
        Ok(PredictionSet {
            ids,
            labels,
            scores,
            targets,
            attention,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn attention(&self) -> Option<&[f64]> {
        self.attention.as_deref()
    }

    pub fn score_row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.labels..(i + 1) * self.labels]
    }

    pub fn target_row(&self, i: usize) -> &[f64] {
        &self.targets[i * self.labels..(i + 1) * self.labels]
    }

    /// Restricts to the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = PredictionSet {
            ids: Vec::with_capacity(indices.len()),
            labels: self.labels,
            scores: Vec::with_capacity(indices.len() * self.labels),
            targets: Vec::with_capacity(indices.len() * self.labels),
            attention: self
                .attention
                .as_ref()
                .map(|_| Vec::with_capacity(indices.len())),
        };
        for &i in indices {
            out.ids.push(self.ids[i].clone());
            out.scores.extend_from_slice(self.score_row(i));
            out.targets.extend_from_slice(self.target_row(i));
            if let (Some(dst), Some(src)) = (out.attention.as_mut(), self.attention.as_ref()) {
                dst.push(src[i]);
            }
        }
        out
    }
}

/// Confusion counts for one label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }
}

/// Per-label confusion counts with `score >= threshold` predicted positive.
pub fn confusion_per_label(preds: &PredictionSet, threshold: f64) -> Vec<Confusion> {
    let mut out = vec![Confusion::default(); preds.labels];
    for (k, (&s, &t)) in preds.scores.iter().zip(&preds.targets).enumerate() {
        let c = &mut out[k % preds.labels];
        match (s >= threshold, t == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Suite {
    pub micro: f64,
    pub macro_: f64,
    pub weighted: f64,
}

/// Micro, macro and support-weighted F1. Labels without support contribute
/// an F1 of zero to the macro average.
pub fn f1_suite(preds: &PredictionSet, threshold: f64) -> F1Suite {
    let per_label = confusion_per_label(preds, threshold);
    let total = per_label
        .iter()
        .fold(Confusion::default(), |acc, c| Confusion {
            tp: acc.tp + c.tp,
            fp: acc.fp + c.fp,
            fn_: acc.fn_ + c.fn_,
        });
    let support: u64 = per_label.iter().map(Confusion::support).sum();
    // Both averages multiply by a correctly rounded weight, so equal supports
    // give bit-identical macro and weighted values.
    let uniform = 1.0 / per_label.len() as f64;
    let macro_ = per_label.iter().map(|c| c.f1() * uniform).sum();
    let weighted = if support == 0 {
        0.0
    } else {
        per_label
            .iter()
            .map(|c| c.f1() * (c.support() as f64 / support as f64))
            .sum()
    };
    F1Suite {
        micro: total.f1(),
        macro_,
        weighted,
    }
}

/// Fraction of samples whose arg-max score hits the single positive target.
pub fn accuracy(preds: &PredictionSet) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = (0..preds.len())
        .filter(|&i| {
            let row = preds.score_row(i);
            let best = argmax(row);
            preds.target_row(i)[best] == 1.0
        })
        .count();
    hits as f64 / preds.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Maximum micro recall over global thresholds whose micro precision is at
/// least `target_precision`, with the largest threshold attaining it.
///
/// Candidate thresholds are the distinct scores; a pair is predicted
/// positive when `score >= threshold`. Returns `(0.0, 1.0)` if no threshold
/// qualifies.
pub fn recall_at_precision(preds: &PredictionSet, target_precision: f64) -> Result<(f64, f64)> {
    let positives = preds.targets.iter().filter(|&&t| t == 1.0).count();
    if positives == 0 {
        return Err(Error::invalid(
            "targets",
            "recall is undefined without positives",
        ));
    }
    let mut pairs: Vec<(f64, bool)> = preds
        .scores
        .iter()
        .zip(&preds.targets)
        .map(|(&s, &t)| (s, t == 1.0))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<(usize, f64)> = None;
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        if precision >= target_precision && best.is_none_or(|(b, _)| tp > b) {
            best = Some((tp, threshold));
        }
    }
    Ok(match best {
        Some((tp, threshold)) => (tp as f64 / positives as f64, threshold),
        None => (0.0, 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WinCriterion {
    /// A sample is correct when every label is right.
    ExactMatch,
    /// The model with more correct labels on the sample wins.
    PerLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityWins {
    pub text: usize,
    pub image: usize,
    pub ties: usize,
}

/// Per-sample comparison of two unimodal models on the same samples.
pub fn best_modality_counts(
    text: &PredictionSet,
    image: &PredictionSet,
    threshold: f64,
    criterion: WinCriterion,
) -> Result<ModalityWins> {
    if text.ids != image.ids || text.labels != image.labels {
        return Err(Error::invalid(
            "prediction sets",
            "text and image predictions are not aligned by id",
        ));
    }
    let correct = |p: &PredictionSet, i: usize| -> usize {
        p.score_row(i)
            .iter()
            .zip(p.target_row(i))
            .filter(|(&s, &t)| (s >= threshold) == (t == 1.0))
            .count()
    };
    let mut wins = ModalityWins {
        text: 0,
        image: 0,
        ties: 0,
    };
    for i in 0..text.len() {
        let (ct, ci) = (correct(text, i), correct(image, i));
        let (st, si) = match criterion {
            WinCriterion::ExactMatch => {
                ((ct == text.labels) as usize, (ci == image.labels) as usize)
            }
            WinCriterion::PerLabel => (ct, ci),
        };
        match st.cmp(&si) {
            core::cmp::Ordering::Greater => wins.text += 1,
            core::cmp::Ordering::Less => wins.image += 1,
            core::cmp::Ordering::Equal => wins.ties += 1,
        }
    }
    Ok(wins)
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    /// Share of samples with `min(p_txt, p_img) < cutoff`.
    pub collapse_fraction: f64,
    /// Mean `KL(p_j || uniform)` over samples.
    pub mean_kl: f64,
    /// Mean `|p_txt - 0.5|`.
    pub mean_abs_dev: f64,
}

/// Distribution summary of `p_txt` plus the collapse fraction.
pub fn attention_report(preds: &PredictionSet, cutoff: f64) -> Result<AttentionStats> {
    let att = preds.attention.as_deref().ok_or_else(|| {
        Error::invalid("attention", "prediction set carries no attention weights")
    })?;
    attention_stats(att, cutoff)
}

pub fn attention_stats(p_txt: &[f64], cutoff: f64) -> Result<AttentionStats> {
    if p_txt.is_empty() {
        return Err(Error::invalid("attention", "no samples"));
    }
    let mut sorted = p_txt.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = p_txt.len() as f64;
    let collapsed = p_txt.iter().filter(|&&p| p.min(1.0 - p) < cutoff).count();
    Ok(AttentionStats {
        min: sorted[0],
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        mean: p_txt.iter().sum::<f64>() / n,
        collapse_fraction: collapsed as f64 / n,
        mean_kl: p_txt
            .iter()
            .map(|&p| crate::fusion::kl_uniform_value(&[p, 1.0 - p]))
            .sum::<f64>()
            / n,
        mean_abs_dev: p_txt.iter().map(|p| (p - 0.5).abs()).sum::<f64>() / n,
    })
}

/// Plot-ready histogram of `p_txt`: `(bin_lo, bin_hi, count)` over `bins`
/// equal-width bins of `[0, 1]`.
pub fn attention_histogram(p_txt: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for &p in p_txt {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (b as f64 / bins as f64, (b + 1) as f64 / bins as f64, c))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    /// Multiclass only.
    pub accuracy: Option<f64>,
    pub r_at_p95: f64,
    /// Threshold at which `r_at_p95` is attained.
    pub r_at_p95_threshold: f64,
    /// Decision threshold used for the F1 family.
    pub threshold_used: f64,
    pub attention: Option<AttentionStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    pub target_precision: f64,
    pub collapse_cutoff: f64,
    pub multiclass: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.5,
            target_precision: 0.95,
            collapse_cutoff: COLLAPSE_CUTOFF,
            multiclass: false,
        }
    }
}

/// Full metric bundle. `r_at_p95` is 0 when the set has no positives.
pub fn evaluate(preds: &PredictionSet, opts: &EvalOptions) -> Result<EvalReport> {
    if !(opts.threshold > 0.0 && opts.threshold < 1.0) {
        return Err(Error::invalid(
            "threshold",
            format!("{} not in (0, 1)", opts.threshold),
        ));
    }
    let f1 = f1_suite(preds, opts.threshold);
    let (r, t) = match recall_at_precision(preds, opts.target_precision) {
        Ok(rt) => rt,
        Err(_) => (0.0, 1.0),
    };
    let attention = match preds.attention {
        Some(_) => Some(attention_report(preds, opts.collapse_cutoff)?),
        None => None,
    };
    Ok(EvalReport {
        micro_f1: f1.micro,
        macro_f1: f1.macro_,
        weighted_f1: f1.weighted,
        accuracy: opts.multiclass.then(|| accuracy(preds)),
        r_at_p95: r,
        r_at_p95_threshold: t,
        threshold_used: opts.threshold,
        attention,
    })
}
