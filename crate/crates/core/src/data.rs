//! Synthetic multimodal records and iterative stratified splitting.
//!
//! Token ids are laid out as
//!
//! ```text
//! 0                       reserved classification slot
//! 1 ..= L * k             label-indicative tokens, k per label
//! L * k + 1 .. vocab      noise tokens
//! ```
//!
//! A text-informative record carries the indicative tokens of each of its
//! active labels plus noise; otherwise only noise. An image-informative record
//! has features equal to the sum of its active labels' prototypes plus
//! Gaussian noise; otherwise only noise.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// One multimodal sample. The informativeness flags are generator ground
/// truth for analysis and are never shown to a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub tokens: Vec<u32>,
    pub image_features: Vec<f64>,
    pub labels: Vec<bool>,
    pub txt_informative: bool,
    pub img_informative: bool,
}

impl Record {
    pub fn active_labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(l, _)| l)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_samples: usize,
    pub labels: usize,
    /// One probability per label.
    pub label_prevalence: Vec<f64>,
    pub rho_txt: f64,
    pub rho_img: f64,
    pub vocab_size: usize,
    pub tokens_per_label: usize,
    /// Upper bound on noise tokens per record; the count is uniform in
    /// `1..=noise_tokens`.
    pub noise_tokens: usize,
    pub image_dim: usize,
    /// Norm of each label prototype.
    pub prototype_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let labels = 19;
        GenConfig {
            n_samples: 10_000,
            labels,
            label_prevalence: vec![0.15; labels],
            rho_txt: 0.9,
            rho_img: 0.9,
            vocab_size: 400,
            tokens_per_label: 3,
            noise_tokens: 12,
            image_dim: 32,
            prototype_scale: 1.0,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl GenConfig {
    /// First noise token id.
    pub fn noise_start(&self) -> usize {
        1 + self.labels * self.tokens_per_label
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &'static str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::invalid(
                    name,
                    format!("probability {p} outside [0, 1]"),
                ))
            }
        };
        if self.labels == 0 {
            return Err(Error::invalid("labels", "need at least one label"));
        }
        if self.label_prevalence.len() != self.labels {
            return Err(Error::invalid(
                "label_prevalence",
                format!(
                    "{} values for {} labels",
                    self.label_prevalence.len(),
                    self.labels
                ),
            ));
        }
        for &p in &self.label_prevalence {
            prob("label_prevalence", p)?;
        }
        prob("rho_txt", self.rho_txt)?;
        prob("rho_img", self.rho_img)?;
        if self.tokens_per_label == 0 || self.noise_tokens == 0 {
            return Err(Error::invalid(
                "tokens",
                "tokens_per_label and noise_tokens must be positive",
            ));
        }
        if self.vocab_size <= self.noise_start() {
            return Err(Error::invalid(
                "vocab_size",
                format!(
                    "{} leaves no noise tokens after {} reserved and indicative ids",
                    self.vocab_size,
                    self.noise_start()
                ),
            ));
        }
        if self.image_dim == 0 {
            return Err(Error::invalid("image_dim", "must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.prototype_scale >= 0.0) {
            return Err(Error::invalid(
                "noise",
                "noise_sigma and prototype_scale must be >= 0",
            ));
        }
        Ok(())
    }

    /// Label prototypes, one row of `image_dim` per label.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let scale = self.prototype_scale / sqrt(self.image_dim as f64);
        (0..self.labels)
            .map(|_| {
                (0..self.image_dim)
                    .map(|_| normal.sample(&mut rng) * scale)
                    .collect()
            })
            .collect()
    }
}

/// Rounds to 9 significant decimal digits, the precision of the dataset file.
pub fn round_sig9(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Generates `cfg.n_samples` records. Record `i` draws from its own stream of
/// a generator seeded with `cfg.seed`, so output is independent of
/// generation order.
pub fn generate(cfg: &GenConfig) -> Result<Vec<Record>> {
    cfg.validate()?;
    let prototypes = cfg.prototypes();
    Ok((0..cfg.n_samples)
        .map(|i| generate_one(cfg, &prototypes, i))
        .collect())
}

fn generate_one(cfg: &GenConfig, prototypes: &[Vec<f64>], index: usize) -> Record {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let labels: Vec<bool> = cfg
        .label_prevalence
        .iter()
        .map(|&p| rng.random_bool(p))
        .collect();
    let txt_informative = rng.random_bool(cfg.rho_txt);
    let img_informative = rng.random_bool(cfg.rho_img);

    let noise_start = cfg.noise_start() as u32;
    let n_noise = rng.random_range(1..=cfg.noise_tokens);
    let mut tokens: Vec<u32> = (0..n_noise)
        .map(|_| rng.random_range(noise_start..cfg.vocab_size as u32))
        .collect();
    if txt_informative {
        for (l, _) in labels.iter().enumerate().filter(|(_, &on)| on) {
            let first = 1 + (l * cfg.tokens_per_label) as u32;
            tokens.extend(first..first + cfg.tokens_per_label as u32);
        }
    }
    tokens.shuffle(&mut rng);

    let mut image_features = vec![0.0; cfg.image_dim];
    if img_informative {
        for (l, _) in labels.iter().enumerate().filter(|(_, &on)| on) {
            for (x, p) in image_features.iter_mut().zip(&prototypes[l]) {
                *x += p;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
        for x in image_features.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    for x in image_features.iter_mut() {
        *x = round_sig9(*x);
    }

    Record {
        id: format!("s{index:06}"),
        tokens,
        image_features,
        labels,
        txt_informative,
        img_informative,
    }
}

/// Result of [`stratified_split`]: one record list per requested fraction,
/// each in input order, plus any placement warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub parts: Vec<Vec<Record>>,
    pub warnings: Vec<String>,
}

/// First-order iterative stratification for multilabel data.
///
/// Repeatedly takes the label with the fewest unassigned positives and hands
/// each of its records to the part with the largest remaining demand for that
/// label; ties go to the part with the largest remaining overall demand, then
/// to a seeded draw. Records without labels fill remaining overall demand.
pub fn stratified_split(records: &[Record], fractions: &[f64], seed: u64) -> Result<Split> {
    let parts = fractions.len();
    if parts == 0 || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::invalid(
            "fractions",
            format!("{fractions:?} must be positive"),
        ));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "fractions",
            format!("{fractions:?} sum to {total}"),
        ));
    }
    let n_labels = records.first().map_or(0, |r| r.labels.len());
    if records.iter().any(|r| r.labels.len() != n_labels) {
        return Err(Error::invalid("records", "inconsistent label counts"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);

    let n = records.len() as f64;
    let mut demand: Vec<f64> = fractions.iter().map(|f| f * n).collect();
    let mut label_count = vec![0usize; n_labels];
    for r in records {
        for l in r.active_labels() {
            label_count[l] += 1;
        }
    }
    let mut label_demand: Vec<Vec<f64>> = fractions
        .iter()
        .map(|f| label_count.iter().map(|&c| f * c as f64).collect())
        .collect();

    let mut warnings = Vec::new();
    for (l, &c) in label_count.iter().enumerate() {
        if c > 0 && c < parts {
            warnings.push(format!(
                "label {l} has {c} positive samples for {parts} splits; placement is best-effort"
            ));
        }
    }

    let mut assignment: Vec<Option<usize>> = vec![None; records.len()];
    let mut remaining = label_count.clone();

    let pick = |rng: &mut ChaCha8Rng, keys: &dyn Fn(usize) -> (f64, f64)| -> usize {
        let mut best: Vec<usize> = vec![0];
        for j in 1..parts {
            let (a, b) = (keys(j), keys(best[0]));
            if a.0 > b.0 || (a.0 == b.0 && a.1 > b.1) {
                best.clear();
                best.push(j);
            } else if a == b {
                best.push(j);
            }
        }
        if best.len() == 1 {
            best[0]
        } else {
            best[rng.random_range(0..best.len())]
        }
    };

    loop {
        let Some(label) = (0..n_labels)
            .filter(|&l| remaining[l] > 0)
            .min_by_key(|&l| (remaining[l], l))
        else {
            break;
        };
        for &idx in &order {
            if assignment[idx].is_some() || !records[idx].labels[label] {
                continue;
            }
            let j = pick(&mut rng, &|j| (label_demand[j][label], demand[j]));
            assignment[idx] = Some(j);
            demand[j] -= 1.0;
            for m in records[idx].active_labels() {
                label_demand[j][m] -= 1.0;
                remaining[m] -= 1;
            }
        }
    }
    for &idx in &order {
        if assignment[idx].is_none() {
            let j = pick(&mut rng, &|j| (demand[j], 0.0));
            assignment[idx] = Some(j);
            demand[j] -= 1.0;
        }
    }

    let mut out = vec![Vec::new(); parts];
    for (r, a) in records.iter().zip(assignment) {
        out[a.expect("every record assigned")].push(r.clone());
    }
    Ok(Split {
        parts: out,
        warnings,
    })
}

/// Per-label positive rate of a record set.
pub fn label_rates(records: &[Record], labels: usize) -> Vec<f64> {
    let mut counts = vec![0usize; labels];
    for r in records {
        for l in r.active_labels() {
            counts[l] += 1;
        }
    }
    counts
        .into_iter()
        .map(|c| c as f64 / records.len().max(1) as f64)
        .collect()
}
