//! ADAM, the warmup + cosine schedule, and the training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use libm::{cos, pow, sqrt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{stratified_split, Record};
use crate::error::{Error, LossTerm, Result};
use crate::fusion::{Batch, FusionModel};
use crate::graph::Graph;
use crate::metrics::{self, EvalOptions};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl ScheduleConfig {
    /// Schedule spanning `total_steps` with the first `warmup_frac` of them
    /// spent warming up.
    pub fn with_warmup_fraction(max_lr: f64, total_steps: usize, warmup_frac: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_frac).round() as usize;
        ScheduleConfig {
            max_lr,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
            min_lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0) || !(self.min_lr >= 0.0) {
            return Err(Error::invalid(
                "schedule",
                "max_lr must be > 0 and min_lr >= 0",
            ));
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::invalid(
                "schedule",
                format!(
                    "need 0 <= warmup_steps ({}) <= total_steps ({}) and total_steps > 0",
                    self.warmup_steps, self.total_steps
                ),
            ));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear warmup from 0 to `max_lr`, then cosine
/// annealing down to `min_lr` at `total_steps`.
pub fn lr_at(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::invalid(
            "step",
            format!("{step} beyond total_steps {}", cfg.total_steps),
        ));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.max_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return Ok(cfg.max_lr);
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    Ok(
        cfg.min_lr
            + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + cos(core::f64::consts::PI * progress)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    lr_scale: Vec<f64>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
            lr_scale: alloc::vec![1.0; store.len()],
        }
    }

    /// Multiplies the learning rate of every parameter whose name starts with
    /// `prefix` by `multiplier`. Returns the number of parameters affected.
    pub fn set_group_lr(&mut self, store: &ParamStore, prefix: &str, multiplier: f64) -> usize {
        let mut n = 0;
        for (scale, p) in self.lr_scale.iter_mut().zip(store.iter()) {
            if p.name.starts_with(prefix) {
                *scale = multiplier;
                n += 1;
            }
        }
        n
    }

    /// One bias-corrected ADAM update of every trainable parameter from its
    /// accumulated gradient. Frozen parameters and their moments are untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - pow(beta1, self.t as f64);
        let c2 = 1.0 - pow(beta2, self.t as f64);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let rate = lr * self.lr_scale[i];
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= rate * m_hat / (sqrt(v_hat) + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_encoders: bool,
    pub adam: AdamConfig,
    /// Learning-rate multipliers by parameter-name prefix, applied in order.
    pub group_lr: Vec<(String, f64)>,
    /// Fraction of training records held out when no validation set is given.
    pub val_fraction: f64,
    pub eval: EvalOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 10,
            seed: 0,
            freeze_encoders: false,
            adam: AdamConfig::default(),
            group_lr: Vec::new(),
            val_fraction: 0.1,
            eval: EvalOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValMetrics {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub r_at_p95: f64,
    pub collapse_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Cumulative optimizer steps at the end of the epoch.
    pub step: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Mean cross-entropy over the epoch's batches.
    pub loss_ce: f64,
    /// Mean per-sample `KL(p || uniform)` over the epoch; zero without a gate.
    pub loss_kl: f64,
    pub val: Option<ValMetrics>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

/// Validation metrics for `records`.
pub fn validate(model: &FusionModel, records: &[Record], opts: &EvalOptions) -> Result<ValMetrics> {
    let preds = model.predict(records, 256)?;
    let report = metrics::evaluate(&preds, opts)?;
    Ok(ValMetrics {
        micro_f1: report.micro_f1,
        macro_f1: report.macro_f1,
        weighted_f1: report.weighted_f1,
        r_at_p95: report.r_at_p95,
        collapse_fraction: report.attention.map(|a| a.collapse_fraction),
    })
}

/// Trains `model` in place for `tcfg.epochs` epochs of
/// `ceil(n / batch_size)` steps each. Batches are drawn from a shuffle seeded
/// by `tcfg.seed`. Aborts with [`Error::NonFinite`] on a NaN or infinite loss.
pub fn train(
    model: &mut FusionModel,
    records: &[Record],
    val: Option<&[Record]>,
    tcfg: &TrainConfig,
    scfg: &ScheduleConfig,
) -> Result<TrainLog> {
    if records.is_empty() {
        return Err(Error::invalid("dataset", "no training records"));
    }
    if tcfg.batch_size == 0 || tcfg.epochs == 0 {
        return Err(Error::invalid(
            "train config",
            "batch_size and epochs must be positive",
        ));
    }
    scfg.validate()?;
    let total = tcfg.total_steps(records.len());
    if scfg.total_steps < total {
        return Err(Error::invalid(
            "schedule",
            format!(
                "total_steps {} shorter than the {total} training steps",
                scfg.total_steps
            ),
        ));
    }
    let labels = model.config().labels;
    let dims_ok = records.iter().all(|r| {
        r.labels.len() == labels && r.image_features.len() == model.config().image.input_dim
    });
    if !dims_ok {
        return Err(Error::invalid(
            "dataset",
            "record dimensions do not match the model",
        ));
    }

    if tcfg.freeze_encoders {
        let store = model.store_mut();
        store.set_trainable("text.", false);
        store.set_trainable("image.", false);
    }
    let mut adam = AdamState::new(model.store(), tcfg.adam);
    for (prefix, mult) in &tcfg.group_lr {
        adam.set_group_lr(model.store(), prefix, *mult);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    let mut lr = 0.0;

    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(tcfg.batch_size) {
            let refs: Vec<&Record> = chunk.iter().map(|&i| &records[i]).collect();
            let batch = Batch::from_records(&refs, labels)?;
            let mut g = Graph::new();
            let (_, loss) = model.loss(&mut g, &batch)?;
            let ce = g.scalar(loss.ce);
            let kl = loss.kl.map_or(0.0, |k| g.scalar(k));
            if !ce.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    term: LossTerm::CrossEntropy,
                });
            }
            if !kl.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    term: LossTerm::Kl,
                });
            }
            ce_sum += ce;
            kl_sum += kl;
            batches += 1;

            let store = model.store_mut();
            store.zero_grad();
            g.backward(loss.total, store)?;
            lr = lr_at(step + 1, scfg)?;
            adam.step(store, lr);
            step += 1;
        }
        let val = match val {
            Some(v) if !v.is_empty() => Some(validate(model, v, &tcfg.eval)?),
            _ => None,
        };
        log.epochs.push(EpochLog {
            epoch,
            step,
            lr,
            loss_ce: ce_sum / batches as f64,
            loss_kl: kl_sum / records.len() as f64,
            val,
        });
    }
    Ok(log)
}

/// Holds out `tcfg.val_fraction` of `records` with the stratifier, trains on
/// the rest, and validates on the held-out part after every epoch.
pub fn train_with_holdout(
    model: &mut FusionModel,
    records: &[Record],
    tcfg: &TrainConfig,
    scfg: &ScheduleConfig,
) -> Result<TrainLog> {
    let f = tcfg.val_fraction;
    if !(f > 0.0 && f < 1.0) {
        return train(model, records, None, tcfg, scfg);
    }
    let split = stratified_split(records, &[1.0 - f, f], tcfg.seed)?;
    train(model, &split.parts[0], Some(&split.parts[1]), tcfg, scfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;

    fn sched(warmup: usize, total: usize) -> ScheduleConfig {
        ScheduleConfig {
            max_lr: 1e-3,
            warmup_steps: warmup,
            total_steps: total,
            min_lr: 1e-5,
        }
    }

    #[test]
    fn schedule_examples() {
        let s = sched(10, 100);
        assert_eq!(lr_at(10, &s).unwrap(), 1e-3);
        assert_eq!(lr_at(5, &s).unwrap(), 0.5e-3);
        assert_abs_diff_eq!(lr_at(100, &s).unwrap(), 1e-5, epsilon = 1e-18);
        assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        assert!(lr_at(101, &s).is_err());
    }

    #[test]
    fn schedule_continuous_at_warmup_end() {
        let s = sched(10, 100);
        // left limit along the linear ramp, right limit along the cosine
        let left = s.max_lr * (s.warmup_steps as f64) / s.warmup_steps as f64;
        assert_abs_diff_eq!(left, lr_at(10, &s).unwrap(), epsilon = 1e-12);
        assert!(lr_at(11, &s).unwrap() < lr_at(10, &s).unwrap());
        assert!(lr_at(9, &s).unwrap() < lr_at(10, &s).unwrap());
    }

    #[test]
    fn schedule_validation() {
        assert!(sched(101, 100).validate().is_err());
        assert!(sched(0, 0).validate().is_err());
        assert!(sched(0, 5).validate().is_ok());
        assert_eq!(lr_at(0, &sched(0, 5)).unwrap(), 1e-3);
    }

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(values.to_vec())).unwrap();
        s
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut store = store_with(&[0.3, -1.7]);
        let before = store.clone();
        let mut adam = AdamState::new(&store, AdamConfig::default());
        adam.step(&mut store, 0.1);
        assert_eq!(store, before);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let lr = 1e-2;
        let grads = [3.0, -0.02, 1e-3];
        let mut store = store_with(&[0.0; 3]);
        store.get_mut(crate::ParamId(0)).grad = Tensor::vector(grads.to_vec());
        let mut adam = AdamState::new(&store, AdamConfig::default());
        adam.step(&mut store, lr);
        for (w, g) in store.value(crate::ParamId(0)).data().iter().zip(grads) {
            assert_abs_diff_eq!(*w, -lr * g.signum(), epsilon = lr * 1e-4);
        }
        // first-step size is lr * |g| / (|g| + eps)
        let w0 = store.value(crate::ParamId(0)).data()[0];
        assert_abs_diff_eq!(w0, -lr * 3.0 / (3.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn adam_repeated_steps_are_monotone() {
        let mut store = store_with(&[1.0, 1.0]);
        store.get_mut(crate::ParamId(0)).grad = Tensor::vector(vec![0.5, -2.0]);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut prev = store.value(crate::ParamId(0)).data().to_vec();
        for _ in 0..2 {
            adam.step(&mut store, 1e-2);
            let now = store.value(crate::ParamId(0)).data().to_vec();
            assert!(now[0] < prev[0]);
            assert!(now[1] > prev[1]);
            prev = now;
        }
    }

    #[test]
    fn adam_skips_frozen_and_scales_groups() {
        let mut store = ParamStore::new();
        let a = store
            .add("text.embedding", Tensor::vector(vec![1.0]))
            .unwrap();
        let b = store.add("head.W", Tensor::vector(vec![1.0])).unwrap();
        let c = store.add("gate.W", Tensor::vector(vec![1.0])).unwrap();
        for id in [a, b, c] {
            store.get_mut(id).grad = Tensor::vector(vec![1.0]);
        }
        store.set_trainable("text.", false);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        assert_eq!(adam.set_group_lr(&store, "gate.", 10.0), 1);
        adam.step(&mut store, 1e-3);
        assert_eq!(store.value(a).data()[0], 1.0);
        let moved_head = 1.0 - store.value(b).data()[0];
        let moved_gate = 1.0 - store.value(c).data()[0];
        assert_abs_diff_eq!(moved_gate, 10.0 * moved_head, epsilon = 1e-12);
    }
}
