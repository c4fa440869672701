//! Plain-text `key = value` configuration.
//!
//! One file configures data generation (`gen.*`), splitting (`split.*`), the
//! model (`model.*`), training (`train.*`) and the lambda sweep (`sweep.*`).
//! Blank lines and lines starting with `#` are ignored; unknown keys are
//! errors. Lists are comma separated. Later lines override earlier ones, and
//! command-line flags override the file.

use std::fmt::Display;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use modfuse_core::optim::AdamConfig;
use modfuse_core::{
    Activation, EvalOptions, GateKind, GenConfig, ImageEncoderConfig, MergerConfig, MergerKind,
    Modalities, ModelConfig, Objective, Pooling, ScheduleConfig, TextEncoderConfig, TrainConfig,
};

use crate::dataset::DatasetMeta;
use crate::error::{Error, Result};

/// Search grid for the KL weight.
pub const DEFAULT_LAMBDA_GRID: [f64; 9] = [0.0, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1];

/// Model hyperparameters that do not depend on the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub objective: Objective,
    pub modalities: Modalities,
    pub embed_dim: usize,
    pub pooling: Pooling,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub merger: MergerConfig,
    pub seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            objective: Objective::Multilabel,
            modalities: Modalities::Both,
            embed_dim: 16,
            pooling: Pooling::Sum,
            hidden_dims: vec![32],
            output_dim: 16,
            activation: Activation::Relu,
            merger: MergerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub freeze_encoders: bool,
    pub val_fraction: f64,
    pub adam: AdamConfig,
    pub group_lr: Vec<(String, f64)>,
    pub eval: EvalOptions,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: 5e-3,
            min_lr: 0.0,
            warmup_fraction: 0.1,
            seed: 0,
            freeze_encoders: false,
            val_fraction: t.val_fraction,
            adam: t.adam,
            group_lr: Vec::new(),
            eval: t.eval,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSettings {
    pub fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings {
            fractions: vec![0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub gen: GenConfig,
    pub split: SplitSettings,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub sweep_grid: Vec<f64>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            gen: GenConfig::default(),
            split: SplitSettings::default(),
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            sweep_grid: DEFAULT_LAMBDA_GRID.to_vec(),
        }
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e: T::Err| format!("cannot parse `{value}`: {e}"))
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(v.trim())).collect()
}

/// Shortest representation that parses back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_list<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

/// Splits `text` into `(line, key, value)` triples.
pub fn key_values(text: &str, origin: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::parse(origin, i + 1, line, "expected `key = value`"));
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let mut s = Settings::default();
        s.apply_file(path)?;
        Ok(s)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (line, key, value) in key_values(text, origin)? {
            self.set(&key, &value)
                .map_err(|m| Error::parse(origin, line, &key, m))?;
        }
        Ok(())
    }

    /// Uses `seed` for generation, splitting, initialization and shuffling.
    pub fn set_seed(&mut self, seed: u64) {
        self.gen.seed = seed;
        self.split.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// Sets one key. A single `gen.label_prevalence` value applies to every
    /// label, and changing `gen.labels` resizes a uniform prevalence list.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let g = &mut self.gen;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "gen.n_samples" => g.n_samples = parse(value)?,
            "gen.labels" => {
                g.labels = parse(value)?;
                let first = g.label_prevalence.first().copied().unwrap_or(0.15);
                if g.label_prevalence.iter().all(|&p| p == first) {
                    g.label_prevalence = vec![first; g.labels];
                }
            }
            "gen.label_prevalence" => {
                let list: Vec<f64> = parse_list(value)?;
                g.label_prevalence = match list.as_slice() {
                    [p] => vec![*p; g.labels],
                    _ => list,
                };
            }
            "gen.rho_txt" => g.rho_txt = parse(value)?,
            "gen.rho_img" => g.rho_img = parse(value)?,
            "gen.vocab_size" => g.vocab_size = parse(value)?,
            "gen.tokens_per_label" => g.tokens_per_label = parse(value)?,
            "gen.noise_tokens" => g.noise_tokens = parse(value)?,
            "gen.image_dim" => g.image_dim = parse(value)?,
            "gen.prototype_scale" => g.prototype_scale = parse(value)?,
            "gen.noise_sigma" => g.noise_sigma = parse(value)?,
            "gen.seed" => g.seed = parse(value)?,

            "split.fractions" => self.split.fractions = parse_list(value)?,
            "split.seed" => self.split.seed = parse(value)?,

            "model.objective" => m.objective = parse(value)?,
            "model.modalities" => m.modalities = parse(value)?,
            "model.embed_dim" => m.embed_dim = parse(value)?,
            "model.pooling" => m.pooling = parse(value)?,
            "model.hidden_dims" => m.hidden_dims = parse_list(value)?,
            "model.output_dim" => m.output_dim = parse(value)?,
            "model.activation" => m.activation = parse(value)?,
            "model.merger" => m.merger.kind = parse(value)?,
            "model.gate" => m.merger.gate = parse(value)?,
            "model.normalize" => m.merger.normalize = parse(value)?,
            "model.norm_affine" => m.merger.norm_affine = parse(value)?,
            "model.norm_eps" => m.merger.norm_eps = parse(value)?,
            "model.lambda" => m.merger.lambda = parse(value)?,
            "model.seed" => m.seed = parse(value)?,

            "train.batch_size" => t.batch_size = parse(value)?,
            "train.epochs" => t.epochs = parse(value)?,
            "train.lr" => t.lr = parse(value)?,
            "train.min_lr" => t.min_lr = parse(value)?,
            "train.warmup_fraction" => t.warmup_fraction = parse(value)?,
            "train.seed" => t.seed = parse(value)?,
            "train.freeze_encoders" => t.freeze_encoders = parse(value)?,
            "train.val_fraction" => t.val_fraction = parse(value)?,
            "train.beta1" => t.adam.beta1 = parse(value)?,
            "train.beta2" => t.adam.beta2 = parse(value)?,
            "train.adam_eps" => t.adam.eps = parse(value)?,
            "train.group_lr" => {
                t.group_lr = parse_list::<String>(value)?
                    .into_iter()
                    .map(|item| {
                        let (prefix, mult) = item
                            .split_once(':')
                            .ok_or_else(|| format!("`{item}` is not `prefix:multiplier`"))?;
                        Ok((prefix.to_string(), parse(mult)?))
                    })
                    .collect::<std::result::Result<_, String>>()?;
            }
            "train.threshold" => t.eval.threshold = parse(value)?,
            "train.target_precision" => t.eval.target_precision = parse(value)?,
            "train.collapse_cutoff" => t.eval.collapse_cutoff = parse(value)?,

            "sweep.grid" => self.sweep_grid = parse_list(value)?,
            _ => return Err("unknown key".to_string()),
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`Settings::apply_text`]
    /// reads back to an equal value.
    pub fn to_text(&self) -> String {
        let (g, m, t) = (&self.gen, &self.model, &self.train);
        let f = |x: &f64| fmt_f64(*x);
        let entries: Vec<(&str, String)> = vec![
            ("gen.n_samples", g.n_samples.to_string()),
            ("gen.labels", g.labels.to_string()),
            ("gen.label_prevalence", fmt_list(&g.label_prevalence, f)),
            ("gen.rho_txt", fmt_f64(g.rho_txt)),
            ("gen.rho_img", fmt_f64(g.rho_img)),
            ("gen.vocab_size", g.vocab_size.to_string()),
            ("gen.tokens_per_label", g.tokens_per_label.to_string()),
            ("gen.noise_tokens", g.noise_tokens.to_string()),
            ("gen.image_dim", g.image_dim.to_string()),
            ("gen.prototype_scale", fmt_f64(g.prototype_scale)),
            ("gen.noise_sigma", fmt_f64(g.noise_sigma)),
            ("gen.seed", g.seed.to_string()),
            ("split.fractions", fmt_list(&self.split.fractions, f)),
            ("split.seed", self.split.seed.to_string()),
            ("model.objective", m.objective.to_string()),
            ("model.modalities", m.modalities.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.pooling", m.pooling.to_string()),
            (
                "model.hidden_dims",
                fmt_list(&m.hidden_dims, usize::to_string),
            ),
            ("model.output_dim", m.output_dim.to_string()),
            ("model.activation", m.activation.to_string()),
            ("model.merger", m.merger.kind.to_string()),
            ("model.gate", m.merger.gate.to_string()),
            ("model.normalize", m.merger.normalize.to_string()),
            ("model.norm_affine", m.merger.norm_affine.to_string()),
            ("model.norm_eps", fmt_f64(m.merger.norm_eps)),
            ("model.lambda", fmt_f64(m.merger.lambda)),
            ("model.seed", m.seed.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.lr", fmt_f64(t.lr)),
            ("train.min_lr", fmt_f64(t.min_lr)),
            ("train.warmup_fraction", fmt_f64(t.warmup_fraction)),
            ("train.seed", t.seed.to_string()),
            ("train.freeze_encoders", t.freeze_encoders.to_string()),
            ("train.val_fraction", fmt_f64(t.val_fraction)),
            ("train.beta1", fmt_f64(t.adam.beta1)),
            ("train.beta2", fmt_f64(t.adam.beta2)),
            ("train.adam_eps", fmt_f64(t.adam.eps)),
            (
                "train.group_lr",
                fmt_list(&t.group_lr, |(p, x)| format!("{p}:{}", fmt_f64(*x))),
            ),
            ("train.threshold", fmt_f64(t.eval.threshold)),
            ("train.target_precision", fmt_f64(t.eval.target_precision)),
            ("train.collapse_cutoff", fmt_f64(t.eval.collapse_cutoff)),
            ("sweep.grid", fmt_list(&self.sweep_grid, f)),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Full model configuration for a dataset with the given dimensions.
    pub fn model_config(&self, meta: &DatasetMeta) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            labels: meta.labels,
            objective: m.objective,
            modalities: m.modalities,
            text: TextEncoderConfig {
                vocab_size: meta.vocab_size,
                embed_dim: m.embed_dim,
                pooling: m.pooling,
            },
            image: ImageEncoderConfig {
                input_dim: meta.image_dim,
                hidden_dims: m.hidden_dims.clone(),
                output_dim: m.output_dim,
                activation: m.activation,
            },
            merger: m.merger.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            freeze_encoders: t.freeze_encoders,
            adam: t.adam,
            group_lr: t.group_lr.clone(),
            val_fraction: t.val_fraction,
            eval: EvalOptions {
                multiclass: self.model.objective == Objective::Multiclass,
                ..t.eval
            },
        }
    }

    /// Schedule covering every step of training on `n_train` records.
    pub fn schedule(&self, n_train: usize) -> ScheduleConfig {
        let total = self.train_config().total_steps(n_train);
        ScheduleConfig {
            min_lr: self.train.min_lr,
            ..ScheduleConfig::with_warmup_fraction(self.train.lr, total, self.train.warmup_fraction)
        }
    }
}

/// Serializes the parts of a [`ModelConfig`] a checkpoint needs.
pub fn model_config_to_text(c: &ModelConfig) -> String {
    let entries = [
        ("labels", c.labels.to_string()),
        ("objective", c.objective.to_string()),
        ("modalities", c.modalities.to_string()),
        ("text.vocab_size", c.text.vocab_size.to_string()),
        ("text.embed_dim", c.text.embed_dim.to_string()),
        ("text.pooling", c.text.pooling.to_string()),
        ("image.input_dim", c.image.input_dim.to_string()),
        (
            "image.hidden_dims",
            fmt_list(&c.image.hidden_dims, usize::to_string),
        ),
        ("image.output_dim", c.image.output_dim.to_string()),
        ("image.activation", c.image.activation.to_string()),
        ("merger.kind", c.merger.kind.to_string()),
        ("merger.gate", c.merger.gate.to_string()),
        ("merger.normalize", c.merger.normalize.to_string()),
        ("merger.norm_affine", c.merger.norm_affine.to_string()),
        ("merger.norm_eps", fmt_f64(c.merger.norm_eps)),
        ("merger.lambda", fmt_f64(c.merger.lambda)),
    ];
    let mut out = String::new();
    for (k, v) in entries {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

/// Inverse of [`model_config_to_text`]. Every key is required.
pub fn model_config_from_text(text: &str, origin: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig {
        labels: 0,
        objective: Objective::Multilabel,
        modalities: Modalities::Both,
        text: TextEncoderConfig {
            vocab_size: 0,
            embed_dim: 0,
            pooling: Pooling::Sum,
        },
        image: ImageEncoderConfig {
            input_dim: 0,
            hidden_dims: Vec::new(),
            output_dim: 0,
            activation: Activation::Relu,
        },
        merger: MergerConfig {
            kind: MergerKind::ModalityAttention,
            gate: GateKind::Sigmoid,
            ..MergerConfig::default()
        },
    };
    const KEYS: [&str; 16] = [
        "labels",
        "objective",
        "modalities",
        "text.vocab_size",
        "text.embed_dim",
        "text.pooling",
        "image.input_dim",
        "image.hidden_dims",
        "image.output_dim",
        "image.activation",
        "merger.kind",
        "merger.gate",
        "merger.normalize",
        "merger.norm_affine",
        "merger.norm_eps",
        "merger.lambda",
    ];
    let mut seen = [false; KEYS.len()];
    for (line, key, v) in key_values(text, origin)? {
        let set = |c: &mut ModelConfig| -> std::result::Result<(), String> {
            match key.as_str() {
                "labels" => c.labels = parse(&v)?,
                "objective" => c.objective = parse(&v)?,
                "modalities" => c.modalities = parse(&v)?,
                "text.vocab_size" => c.text.vocab_size = parse(&v)?,
                "text.embed_dim" => c.text.embed_dim = parse(&v)?,
                "text.pooling" => c.text.pooling = parse(&v)?,
                "image.input_dim" => c.image.input_dim = parse(&v)?,
                "image.hidden_dims" => c.image.hidden_dims = parse_list(&v)?,
                "image.output_dim" => c.image.output_dim = parse(&v)?,
                "image.activation" => c.image.activation = parse(&v)?,
                "merger.kind" => c.merger.kind = parse(&v)?,
                "merger.gate" => c.merger.gate = parse(&v)?,
                "merger.normalize" => c.merger.normalize = parse(&v)?,
                "merger.norm_affine" => c.merger.norm_affine = parse(&v)?,
                "merger.norm_eps" => c.merger.norm_eps = parse(&v)?,
                "merger.lambda" => c.merger.lambda = parse(&v)?,
                _ => return Err("unknown key".to_string()),
            }
            Ok(())
        };
        set(&mut c).map_err(|m| Error::parse(origin, line, &key, m))?;
        if let Some(i) = KEYS.iter().position(|k| *k == key) {
            seen[i] = true;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::format(origin, format!("missing key `{}`", KEYS[i])));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut s = Settings::default();
        s.apply_text(
            "# collapse\n gen.rho_txt = 0.95\ngen.labels=3\n model.hidden_dims = \ntrain.group_lr = gate.:2.5,head.:0.5\nsweep.grid = 0,1e-4\n",
            "t",
        )
        .unwrap();
        assert_eq!(s.gen.label_prevalence, vec![0.15; 3]);
        assert!(s.model.hidden_dims.is_empty());
        let mut back = Settings::default();
        back.apply_text(&s.to_text(), "t").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn errors_name_line_and_key() {
        let err = Settings::default()
            .apply_text("gen.rho_txt = 0.5\n\ngen.labels = many\n", "cfg")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("cfg:3: field `gen.labels`"), "{msg}");
        let err = Settings::default()
            .apply_text("model.depth = 3", "cfg")
            .unwrap_err();
        assert!(err.to_string().contains("unknown key"));
        assert!(Settings::default()
            .apply_text("no equals sign", "cfg")
            .is_err());
    }

    #[test]
    fn prevalence_broadcast() {
        let mut s = Settings::default();
        s.set("gen.label_prevalence", "0.3").unwrap();
        assert_eq!(s.gen.label_prevalence, vec![0.3; 19]);
        s.set("gen.label_prevalence", "0.1,0.2").unwrap();
        assert_eq!(s.gen.label_prevalence, vec![0.1, 0.2]);
    }

    #[test]
    fn model_config_round_trip() {
        let s = Settings::default();
        let meta = DatasetMeta {
            labels: 4,
            image_dim: 9,
            vocab_size: 50,
        };
        let mut c = s.model_config(&meta);
        c.merger.lambda = 0.1 + 0.2;
        let back = model_config_from_text(&model_config_to_text(&c), "x").unwrap();
        assert_eq!(back, c);
        let partial = model_config_to_text(&c).replace("labels = 4\n", "");
        assert!(model_config_from_text(&partial, "x").is_err());
    }
}
