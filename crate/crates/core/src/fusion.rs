//! Modality-attention fusion.
//!
//! Per sample, a linear gate over the concatenated modality features yields a
//! distribution `p = (p_txt, p_img)`; each modality vector is scaled by its
//! weight, the scaled vectors are concatenated and fed to a linear classifier
//! with no hidden layer. Training minimizes
//!
//! ```text
//! L_reg = L_ce + lambda * sum_j KL(p_j || uniform)
//! ```
//!
//! where the KL sum runs over the samples of a batch (not averaged), and
//! `L_ce` is summed over labels and averaged over the batch.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use libm::log;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Record;
use crate::encoders::{
    glorot_bound, lookup, uniform_tensor, ImageEncoder, ImageEncoderConfig, TextEncoder,
    TextEncoderConfig,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, PROB_EPS};
use crate::metrics::PredictionSet;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default LayerNorm epsilon.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergerKind {
    Concat,
    ModalityAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Multilabel,
    Multiclass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modalities {
    Both,
    TextOnly,
    ImageOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergerConfig {
    pub kind: MergerKind,
    /// Only meaningful for [`MergerKind::ModalityAttention`].
    pub gate: GateKind,
    /// LayerNorm each modality vector before gating and scaling.
    pub normalize: bool,
    /// Learnable gamma/beta on the LayerNorm.
    pub norm_affine: bool,
    pub norm_eps: f64,
    pub lambda: f64,
}

impl Default for MergerConfig {
    fn default() -> Self {
        MergerConfig {
            kind: MergerKind::ModalityAttention,
            gate: GateKind::Sigmoid,
            normalize: true,
            norm_affine: true,
            norm_eps: LAYERNORM_EPS,
            lambda: 0.0,
        }
    }
}

impl MergerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(
                "lambda",
                format!("must be finite and >= 0, got {}", self.lambda),
            ));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::invalid(
                "norm_eps",
                format!("must be > 0, got {}", self.norm_eps),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub labels: usize,
    pub objective: Objective,
    pub modalities: Modalities,
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    pub merger: MergerConfig,
}

/// Encoded (and optionally normalized) modality features, one row per sample.
#[derive(Debug, Clone, Copy)]
pub struct ModalityFeatures {
    pub text: NodeId,
    pub image: NodeId,
}

/// Per-sample gate output.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    /// `batch x 1`
    pub p_txt: NodeId,
    /// `batch x 1`
    pub p_img: NodeId,
    /// `batch x 2`, rows on the simplex.
    pub distribution: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct Gate {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kind: GateKind,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub objective: Objective,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: Option<ParamId>,
    beta: Option<ParamId>,
    eps: f64,
}

impl Norm {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gamma = self.gamma.map(|p| g.param(store, p));
        let beta = self.beta.map(|p| g.param(store, p));
        g.layernorm(x, gamma, beta, self.eps)
    }
}

/// Evaluates the gate on `[x_txt, x_img]`.
///
/// Sigmoid gate: `p_txt = sigmoid(W [x_txt, x_img] + b)` and
/// `p_img = 1 - p_txt`. Softmax gate: `p = softmax(W [x_txt, x_img] + b)`.
pub fn gate(
    g: &mut Graph,
    store: &ParamStore,
    feats: &ModalityFeatures,
    gate: &Gate,
) -> Result<AttentionWeights> {
    let joint = g.concat(feats.text, feats.image)?;
    let w = g.param(store, gate.weight);
    let b = g.param(store, gate.bias);
    let expected = match gate.kind {
        GateKind::Sigmoid => 1,
        GateKind::Softmax => 2,
    };
    if g.value(w).cols() != expected {
        return Err(Error::shape(
            "gate",
            g.value(w).shape(),
            &[g.value(joint).cols(), expected],
        ));
    }
    let z = g.matmul(joint, w)?;
    let logits = g.add_bias(z, b)?;
    match gate.kind {
        GateKind::Sigmoid => {
            let p_txt = g.sigmoid(logits);
            let p_img = g.affine(p_txt, -1.0, 1.0);
            let distribution = g.concat(p_txt, p_img)?;
            Ok(AttentionWeights {
                p_txt,
                p_img,
                distribution,
            })
        }
        GateKind::Softmax => {
            let distribution = g.softmax(logits);
            let p_txt = g.column(distribution, 0)?;
            let p_img = g.column(distribution, 1)?;
            Ok(AttentionWeights {
                p_txt,
                p_img,
                distribution,
            })
        }
    }
}

/// Builds the classifier input: `[x_txt, x_img]` for concat, or
/// `[p_txt * x_txt, p_img * x_img]` for modality attention.
pub fn merge(
    g: &mut Graph,
    feats: &ModalityFeatures,
    p: Option<&AttentionWeights>,
    kind: MergerKind,
) -> Result<NodeId> {
    match (kind, p) {
        (MergerKind::Concat, _) => g.concat(feats.text, feats.image),
        (MergerKind::ModalityAttention, Some(p)) => {
            let t = g.scale_rows(feats.text, p.p_txt)?;
            let i = g.scale_rows(feats.image, p.p_img)?;
            g.concat(t, i)
        }
        (MergerKind::ModalityAttention, None) => Err(Error::Contract(String::from(
            "modality-attention merge needs attention weights",
        ))),
    }
}

/// Linear head. Returns `(logits, probabilities)`.
pub fn classify(
    g: &mut Graph,
    store: &ParamStore,
    fused: NodeId,
    head: &ClassifierHead,
) -> Result<(NodeId, NodeId)> {
    let w = g.param(store, head.weight);
    let b = g.param(store, head.bias);
    let z = g.matmul(fused, w)?;
    let logits = g.add_bias(z, b)?;
    let probs = match head.objective {
        Objective::Multilabel => g.sigmoid(logits),
        Objective::Multiclass => g.softmax(logits),
    };
    Ok((logits, probs))
}

/// `sum_j KL(p_j || uniform)` over the rows of the batch, in nats.
pub fn kl_to_uniform(g: &mut Graph, p: &AttentionWeights) -> NodeId {
    g.kl_to_uniform(p.distribution)
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub ce: NodeId,
    pub kl: Option<NodeId>,
}

/// `L_ce + lambda * sum_j KL(p_j || q)`. With `lambda == 0` or no attention,
/// the total is the cross-entropy node itself.
pub fn regularized_loss(
    g: &mut Graph,
    probs: NodeId,
    targets: &Tensor,
    objective: Objective,
    p: Option<&AttentionWeights>,
    lambda: f64,
) -> Result<LossNodes> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(
            "lambda",
            format!("must be >= 0, got {lambda}"),
        ));
    }
    let ce = match objective {
        Objective::Multilabel => g.bce_loss(probs, targets)?,
        Objective::Multiclass => g.ce_loss(probs, targets)?,
    };
    let Some(p) = p else {
        return Ok(LossNodes {
            total: ce,
            ce,
            kl: None,
        });
    };
    if g.value(p.distribution).rows() != g.value(probs).rows() {
        return Err(Error::shape(
            "regularized_loss",
            g.value(probs).shape(),
            g.value(p.distribution).shape(),
        ));
    }
    let kl = kl_to_uniform(g, p);
    if lambda == 0.0 {
        return Ok(LossNodes {
            total: ce,
            ce,
            kl: Some(kl),
        });
    }
    let weighted = g.affine(kl, lambda, 0.0);
    let total = g.add(ce, weighted)?;
    Ok(LossNodes {
        total,
        ce,
        kl: Some(kl),
    })
}

/// KL divergence of a distribution from uniform, in nats, with clamping.
pub fn kl_uniform_value(p: &[f64]) -> f64 {
    let m = p.len() as f64;
    p.iter()
        .map(|&x| {
            let x = x.clamp(PROB_EPS, 1.0 - PROB_EPS);
            x * log(x * m)
        })
        .sum()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * log(x))
        .sum::<f64>()
}

/// `|KL(p || uniform) - (ln M - H(p))|`, computed along two independent
/// routes. Zero up to rounding for any point on the simplex away from the
/// clamp boundary.
pub fn entropy_identity_check(p: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * log(x * p.len() as f64))
        .sum();
    (kl - (log(p.len() as f64) - entropy(p))).abs()
}

/// One batch of model inputs.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub ids: Vec<&'a str>,
    pub tokens: Vec<&'a [u32]>,
    pub images: Tensor,
    pub targets: Tensor,
}

impl<'a> Batch<'a> {
    pub fn from_records(records: &[&'a Record], labels: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("batch", "no records"));
        }
        let dim = records[0].image_features.len();
        let mut images = Vec::with_capacity(records.len() * dim);
        let mut targets = Vec::with_capacity(records.len() * labels);
        for r in records {
            if r.image_features.len() != dim {
                return Err(Error::shape("batch", &[dim], &[r.image_features.len()]));
            }
            if r.labels.len() != labels {
                return Err(Error::shape("batch labels", &[labels], &[r.labels.len()]));
            }
            images.extend_from_slice(&r.image_features);
            targets.extend(r.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
        }
        Ok(Batch {
            ids: records.iter().map(|r| r.id.as_str()).collect(),
            tokens: records.iter().map(|r| r.tokens.as_slice()).collect(),
            images: Tensor::matrix(records.len(), dim, images)?,
            targets: Tensor::matrix(records.len(), labels, targets)?,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub logits: NodeId,
    pub probs: NodeId,
    pub attention: Option<AttentionWeights>,
}

/// Encoders, normalization, gate and head, with all parameters in one store.
#[derive(Debug, Clone)]
pub struct FusionModel {
    config: ModelConfig,
    store: ParamStore,
    text: Option<TextEncoder>,
    image: Option<ImageEncoder>,
    norm_txt: Option<Norm>,
    norm_img: Option<Norm>,
    gate: Option<Gate>,
    head: ClassifierHead,
}

impl FusionModel {
    /// Builds and randomly initializes a model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        validate_config(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (use_txt, use_img) = modality_flags(config.modalities);
        let text = if use_txt {
            Some(TextEncoder::new(
                config.text.clone(),
                "text",
                &mut store,
                &mut rng,
            )?)
        } else {
            None
        };
        let image = if use_img {
            Some(ImageEncoder::new(
                config.image.clone(),
                "image",
                &mut store,
                &mut rng,
            )?)
        } else {
            None
        };
        let mut add_norm = |name: &str, dim: usize, enabled: bool| -> Result<Option<Norm>> {
            if !enabled || !config.merger.normalize {
                return Ok(None);
            }
            let (gamma, beta) = if config.merger.norm_affine {
                (
                    Some(store.add(format!("norm.{name}.gamma"), Tensor::filled(&[dim], 1.0))?),
                    Some(store.add(format!("norm.{name}.beta"), Tensor::zeros(&[dim]))?),
                )
            } else {
                (None, None)
            };
            Ok(Some(Norm {
                gamma,
                beta,
                eps: config.merger.norm_eps,
            }))
        };
        let norm_txt = add_norm("txt", config.text.embed_dim, use_txt)?;
        let norm_img = add_norm("img", config.image.output_dim, use_img)?;

        let gate = if config.modalities == Modalities::Both {
            let joint = config.text.embed_dim + config.image.output_dim;
            let out = gate_outputs(config.merger.gate);
            let w = uniform_tensor(&mut rng, &[joint, out], glorot_bound(joint, out));
            Some(Gate {
                weight: store.add("gate.W", w)?,
                bias: store.add("gate.b", Tensor::zeros(&[out]))?,
                kind: config.merger.gate,
            })
        } else {
            None
        };

        let fan_in = head_input_dim(&config);
        let w = uniform_tensor(
            &mut rng,
            &[fan_in, config.labels],
            glorot_bound(fan_in, config.labels),
        );
        let head = ClassifierHead {
            weight: store.add("head.W", w)?,
            bias: store.add("head.b", Tensor::zeros(&[config.labels]))?,
            objective: config.objective,
        };
        Ok(FusionModel {
            config,
            store,
            text,
            image,
            norm_txt,
            norm_img,
            gate,
            head,
        })
    }

    /// Rebinds a model to a stored set of named parameters.
    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Self> {
        validate_config(&config)?;
        let (use_txt, use_img) = modality_flags(config.modalities);
        let text = if use_txt {
            Some(TextEncoder::from_store(
                config.text.clone(),
                "text",
                &store,
            )?)
        } else {
            None
        };
        let image = if use_img {
            Some(ImageEncoder::from_store(
                config.image.clone(),
                "image",
                &store,
            )?)
        } else {
            None
        };
        let norm = |name: &str, dim: usize, enabled: bool| -> Result<Option<Norm>> {
            if !enabled || !config.merger.normalize {
                return Ok(None);
            }
            let (gamma, beta) = if config.merger.norm_affine {
                (
                    Some(lookup(&store, &format!("norm.{name}.gamma"), &[dim])?),
                    Some(lookup(&store, &format!("norm.{name}.beta"), &[dim])?),
                )
            } else {
                (None, None)
            };
            Ok(Some(Norm {
                gamma,
                beta,
                eps: config.merger.norm_eps,
            }))
        };
        let norm_txt = norm("txt", config.text.embed_dim, use_txt)?;
        let norm_img = norm("img", config.image.output_dim, use_img)?;
        let gate = if config.modalities == Modalities::Both {
            let joint = config.text.embed_dim + config.image.output_dim;
            let out = gate_outputs(config.merger.gate);
            Some(Gate {
                weight: lookup(&store, "gate.W", &[joint, out])?,
                bias: lookup(&store, "gate.b", &[out])?,
                kind: config.merger.gate,
            })
        } else {
            None
        };
        let fan_in = head_input_dim(&config);
        let head = ClassifierHead {
            weight: lookup(&store, "head.W", &[fan_in, config.labels])?,
            bias: lookup(&store, "head.b", &[config.labels])?,
            objective: config.objective,
        };
        Ok(FusionModel {
            config,
            store,
            text,
            image,
            norm_txt,
            norm_img,
            gate,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.store)
    }

    pub fn gate_params(&self) -> Option<&Gate> {
        self.gate.as_ref()
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    /// Sets the regularization strength used by [`FusionModel::loss`].
    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        let mut merger = self.config.merger.clone();
        merger.lambda = lambda;
        merger.validate()?;
        self.config.merger = merger;
        Ok(())
    }

    /// Does this model produce attention weights?
    pub fn has_attention(&self) -> bool {
        self.gate.is_some() && self.config.merger.kind == MergerKind::ModalityAttention
    }

    /// Encodes both modalities (normalized when configured).
    pub fn features(
        &self,
        g: &mut Graph,
        batch: &Batch<'_>,
    ) -> Result<(Option<NodeId>, Option<NodeId>)> {
        let txt = match &self.text {
            Some(enc) => {
                let x = enc.encode(g, &self.store, &batch.tokens)?;
                Some(match &self.norm_txt {
                    Some(n) => n.apply(g, &self.store, x)?,
                    None => x,
                })
            }
            None => None,
        };
        let img = match &self.image {
            Some(enc) => {
                let x = enc.encode(g, &self.store, &batch.images)?;
                Some(match &self.norm_img {
                    Some(n) => n.apply(g, &self.store, x)?,
                    None => x,
                })
            }
            None => None,
        };
        Ok((txt, img))
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch<'_>) -> Result<Forward> {
        let (txt, img) = self.features(g, batch)?;
        let (fused, attention) = match (txt, img) {
            (Some(text), Some(image)) => {
                let feats = ModalityFeatures { text, image };
                let attention = match (self.config.merger.kind, &self.gate) {
                    (MergerKind::ModalityAttention, Some(gt)) => {
                        Some(gate(g, &self.store, &feats, gt)?)
                    }
                    _ => None,
                };
                (
                    merge(g, &feats, attention.as_ref(), self.config.merger.kind)?,
                    attention,
                )
            }
            (Some(x), None) | (None, Some(x)) => (x, None),
            (None, None) => unreachable!("at least one modality is always built"),
        };
        let (logits, probs) = classify(g, &self.store, fused, &self.head)?;
        Ok(Forward {
            logits,
            probs,
            attention,
        })
    }

    /// Forward pass plus the regularized loss for a batch.
    pub fn loss(&self, g: &mut Graph, batch: &Batch<'_>) -> Result<(Forward, LossNodes)> {
        let fwd = self.forward(g, batch)?;
        let loss = regularized_loss(
            g,
            fwd.probs,
            &batch.targets,
            self.config.objective,
            fwd.attention.as_ref(),
            self.config.merger.lambda,
        )?;
        Ok((fwd, loss))
    }

    /// Scores every record in fixed order, `batch_size` rows at a time.
    pub fn predict(&self, records: &[Record], batch_size: usize) -> Result<PredictionSet> {
        if records.is_empty() {
            return Err(Error::invalid("records", "nothing to predict"));
        }
        let l = self.config.labels;
        let mut scores = Vec::with_capacity(records.len() * l);
        let mut targets = Vec::with_capacity(records.len() * l);
        let mut attention = self
            .has_attention()
            .then(|| Vec::with_capacity(records.len()));
        let refs: Vec<&Record> = records.iter().collect();
        for chunk in refs.chunks(batch_size.max(1)) {
            let batch = Batch::from_records(chunk, l)?;
            let mut g = Graph::new();
            let fwd = self.forward(&mut g, &batch)?;
            scores.extend_from_slice(g.value(fwd.probs).data());
            targets.extend_from_slice(batch.targets.data());
            if let (Some(att), Some(p)) = (attention.as_mut(), fwd.attention) {
                att.extend_from_slice(g.value(p.p_txt).data());
            }
        }
        PredictionSet::new(
            records.iter().map(|r| r.id.clone()).collect(),
            l,
            scores,
            targets,
            attention,
        )
    }
}

fn modality_flags(m: Modalities) -> (bool, bool) {
    match m {
        Modalities::Both => (true, true),
        Modalities::TextOnly => (true, false),
        Modalities::ImageOnly => (false, true),
    }
}

fn gate_outputs(kind: GateKind) -> usize {
    match kind {
        GateKind::Sigmoid => 1,
        GateKind::Softmax => 2,
    }
}

fn head_input_dim(config: &ModelConfig) -> usize {
    match config.modalities {
        Modalities::Both => config.text.embed_dim + config.image.output_dim,
        Modalities::TextOnly => config.text.embed_dim,
        Modalities::ImageOnly => config.image.output_dim,
    }
}

fn validate_config(config: &ModelConfig) -> Result<()> {
    if config.labels == 0 {
        return Err(Error::invalid("labels", "need at least one label"));
    }
    if config.objective == Objective::Multiclass && config.labels < 2 {
        return Err(Error::invalid(
            "labels",
            "multiclass needs at least two classes",
        ));
    }
    config.merger.validate()
}

macro_rules! text_enum {
    ($ty:ident, $what:literal, $($variant:ident => $name:literal),+ $(,)?) => {
        impl core::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::invalid($what, String::from(other))),
                }
            }
        }

        impl core::fmt::Display for $ty {
            fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
                f.write_str(match self {
                    $($ty::$variant => $name,)+
                })
            }
        }
    };
}

text_enum!(MergerKind, "merger", Concat => "concat", ModalityAttention => "attention");
text_enum!(GateKind, "gate", Sigmoid => "sigmoid", Softmax => "softmax");
text_enum!(Objective, "objective", Multilabel => "multilabel", Multiclass => "multiclass");
text_enum!(Modalities, "modalities", Both => "both", TextOnly => "text", ImageOnly => "image");
