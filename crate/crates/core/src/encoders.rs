//! Toy modality encoders.
//!
//! The text encoder pools rows of a learnable embedding table; the image
//! encoder is a small MLP over precomputed feature vectors. Both produce one
//! row per sample, which is all the fusion layer needs from them.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use libm::sqrt;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Token id reserved for the classification slot used by [`Pooling::Cls`].
pub const CLS_TOKEN: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Sum,
    Mean,
    /// Embedding of the reserved [`CLS_TOKEN`] slot.
    Cls,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

pub(crate) fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Glorot-uniform bound for a `fan_in x fan_out` weight.
pub(crate) fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    sqrt(6.0 / (fan_in + fan_out) as f64)
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    embedding: ParamId,
}

impl TextEncoder {
    /// Registers `<prefix>.embedding`, initialized uniformly in `[-0.1, 0.1]`.
    pub fn new<R: Rng + ?Sized>(
        config: TextEncoderConfig,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if config.vocab_size == 0 || config.embed_dim == 0 {
            return Err(Error::invalid(
                "text encoder",
                "vocab_size and embed_dim must be positive",
            ));
        }
        let table = uniform_tensor(rng, &[config.vocab_size, config.embed_dim], 0.1);
        let embedding = store.add(format!("{prefix}.embedding"), table)?;
        Ok(TextEncoder { config, embedding })
    }

    /// Rebinds an encoder to an existing embedding parameter.
    pub fn from_store(config: TextEncoderConfig, prefix: &str, store: &ParamStore) -> Result<Self> {
        let name = format!("{prefix}.embedding");
        let embedding = lookup(store, &name, &[config.vocab_size, config.embed_dim])?;
        Ok(TextEncoder { config, embedding })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn output_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Encodes a batch of token sequences into a `batch x embed_dim` node.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, batch: &[&[u32]]) -> Result<NodeId> {
        let vocab = self.config.vocab_size;
        for (i, seq) in batch.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::invalid(
                    "token sequence",
                    format!("sample {i} has no tokens"),
                ));
            }
            if let Some(t) = seq.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::invalid(
                    "token id",
                    format!("sample {i}: id {t} out of vocabulary of size {vocab}"),
                ));
            }
        }
        let bags: Vec<Vec<usize>> = match self.config.pooling {
            Pooling::Cls => batch
                .iter()
                .map(|_| alloc::vec![CLS_TOKEN as usize])
                .collect(),
            _ => batch
                .iter()
                .map(|seq| seq.iter().map(|&t| t as usize).collect())
                .collect(),
        };
        let table = g.param(store, self.embedding);
        g.embedding_bag(table, bags, self.config.pooling == Pooling::Mean)
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    config: ImageEncoderConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl ImageEncoder {
    /// Registers `<prefix>.l{i}.W` (`fan_in x fan_out`) and `<prefix>.l{i}.b`
    /// for every layer; weights are Glorot-uniform, biases zero.
    pub fn new<R: Rng + ?Sized>(
        config: ImageEncoderConfig,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let dims = layer_dims(&config)?;
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = uniform_tensor(rng, &[fan_in, fan_out], glorot_bound(fan_in, fan_out));
            let w = store.add(format!("{prefix}.l{i}.W"), w)?;
            let b = store.add(format!("{prefix}.l{i}.b"), Tensor::zeros(&[fan_out]))?;
            layers.push((w, b));
        }
        Ok(ImageEncoder { config, layers })
    }

    pub fn from_store(
        config: ImageEncoderConfig,
        prefix: &str,
        store: &ParamStore,
    ) -> Result<Self> {
        let dims = layer_dims(&config)?;
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let w = lookup(store, &format!("{prefix}.l{i}.W"), &[pair[0], pair[1]])?;
            let b = lookup(store, &format!("{prefix}.l{i}.b"), &[pair[1]])?;
            layers.push((w, b));
        }
        Ok(ImageEncoder { config, layers })
    }

    pub fn config(&self) -> &ImageEncoderConfig {
        &self.config
    }

    /// `(weight, bias)` per layer, input side first.
    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    /// Runs the MLP on a `batch x input_dim` feature matrix. Hidden layers use
    /// the configured activation; the last layer is linear.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, features: &Tensor) -> Result<NodeId> {
        if features.cols() != self.config.input_dim {
            return Err(Error::shape(
                "encode_image",
                features.shape(),
                &[self.config.input_dim],
            ));
        }
        if !features.is_finite() {
            return Err(Error::invalid("image features", "non-finite value"));
        }
        let mut h = g.input(features.clone());
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            let z = g.matmul(h, wn)?;
            h = g.add_bias(z, bn)?;
            if i < last {
                h = match self.config.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                };
            }
        }
        Ok(h)
    }
}

fn layer_dims(config: &ImageEncoderConfig) -> Result<Vec<usize>> {
    let mut dims = Vec::with_capacity(config.hidden_dims.len() + 2);
    dims.push(config.input_dim);
    dims.extend_from_slice(&config.hidden_dims);
    dims.push(config.output_dim);
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(
            "image encoder",
            format!("zero-sized layer in {dims:?}"),
        ));
    }
    Ok(dims)
}

pub(crate) fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .find(name)
        .ok_or_else(|| Error::invalid("parameter", format!("missing {name:?}")))?;
    let have = store.value(id).shape();
    if have != shape {
        return Err(Error::shape("parameter lookup", have, shape));
    }
    Ok(id)
}

impl core::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Pooling::Sum),
            "mean" => Ok(Pooling::Mean),
            "cls" => Ok(Pooling::Cls),
            other => Err(Error::invalid("pooling", String::from(other))),
        }
    }
}

impl core::fmt::Display for Pooling {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Pooling::Sum => "sum",
            Pooling::Mean => "mean",
            Pooling::Cls => "cls",
        })
    }
}

impl core::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid("activation", String::from(other))),
        }
    }
}

impl core::fmt::Display for Activation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}
