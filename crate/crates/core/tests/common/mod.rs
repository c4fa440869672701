#![allow(dead_code)]

use modfuse_core::{
    Activation, Batch, FusionModel, GateKind, Graph, ImageEncoderConfig, MergerConfig, MergerKind,
    Modalities, ModelConfig, Objective, ParamStore, Pooling, Record, TextEncoderConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Below this magnitude gradients are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

/// Worst relative error between analytic gradients (already accumulated in
/// `store`) and central differences of `loss` over every parameter entry.
pub fn max_fd_error(store: &mut ParamStore, loss: &dyn Fn(&ParamStore) -> f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            let analytic = store.grad(id).data()[k];
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + FD_STEP;
            let plus = loss(store);
            store.get_mut(id).value.data_mut()[k] = orig - FD_STEP;
            let minus = loss(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            if rel > worst.0 {
                worst = (
                    rel,
                    format!(
                        "{}[{k}] analytic {analytic} numeric {numeric}",
                        store.get(id).name
                    ),
                );
            }
        }
    }
    worst
}

pub fn tiny_config(
    kind: MergerKind,
    gate: GateKind,
    normalize: bool,
    objective: Objective,
) -> ModelConfig {
    ModelConfig {
        labels: 3,
        objective,
        modalities: Modalities::Both,
        text: TextEncoderConfig {
            vocab_size: 12,
            embed_dim: 4,
            pooling: Pooling::Sum,
        },
        image: ImageEncoderConfig {
            input_dim: 5,
            hidden_dims: vec![4],
            output_dim: 3,
            activation: Activation::Tanh,
        },
        merger: MergerConfig {
            kind,
            gate,
            normalize,
            lambda: 0.7,
            ..MergerConfig::default()
        },
    }
}

pub fn random_records(seed: u64, n: usize, cfg: &ModelConfig) -> Vec<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..6);
            let mut labels: Vec<bool> = (0..cfg.labels).map(|_| rng.random_bool(0.4)).collect();
            if cfg.objective == Objective::Multiclass {
                labels = vec![false; cfg.labels];
                labels[rng.random_range(0..cfg.labels)] = true;
            }
            Record {
                id: format!("r{i}"),
                tokens: (0..len)
                    .map(|_| rng.random_range(0..cfg.text.vocab_size as u32))
                    .collect(),
                image_features: (0..cfg.image.input_dim)
                    .map(|_| rng.random_range(-1.5..1.5))
                    .collect(),
                labels,
                txt_informative: true,
                img_informative: true,
            }
        })
        .collect()
}

/// Perturbs every parameter (including LayerNorm gamma/beta and zero biases)
/// so that no gradient path is trivially symmetric.
pub fn jitter(model: &mut FusionModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.store_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

pub fn model_loss(model: &FusionModel, records: &[Record], store: &ParamStore) -> f64 {
    let m = FusionModel::from_parts(model.config().clone(), store.clone()).unwrap();
    let refs: Vec<&Record> = records.iter().collect();
    let batch = Batch::from_records(&refs, m.config().labels).unwrap();
    let mut g = Graph::new();
    let (_, loss) = m.loss(&mut g, &batch).unwrap();
    g.scalar(loss.total)
}

/// Full-model finite-difference check. Returns the worst relative error.
pub fn full_model_gradcheck(config: ModelConfig, seed: u64) -> (f64, String) {
    let mut model = FusionModel::new(config, seed).unwrap();
    jitter(&mut model, seed);
    let records = random_records(seed, 4, model.config());
    let refs: Vec<&Record> = records.iter().collect();
    let batch = Batch::from_records(&refs, model.config().labels).unwrap();
    let mut g = Graph::new();
    let (_, loss) = model.loss(&mut g, &batch).unwrap();
    let mut store = model.store().clone();
    store.zero_grad();
    g.backward(loss.total, &mut store).unwrap();
    let frozen = model.clone();
    max_fd_error(&mut store, &|s| model_loss(&frozen, &records, s))
}
