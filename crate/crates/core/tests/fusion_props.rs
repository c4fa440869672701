mod common;

use common::{jitter, random_records, tiny_config};
use modfuse_core::fusion::{entropy_identity_check, gate, kl_uniform_value, ModalityFeatures};
use modfuse_core::{Batch, FusionModel, GateKind, Graph, MergerKind, Objective, Record, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch_of(records: &[Record], labels: usize) -> Batch<'_> {
    let refs: Vec<&Record> = records.iter().collect();
    Batch::from_records(&refs, labels).unwrap()
}

#[test]
fn simplex_closure_on_every_forward() {
    for gate_kind in [GateKind::Sigmoid, GateKind::Softmax] {
        for seed in 0..10 {
            let cfg = tiny_config(
                MergerKind::ModalityAttention,
                gate_kind,
                seed % 2 == 0,
                Objective::Multilabel,
            );
            let mut model = FusionModel::new(cfg, seed).unwrap();
            jitter(&mut model, seed);
            let records = random_records(seed, 16, model.config());
            let batch = batch_of(&records, 3);
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &batch).unwrap();
            let p = fwd.attention.unwrap();
            for (a, b) in g.value(p.p_txt).data().iter().zip(g.value(p.p_img).data()) {
                assert!(*a > 0.0 && *a < 1.0 && *b > 0.0 && *b < 1.0);
                assert!((a + b - 1.0).abs() < 1e-12);
                if gate_kind == GateKind::Sigmoid {
                    assert_eq!(*b, 1.0 - a);
                }
            }
        }
    }
}

#[test]
fn zero_lambda_loss_is_plain_cross_entropy() {
    let mut cfg = tiny_config(
        MergerKind::ModalityAttention,
        GateKind::Sigmoid,
        true,
        Objective::Multilabel,
    );
    cfg.merger.lambda = 0.0;
    let mut model = FusionModel::new(cfg, 4).unwrap();
    jitter(&mut model, 4);
    let records = random_records(4, 8, model.config());
    let batch = batch_of(&records, 3);
    let mut g = Graph::new();
    let (fwd, loss) = model.loss(&mut g, &batch).unwrap();
    let plain = g.bce_loss(fwd.probs, &batch.targets).unwrap();
    assert_eq!(g.scalar(loss.total).to_bits(), g.scalar(plain).to_bits());
    assert!(g.scalar(loss.kl.unwrap()) > 0.0);
}

/// A concat model with head `(W, b)` and an attention model whose gate is
/// pinned to (0.5, 0.5) with head `(2W, b)` produce the same logits.
#[test]
fn concat_equals_uniform_attention_with_doubled_head() {
    let concat_cfg = tiny_config(
        MergerKind::Concat,
        GateKind::Sigmoid,
        true,
        Objective::Multilabel,
    );
    let attn_cfg = tiny_config(
        MergerKind::ModalityAttention,
        GateKind::Sigmoid,
        true,
        Objective::Multilabel,
    );
    for seed in 0..20 {
        let mut concat = FusionModel::new(concat_cfg.clone(), seed).unwrap();
        jitter(&mut concat, seed);
        let mut store = concat.store().clone();
        let w = store.find("head.W").unwrap();
        let doubled = store.value(w).data().iter().map(|v| 2.0 * v).collect();
        store.get_mut(w).value = Tensor::new(store.value(w).shape().to_vec(), doubled).unwrap();
        for name in ["gate.W", "gate.b"] {
            let id = store.find(name).unwrap();
            store.get_mut(id).value.fill(0.0);
        }
        let attn = FusionModel::from_parts(attn_cfg.clone(), store).unwrap();

        let records = random_records(seed + 100, 5, concat.config());
        let batch = batch_of(&records, 3);
        let mut g = Graph::new();
        let a = concat.forward(&mut g, &batch).unwrap();
        let b = attn.forward(&mut g, &batch).unwrap();
        for (x, y) in g
            .value(a.logits)
            .data()
            .iter()
            .zip(g.value(b.logits).data())
        {
            assert!((x - y).abs() < 1e-12, "seed {seed}: {x} vs {y}");
        }
    }
}

#[test]
fn kl_entropy_identity_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p: f64 = rng.random_range(0.0..1.0);
        worst = worst.max(entropy_identity_check(&[p, 1.0 - p]));
    }
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn clamped_kl_matches_closed_form_away_from_boundary() {
    let expected = 0.9 * (1.8f64).ln() + 0.1 * (0.2f64).ln();
    assert!((kl_uniform_value(&[0.9, 0.1]) - expected).abs() < 1e-15);
    assert!((kl_uniform_value(&[1.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-10);
}

proptest! {
    /// Scaling the gate weights and bias by the same positive constant keeps
    /// the sign of the gate logit, hence which modality gets weight > 0.5.
    #[test]
    fn gate_argmax_invariant_under_positive_scaling(
        w in prop::collection::vec(-2.0f64..2.0, 5),
        b in -1.0f64..1.0,
        x in prop::collection::vec(-3.0f64..3.0, 5),
        c in 0.01f64..100.0,
    ) {
        let run = |scale: f64| {
            let mut store = modfuse_core::ParamStore::new();
            let gw = store.add("gate.W", Tensor::matrix(5, 1, w.iter().map(|v| v * scale).collect()).unwrap()).unwrap();
            let gb = store.add("gate.b", Tensor::vector(vec![b * scale])).unwrap();
            let gt = modfuse_core::fusion::Gate { weight: gw, bias: gb, kind: GateKind::Sigmoid };
            let mut g = Graph::new();
            let text = g.input(Tensor::matrix(1, 2, x[..2].to_vec()).unwrap());
            let image = g.input(Tensor::matrix(1, 3, x[2..].to_vec()).unwrap());
            let p = gate(&mut g, &store, &ModalityFeatures { text, image }, &gt).unwrap();
            g.scalar(p.p_txt)
        };
        let (base, scaled) = (run(1.0), run(c));
        let logit: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + b;
        prop_assume!(logit.abs() > 1e-9);
        prop_assert_eq!(base > 0.5, scaled > 0.5);
    }

    #[test]
    fn entropy_identity_random_simplex(p in 1e-9f64..(1.0 - 1e-9)) {
        prop_assert!(entropy_identity_check(&[p, 1.0 - p]) < 1e-12);
    }
}
