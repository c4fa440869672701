use modfuse_core::{
    generate, train, Activation, Error, FusionModel, GateKind, GenConfig, ImageEncoderConfig,
    LossTerm, MergerConfig, MergerKind, Modalities, ModelConfig, Objective, Pooling, Record,
    ScheduleConfig, TextEncoderConfig, TrainConfig,
};

fn small_data(n: usize) -> (GenConfig, Vec<Record>) {
    let cfg = GenConfig {
        n_samples: n,
        labels: 4,
        label_prevalence: vec![0.3; 4],
        rho_txt: 0.95,
        rho_img: 0.5,
        vocab_size: 60,
        image_dim: 8,
        seed: 21,
        ..GenConfig::default()
    };
    let records = generate(&cfg).unwrap();
    (cfg, records)
}

fn model_config(gen: &GenConfig, kind: MergerKind, lambda: f64) -> ModelConfig {
    ModelConfig {
        labels: gen.labels,
        objective: Objective::Multilabel,
        modalities: Modalities::Both,
        text: TextEncoderConfig {
            vocab_size: gen.vocab_size,
            embed_dim: 8,
            pooling: Pooling::Sum,
        },
        image: ImageEncoderConfig {
            input_dim: gen.image_dim,
            hidden_dims: vec![8],
            output_dim: 8,
            activation: Activation::Relu,
        },
        merger: MergerConfig {
            kind,
            gate: GateKind::Sigmoid,
            lambda,
            ..MergerConfig::default()
        },
    }
}

fn run(
    model: &mut FusionModel,
    records: &[Record],
    tcfg: &TrainConfig,
    lr: f64,
) -> modfuse_core::Result<modfuse_core::TrainLog> {
    let scfg = ScheduleConfig::with_warmup_fraction(lr, tcfg.total_steps(records.len()), 0.1);
    train(model, records, None, tcfg, &scfg)
}

#[test]
fn overfits_a_singleton() {
    let (gen, records) = small_data(1);
    let mut model =
        FusionModel::new(model_config(&gen, MergerKind::ModalityAttention, 0.0), 1).unwrap();
    let tcfg = TrainConfig {
        batch_size: 1,
        epochs: 300,
        seed: 2,
        ..TrainConfig::default()
    };
    let log = run(&mut model, &records, &tcfg, 1e-2).unwrap();
    let last = log.last().unwrap().loss_ce;
    assert!(last < 1e-2, "final loss {last}");
}

#[test]
fn large_lambda_drives_attention_to_uniform() {
    let (gen, records) = small_data(1000);
    let mut model =
        FusionModel::new(model_config(&gen, MergerKind::ModalityAttention, 10.0), 1).unwrap();
    let tcfg = TrainConfig {
        batch_size: 32,
        epochs: 5,
        seed: 2,
        ..TrainConfig::default()
    };
    run(&mut model, &records, &tcfg, 5e-3).unwrap();
    let preds = model.predict(&records, 256).unwrap();
    let att = preds.attention().unwrap();
    let dev = att.iter().map(|p| (p - 0.5).abs()).sum::<f64>() / att.len() as f64;
    assert!(dev < 0.05, "mean |p_txt - 0.5| = {dev}");
}

#[test]
fn frozen_encoders_stay_bit_identical() {
    let (gen, records) = small_data(200);
    let mut model =
        FusionModel::new(model_config(&gen, MergerKind::ModalityAttention, 0.1), 1).unwrap();
    let before = model.store().clone();
    let tcfg = TrainConfig {
        batch_size: 16,
        epochs: 2,
        freeze_encoders: true,
        ..TrainConfig::default()
    };
    run(&mut model, &records, &tcfg, 5e-3).unwrap();
    let mut moved = 0;
    for (a, b) in before.iter().zip(model.store().iter()) {
        let encoder = a.name.starts_with("text.") || a.name.starts_with("image.");
        if encoder {
            assert_eq!(a.value, b.value, "{} changed", a.name);
        } else if a.value != b.value {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn concat_training_never_touches_gate() {
    let (gen, records) = small_data(200);
    let mut model = FusionModel::new(model_config(&gen, MergerKind::Concat, 0.0), 1).unwrap();
    let before = model.store().clone();
    let tcfg = TrainConfig {
        batch_size: 16,
        epochs: 2,
        ..TrainConfig::default()
    };
    run(&mut model, &records, &tcfg, 5e-3).unwrap();
    for name in ["gate.W", "gate.b"] {
        let id = before.find(name).unwrap();
        let bits = |s: &modfuse_core::ParamStore| {
            s.value(id)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&before), bits(model.store()), "{name}");
    }
    assert_ne!(before, *model.store());
}

#[test]
fn equal_seeds_give_equal_logs() {
    let (gen, records) = small_data(300);
    let (train_part, val) = records.split_at(250);
    let tcfg = TrainConfig {
        batch_size: 32,
        epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let once = || {
        let mut model =
            FusionModel::new(model_config(&gen, MergerKind::ModalityAttention, 0.01), 4).unwrap();
        let scfg =
            ScheduleConfig::with_warmup_fraction(5e-3, tcfg.total_steps(train_part.len()), 0.1);
        let log = train(&mut model, train_part, Some(val), &tcfg, &scfg).unwrap();
        (log, model.into_parts().1)
    };
    let (a, b) = (once(), once());
    assert_eq!(a, b);
    assert_eq!(a.0.epochs.len(), 3);
    assert!(a.0.epochs.iter().all(|e| e.val.is_some()));
}

#[test]
fn non_finite_loss_aborts() {
    let (gen, records) = small_data(20);
    let mut model =
        FusionModel::new(model_config(&gen, MergerKind::ModalityAttention, 0.1), 1).unwrap();
    let id = model.store().find("head.b").unwrap();
    model.store_mut().get_mut(id).value.data_mut()[0] = f64::NAN;
    let tcfg = TrainConfig {
        batch_size: 8,
        epochs: 1,
        ..TrainConfig::default()
    };
    match run(&mut model, &records, &tcfg, 1e-3) {
        Err(Error::NonFinite {
            step: 0,
            term: LossTerm::CrossEntropy,
        }) => {}
        other => panic!("expected abort, got {other:?}"),
    }
}
