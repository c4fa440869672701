//! Settings-driven building blocks shared by the CLI and the test suites.

use modfuse_core::{generate, stratified_split, train, FusionModel, Record, TrainLog};

use crate::config::Settings;
use crate::dataset::DatasetMeta;
use crate::error::Result;

/// Generates the configured dataset and splits it by `split.fractions`.
pub fn prepare(s: &Settings) -> Result<(DatasetMeta, Vec<Vec<Record>>)> {
    let records = generate(&s.gen)?;
    let split = stratified_split(&records, &s.split.fractions, s.split.seed)?;
    Ok((DatasetMeta::from_gen(&s.gen), split.parts))
}

/// Initializes a model from `s` and trains it on `train`, validating on `val`
/// after every epoch when given.
pub fn fit(
    s: &Settings,
    meta: &DatasetMeta,
    train_records: &[Record],
    val: Option<&[Record]>,
) -> Result<(FusionModel, TrainLog)> {
    let mut model = FusionModel::new(s.model_config(meta), s.model.seed)?;
    let log = train(
        &mut model,
        train_records,
        val,
        &s.train_config(),
        &s.schedule(train_records.len()),
    )?;
    Ok((model, log))
}
