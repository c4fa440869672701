//! Command-line interface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use modfuse_core::metrics::{
    attention_histogram, attention_stats, best_modality_counts, evaluate, quantile_sorted,
    WinCriterion,
};
use modfuse_core::{
    generate, stratified_split, FusionModel, GateKind, MergerKind, Modalities, Objective, Record,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{fmt_f64, Settings};
use crate::dataset::{read_dataset, write_dataset, Dataset, DatasetMeta};
use crate::experiment::fit;
use crate::report::{format_eval_report, format_train_log, histogram_table, wins_line};
use crate::sweep::{format_sweep_table, lambda_sweep, SweepData};

#[derive(Debug, Parser)]
#[command(
    name = "modfuse",
    version,
    about = "Gated modality-attention fusion experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Generate(GenerateArgs),
    /// Split a dataset into stratified parts.
    Split(SplitArgs),
    /// Train a model and write a checkpoint plus its TrainLog.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Train one model per lambda and select by validation R@P95.
    Sweep(SweepArgs),
    /// Attention and best-modality analyses of trained models.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (generation, split, init, shuffling).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub labels: Option<usize>,
    #[arg(long)]
    pub rho_txt: Option<f64>,
    #[arg(long)]
    pub rho_img: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated fractions summing to 1.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Output files are `<prefix>.train.ds`, `<prefix>.val.ds`, `<prefix>.test.ds`
    /// (or `<prefix>.part<i>.ds` for other part counts).
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long, value_parser = parse_text::<MergerKind>)]
    pub merger: Option<MergerKind>,
    #[arg(long, value_parser = parse_text::<GateKind>)]
    pub gate: Option<GateKind>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_parser = parse_text::<Modalities>)]
    pub modalities: Option<Modalities>,
    #[arg(long, value_parser = parse_text::<Objective>)]
    pub objective: Option<Objective>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub freeze_encoders: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub data: PathBuf,
    /// Validation set; without it a stratified holdout of the training data
    /// is used.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// TrainLog path, `<out>.log` by default.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Dataset split with `split.fractions` into train/val/test.
    #[arg(long, conflicts_with_all = ["train", "val", "test"], required_unless_present = "train")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "val")]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Criterion {
    Exact,
    PerLabel,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Multimodal checkpoint for the attention analysis.
    #[arg(long, required_unless_present = "text_model")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Text-only checkpoint for the best-modality comparison.
    #[arg(long, requires = "image_model")]
    pub text_model: Option<PathBuf>,
    /// Image-only checkpoint for the best-modality comparison.
    #[arg(long, requires = "text_model")]
    pub image_model: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, value_enum, default_value_t = Criterion::Exact)]
    pub criterion: Criterion,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_text<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn settings(common: &Common) -> anyhow::Result<Settings> {
    let mut s = match &common.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    if let Some(seed) = common.seed {
        s.set_seed(seed);
    }
    Ok(s)
}

fn apply_model_flags(s: &mut Settings, f: &ModelFlags) {
    let m = &mut s.model;
    if let Some(v) = f.merger {
        m.merger.kind = v;
    }
    if let Some(v) = f.gate {
        m.merger.gate = v;
    }
    if let Some(v) = f.lambda {
        m.merger.lambda = v;
    }
    if let Some(v) = f.modalities {
        m.modalities = v;
    }
    if let Some(v) = f.objective {
        m.objective = v;
    }
    let t = &mut s.train;
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.lr {
        t.lr = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    t.freeze_encoders |= f.freeze_encoders;
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn part_names(parts: usize) -> Vec<String> {
    if parts == 3 {
        ["train", "val", "test"].map(String::from).to_vec()
    } else {
        (0..parts).map(|i| format!("part{i}")).collect()
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut s = settings(&a.common)?;
    if let Some(n) = a.n {
        s.set("gen.n_samples", &n.to_string())
            .map_err(anyhow::Error::msg)?;
    }
    if let Some(l) = a.labels {
        s.set("gen.labels", &l.to_string())
            .map_err(anyhow::Error::msg)?;
    }
    if let Some(r) = a.rho_txt {
        s.gen.rho_txt = r;
    }
    if let Some(r) = a.rho_img {
        s.gen.rho_img = r;
    }
    let records = generate(&s.gen)?;
    write_dataset(&a.out, &DatasetMeta::from_gen(&s.gen), &records)?;
    writeln!(
        out,
        "wrote {} records to {}",
        records.len(),
        a.out.display()
    )?;
    Ok(())
}

fn cmd_split(a: &SplitArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let s = settings(&a.common)?;
    let fractions = a.fractions.clone().unwrap_or(s.split.fractions);
    let ds = read_dataset(&a.data)?;
    let split = stratified_split(&ds.records, &fractions, s.split.seed)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    for (name, part) in part_names(fractions.len()).iter().zip(&split.parts) {
        let path = with_suffix(&a.out_prefix, &format!(".{name}.ds"));
        write_dataset(&path, &ds.meta, part)?;
        writeln!(out, "{name}\t{}\t{}", part.len(), path.display())?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut s = settings(&a.common)?;
    apply_model_flags(&mut s, &a.model);
    let ds = read_dataset(&a.data)?;
    let val = a.val.as_deref().map(read_dataset).transpose()?;
    if let Some(v) = &val {
        if v.meta != ds.meta {
            bail!(
                "{}: dimensions differ from {}",
                a.val.as_ref().unwrap().display(),
                a.data.display()
            );
        }
    }
    let tcfg = s.train_config();
    let (train_records, val_records) = match val {
        Some(v) => (ds.records, v.records),
        None => {
            // stratified holdout, seeded like the shuffle
            let f = tcfg.val_fraction;
            if !(f > 0.0 && f < 1.0) {
                bail!("train.val_fraction {f} must be in (0, 1) without --val");
            }
            let mut split = stratified_split(&ds.records, &[1.0 - f, f], tcfg.seed)?;
            let held = split.parts.pop().expect("two parts");
            (split.parts.pop().expect("two parts"), held)
        }
    };
    let (model, log) = fit(&s, &ds.meta, &train_records, Some(&val_records))?;
    save_checkpoint(&a.out, &model)?;
    let log_text = format_train_log(&log);
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log"));
    write_file(&log_path, &log_text)?;
    write!(out, "{log_text}")?;
    writeln!(
        out,
        "checkpoint {}\nlog {}",
        a.out.display(),
        log_path.display()
    )?;
    Ok(())
}

fn load_matching(ckpt: &Path, data: &Path) -> anyhow::Result<(FusionModel, Dataset)> {
    let model = load_checkpoint(ckpt)?;
    let ds = read_dataset(data)?;
    let c = model.config();
    if c.labels != ds.meta.labels
        || c.image.input_dim != ds.meta.image_dim
        || c.text.vocab_size < ds.meta.vocab_size
    {
        bail!(
            "{} does not match the dimensions of {}",
            ckpt.display(),
            data.display()
        );
    }
    Ok((model, ds))
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let s = settings(&a.common)?;
    let (model, ds) = load_matching(&a.checkpoint, &a.data)?;
    let mut opts = s.train.eval;
    opts.multiclass = model.config().objective == Objective::Multiclass;
    if let Some(t) = a.threshold {
        opts.threshold = t;
    }
    let report = evaluate(&model.predict(&ds.records, 256)?, &opts)?;
    let text = format_eval_report(&report);
    if let Some(path) = &a.out {
        write_file(path, &text)?;
    }
    write!(out, "{text}")?;
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut s = settings(&a.common)?;
    apply_model_flags(&mut s, &a.model);
    let (meta, parts): (DatasetMeta, Vec<Vec<Record>>) = match (&a.data, &a.train, &a.val) {
        (Some(data), _, _) => {
            let ds = read_dataset(data)?;
            let split = stratified_split(&ds.records, &s.split.fractions, s.split.seed)?;
            if split.parts.len() < 2 {
                bail!("split.fractions needs at least train and validation parts");
            }
            (ds.meta, split.parts)
        }
        (None, Some(t), Some(v)) => {
            let mut parts = vec![read_dataset(t)?, read_dataset(v)?];
            if let Some(test) = &a.test {
                parts.push(read_dataset(test)?);
            }
            if parts.iter().any(|p| p.meta != parts[0].meta) {
                bail!("train, validation and test files have different dimensions");
            }
            (
                parts[0].meta,
                parts.into_iter().map(|p| p.records).collect(),
            )
        }
        _ => bail!("sweep needs --data or both --train and --val"),
    };
    let grid = a.grid.clone().unwrap_or(s.sweep_grid.clone());
    let data = SweepData {
        train: &parts[0],
        val: &parts[1],
        test: parts.get(2).map(Vec::as_slice),
    };
    let table = lambda_sweep(
        &data,
        &grid,
        &s.model_config(&meta),
        s.model.seed,
        &s.train_config(),
        &s.schedule(data.train.len()),
    )?;
    let text = format_sweep_table(&table);
    if let Some(path) = &a.out {
        write_file(path, &text)?;
    }
    write!(out, "{text}")?;
    Ok(())
}

fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let s = settings(&a.common)?;
    let threshold = a.threshold.unwrap_or(s.train.eval.threshold);
    let mut text = String::new();
    if let Some(ckpt) = &a.checkpoint {
        let (model, ds) = load_matching(ckpt, &a.data)?;
        let preds = model.predict(&ds.records, 256)?;
        let Some(att) = preds.attention() else {
            bail!("{} has no modality-attention gate", ckpt.display());
        };
        let st = attention_stats(att, s.train.eval.collapse_cutoff)?;
        text += &format!(
            "attention n={} min={} q1={} median={} q3={} max={} mean={} collapse_fraction={} mean_kl={} mean_abs_dev={}\n",
            att.len(),
            fmt_f64(st.min),
            fmt_f64(st.q1),
            fmt_f64(st.median),
            fmt_f64(st.q3),
            fmt_f64(st.max),
            fmt_f64(st.mean),
            fmt_f64(st.collapse_fraction),
            fmt_f64(st.mean_kl),
            fmt_f64(st.mean_abs_dev),
        );
        text += &histogram_table(&attention_histogram(att, a.bins));
        text += "txt_informative\timg_informative\tn\tmedian_p_txt\tmean_p_txt\n";
        for (ti, ii) in [(true, true), (true, false), (false, true), (false, false)] {
            let mut group: Vec<f64> = ds
                .records
                .iter()
                .zip(att)
                .filter(|(r, _)| r.txt_informative == ti && r.img_informative == ii)
                .map(|(_, &p)| p)
                .collect();
            group.sort_by(f64::total_cmp);
            let (median, mean) = if group.is_empty() {
                ("-".to_string(), "-".to_string())
            } else {
                (
                    fmt_f64(quantile_sorted(&group, 0.5)),
                    fmt_f64(group.iter().sum::<f64>() / group.len() as f64),
                )
            };
            text += &format!(
                "{}\t{}\t{}\t{median}\t{mean}\n",
                ti as u8,
                ii as u8,
                group.len()
            );
        }
    }
    if let (Some(tp), Some(ip)) = (&a.text_model, &a.image_model) {
        let (tm, ds) = load_matching(tp, &a.data)?;
        let (im, _) = load_matching(ip, &a.data)?;
        let (criterion, label) = match a.criterion {
            Criterion::Exact => (WinCriterion::ExactMatch, "exact"),
            Criterion::PerLabel => (WinCriterion::PerLabel, "per-label"),
        };
        let wins = best_modality_counts(
            &tm.predict(&ds.records, 256)?,
            &im.predict(&ds.records, 256)?,
            threshold,
            criterion,
        )?;
        text += &wins_line(label, &wins);
        text.push('\n');
    }
    if let Some(path) = &a.out {
        write_file(path, &text)?;
    }
    write!(out, "{text}")?;
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, out),
        Command::Split(a) => cmd_split(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Report(a) => cmd_report(a, out),
    }
}

/// Parses `args`, runs the command and maps failures to exit codes:
/// 2 for usage errors, 1 for everything else.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let stdout = std::io::stdout();
    match run(&cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
