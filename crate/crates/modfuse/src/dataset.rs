//! Line-delimited dataset files.
//!
//! ```text
//! #modfuse-dataset v1 labels=<L> image_dim=<D> vocab_size=<V>
//! <id>\t<tokens>\t<labels>\t<txt_informative>\t<img_informative>\t<image_features>
//! ```
//!
//! One record per line, every line (including the last) ends in `\n`.
//! `tokens` and `image_features` are space separated; `labels` is a string of
//! `L` characters `0`/`1`; the two informativeness flags are `0`/`1`. Floats
//! are written in their shortest round-trip form, so `read(write(x)) == x`
//! bit for bit. Generated features carry 9 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use modfuse_core::{GenConfig, Record};

use crate::config::fmt_f64;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &str = "#modfuse-dataset";
pub const DATASET_VERSION: &str = "v1";

const FIELDS: [&str; 6] = [
    "id",
    "tokens",
    "labels",
    "txt_informative",
    "img_informative",
    "image_features",
];

/// Dimensions every record of a dataset shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetMeta {
    pub labels: usize,
    pub image_dim: usize,
    pub vocab_size: usize,
}

impl DatasetMeta {
    pub fn from_gen(cfg: &GenConfig) -> Self {
        DatasetMeta {
            labels: cfg.labels,
            image_dim: cfg.image_dim,
            vocab_size: cfg.vocab_size,
        }
    }

    fn header(&self) -> String {
        format!(
            "{DATASET_MAGIC} {DATASET_VERSION} labels={} image_dim={} vocab_size={}",
            self.labels, self.image_dim, self.vocab_size
        )
    }

    fn parse_header(line: &str, origin: &str) -> Result<Self> {
        let bad = |m: String| Error::parse(origin, 1, "header", m);
        let mut parts = line.split(' ');
        if parts.next() != Some(DATASET_MAGIC) {
            return Err(bad(format!("expected `{DATASET_MAGIC}`")));
        }
        match parts.next() {
            Some(DATASET_VERSION) => {}
            other => return Err(bad(format!("unsupported version {other:?}"))),
        }
        let mut values = [None; 3];
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("`{part}` is not key=value")))?;
            let slot = match k {
                "labels" => 0,
                "image_dim" => 1,
                "vocab_size" => 2,
                _ => return Err(bad(format!("unknown key `{k}`"))),
            };
            values[slot] = Some(v.parse::<usize>().map_err(|e| bad(format!("{k}: {e}")))?);
        }
        match values {
            [Some(labels), Some(image_dim), Some(vocab_size)] => Ok(DatasetMeta {
                labels,
                image_dim,
                vocab_size,
            }),
            _ => Err(bad("needs labels, image_dim and vocab_size".to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<Record>,
}

/// Checks one record against `meta`; the error names the offending field.
fn check_record(r: &Record, meta: &DatasetMeta) -> std::result::Result<(), (&'static str, String)> {
    if r.id.is_empty() || r.id.contains(['\t', '\n', '\r']) {
        return Err((
            "id",
            format!("{:?} is empty or contains a tab or newline", r.id),
        ));
    }
    if r.tokens.is_empty() {
        return Err(("tokens", "empty token sequence".to_string()));
    }
    if let Some(t) = r.tokens.iter().find(|&&t| t as usize >= meta.vocab_size) {
        return Err((
            "tokens",
            format!("token {t} outside vocabulary of {}", meta.vocab_size),
        ));
    }
    if r.labels.len() != meta.labels {
        return Err((
            "labels",
            format!("{} labels, expected {}", r.labels.len(), meta.labels),
        ));
    }
    if r.image_features.len() != meta.image_dim {
        return Err((
            "image_features",
            format!(
                "{} values, expected {}",
                r.image_features.len(),
                meta.image_dim
            ),
        ));
    }
    if r.image_features.iter().any(|x| !x.is_finite()) {
        return Err(("image_features", "non-finite value".to_string()));
    }
    Ok(())
}

/// Renders a dataset file. Fails if a record does not fit `meta`.
pub fn format_dataset(meta: &DatasetMeta, records: &[Record]) -> Result<String> {
    let mut out = String::with_capacity(64 + records.len() * (meta.image_dim * 12 + 64));
    out.push_str(&meta.header());
    out.push('\n');
    for (i, r) in records.iter().enumerate() {
        check_record(r, meta).map_err(|(field, m)| Error::parse("<records>", i + 1, field, m))?;
        out.push_str(&r.id);
        out.push('\t');
        for (k, t) in r.tokens.iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{t}");
        }
        out.push('\t');
        out.extend(r.labels.iter().map(|&b| if b { '1' } else { '0' }));
        out.push('\t');
        out.push(if r.txt_informative { '1' } else { '0' });
        out.push('\t');
        out.push(if r.img_informative { '1' } else { '0' });
        out.push('\t');
        for (k, x) in r.image_features.iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            out.push_str(&fmt_f64(*x));
        }
        out.push('\n');
    }
    Ok(out)
}

fn parse_flag(s: &str) -> std::result::Result<bool, String> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("expected 0 or 1, got `{s}`")),
    }
}

fn parse_record(
    line: &str,
    meta: &DatasetMeta,
) -> std::result::Result<Record, (&'static str, String)> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != FIELDS.len() {
        let field = FIELDS
            .get(fields.len())
            .copied()
            .unwrap_or("image_features");
        return Err((
            field,
            format!(
                "{} tab-separated fields, expected {}",
                fields.len(),
                FIELDS.len()
            ),
        ));
    }
    let tokens = fields[1]
        .split(' ')
        .map(|t| {
            t.parse::<u32>()
                .map_err(|e| ("tokens", format!("`{t}`: {e}")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let labels = fields[2]
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(("labels", format!("unexpected character {c:?}"))),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let txt_informative = parse_flag(fields[3]).map_err(|m| ("txt_informative", m))?;
    let img_informative = parse_flag(fields[4]).map_err(|m| ("img_informative", m))?;
    let image_features = fields[5]
        .split(' ')
        .map(|x| {
            x.parse::<f64>()
                .map_err(|e| ("image_features", format!("`{x}`: {e}")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let r = Record {
        id: fields[0].to_string(),
        tokens,
        image_features,
        labels,
        txt_informative,
        img_informative,
    };
    check_record(&r, meta)?;
    Ok(r)
}

/// Parses a dataset file. Errors carry the 1-based line number and the field.
pub fn parse_dataset(text: &str, origin: &str) -> Result<Dataset> {
    let mut lines = text.split_inclusive('\n').enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::parse(origin, 1, "header", "empty file"));
    };
    let meta = DatasetMeta::parse_header(header.trim_end_matches('\n'), origin)?;
    let mut records = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let Some(line) = raw.strip_suffix('\n') else {
            return Err(Error::parse(
                origin,
                line_no,
                "line",
                "truncated line (no trailing newline)",
            ));
        };
        let r = parse_record(line, &meta)
            .map_err(|(field, m)| Error::parse(origin, line_no, field, m))?;
        records.push(r);
    }
    Ok(Dataset { meta, records })
}

pub fn write_dataset(path: &Path, meta: &DatasetMeta, records: &[Record]) -> Result<()> {
    let text = format_dataset(meta, records).map_err(|e| e.at(path))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}
