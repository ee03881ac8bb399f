//! Run configuration: flat `key = value` text with dotted sections.
//!
//! ```text
//! # comments start with '#'
//! train.epochs = 30
//! [model]
//! queries = 10          # same as model.queries
//! attention = deformable
//! ```
//!
//! Relative paths are resolved against the directory of the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tadtr_core::eval::parse_threshold_grid;
use tadtr_core::matching::LossWeights;
use tadtr_core::model::{AttentionKind, EncoderKind, ModelConfig, SAMPLING_LR_MULT};
use tadtr_core::optim::AdamWConfig;
use tadtr_core::Scalar;

use crate::error::{io_error, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub adamw: AdamWConfig,
    /// Epochs trained at the initial learning rate; later epochs use 0.1×.
    pub decay_epoch: usize,
    pub sampling_lr_mult: Scalar,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            adamw: AdamWConfig::default(),
            decay_epoch: usize::MAX,
            sampling_lr_mult: SAMPLING_LR_MULT,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataConfig {
    pub features_dir: Option<PathBuf>,
    pub train_annotations: Option<PathBuf>,
    pub val_annotations: Option<PathBuf>,
    /// Every sequence is resized to this many frames.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the validation split every this many epochs; 0 disables.
    pub eval_every: usize,
    pub thresholds: Vec<Scalar>,
    pub top_k: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            data: DataConfig {
                length: 100,
                ..Default::default()
            },
            epochs: 30,
            batch_size: 16,
            seed: 0,
            eval_every: 0,
            thresholds: parse_threshold_grid("[0.5:0.95:0.05]").expect("static grid"),
            top_k: None,
            checkpoint: None,
            report: None,
            log: None,
        }
    }
}

/// Splits text into `(dotted key, value, line number)` triples.
pub fn parse_pairs(text: &str) -> std::result::Result<Vec<(String, String, usize)>, String> {
    let mut section = String::new();
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_owned();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {line_no}: expected `key = value`, got `{line}`"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(format!("line {line_no}: empty key"));
        }
        let full = if section.is_empty() {
            key.to_owned()
        } else {
            format!("{section}.{key}")
        };
        pairs.push((full, value.trim().to_owned(), line_no));
    }
    Ok(pairs)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("`{key}`: cannot parse `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("`{key}`: expected a boolean, got `{value}`")),
    }
}

pub fn parse_attention(value: &str) -> std::result::Result<AttentionKind, String> {
    match value {
        "deformable" => Ok(AttentionKind::Deformable),
        "dense" => Ok(AttentionKind::Dense),
        _ => Err(format!("attention must be `deformable` or `dense`, got `{value}`")),
    }
}

fn attention_name(kind: AttentionKind) -> &'static str {
    match kind {
        AttentionKind::Deformable => "deformable",
        AttentionKind::Dense => "dense",
    }
}

fn encoder_name(kind: EncoderKind) -> &'static str {
    match kind {
        EncoderKind::Transformer => "transformer",
        EncoderKind::Cnn1d => "cnn1d",
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base, &path.display().to_string())
    }

    /// Parses `text`, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path, origin: &str) -> Result<Self> {
        let fail = |reason: String| Error::Config {
            origin: origin.to_owned(),
            reason,
        };
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (key, value, line) in parse_pairs(text).map_err(&fail)? {
            if let Some(first) = seen.insert(key.clone(), line) {
                return Err(fail(format!("line {line}: `{key}` already set on line {first}")));
            }
            cfg.set(&key, &value, base)
                .map_err(|r| fail(format!("line {line}: {r}")))?;
        }
        cfg.validate().map_err(fail)?;
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> std::result::Result<(), String> {
        let path = || Some(base.join(value));
        let m = &mut self.model;
        match key {
            "model.input_dim" => m.input_dim = parse_value(key, value)?,
            "model.hidden_dim" => m.hidden_dim = parse_value(key, value)?,
            "model.ffn_dim" => m.ffn_dim = parse_value(key, value)?,
            "model.encoder_layers" => m.encoder_layers = parse_value(key, value)?,
            "model.decoder_layers" => m.decoder_layers = parse_value(key, value)?,
            "model.heads" => m.heads = parse_value(key, value)?,
            "model.points" => m.points = parse_value(key, value)?,
            "model.queries" => m.queries = parse_value(key, value)?,
            "model.num_classes" => m.num_classes = parse_value(key, value)?,
            "model.roi_expand" => m.roi_expand = parse_value(key, value)?,
            "model.roi_bins" => m.roi_bins = parse_value(key, value)?,
            "model.roi_samples" => m.roi_samples = parse_value(key, value)?,
            "model.refine_segments" => m.refine_segments = parse_bool(key, value)?,
            "model.actionness" => m.actionness = parse_bool(key, value)?,
            "model.attention" => m.attention = parse_attention(value)?,
            "model.encoder" => {
                m.encoder = match value {
                    "transformer" => EncoderKind::Transformer,
                    "cnn1d" => EncoderKind::Cnn1d,
                    _ => return Err(format!("`{key}` must be `transformer` or `cnn1d`, got `{value}`")),
                }
            }
            "model.dropout" => m.dropout = parse_value(key, value)?,
            "optim.lr" => self.optim.adamw.lr = parse_value(key, value)?,
            "optim.beta1" => self.optim.adamw.beta1 = parse_value(key, value)?,
            "optim.beta2" => self.optim.adamw.beta2 = parse_value(key, value)?,
            "optim.eps" => self.optim.adamw.eps = parse_value(key, value)?,
            "optim.weight_decay" => self.optim.adamw.weight_decay = parse_value(key, value)?,
            "optim.decay_epoch" => self.optim.decay_epoch = parse_value(key, value)?,
            "optim.sampling_lr_mult" => self.optim.sampling_lr_mult = parse_value(key, value)?,
            "loss.iou" => self.loss.iou = parse_value(key, value)?,
            "loss.coord" => self.loss.coord = parse_value(key, value)?,
            "loss.actionness" => self.loss.actionness = parse_value(key, value)?,
            "loss.no_object" => self.loss.no_object = parse_value(key, value)?,
            "data.features_dir" => self.data.features_dir = path(),
            "data.train_annotations" => self.data.train_annotations = path(),
            "data.val_annotations" => self.data.val_annotations = path(),
            "data.length" => self.data.length = parse_value(key, value)?,
            "train.epochs" => self.epochs = parse_value(key, value)?,
            "train.batch_size" => self.batch_size = parse_value(key, value)?,
            "train.seed" => self.seed = parse_value(key, value)?,
            "train.eval_every" => self.eval_every = parse_value(key, value)?,
            "eval.thresholds" => self.thresholds = parse_threshold_grid(value).map_err(|e| e.to_string())?,
            "eval.top_k" => self.top_k = Some(parse_value(key, value)?),
            "paths.checkpoint" => self.checkpoint = path(),
            "paths.report" => self.report = path(),
            "paths.log" => self.log = path(),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        if self.epochs == 0 {
            return Err("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("train.batch_size must be at least 1".into());
        }
        if self.data.length < 2 {
            return Err("data.length must be at least 2".into());
        }
        if !(self.optim.adamw.lr > 0.0 && self.optim.adamw.lr.is_finite()) {
            return Err("optim.lr must be positive".into());
        }
        tadtr_core::eval::EvalConfig {
            thresholds: self.thresholds.clone(),
            top_k: self.top_k,
        }
        .validate()
        .map_err(|e| e.to_string())
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> Scalar {
        if epoch > self.optim.decay_epoch {
            self.optim.adamw.lr * 0.1
        } else {
            self.optim.adamw.lr
        }
    }

    /// Serializes the model section, enough to rebuild the network.
    pub fn model_text(&self) -> String {
        let m = &self.model;
        let mut out = String::from("[model]\n");
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("input_dim", m.input_dim.to_string());
        line("hidden_dim", m.hidden_dim.to_string());
        line("ffn_dim", m.ffn_dim.to_string());
        line("encoder_layers", m.encoder_layers.to_string());
        line("decoder_layers", m.decoder_layers.to_string());
        line("heads", m.heads.to_string());
        line("points", m.points.to_string());
        line("queries", m.queries.to_string());
        line("num_classes", m.num_classes.to_string());
        line("roi_expand", m.roi_expand.to_string());
        line("roi_bins", m.roi_bins.to_string());
        line("roi_samples", m.roi_samples.to_string());
        line("refine_segments", m.refine_segments.to_string());
        line("actionness", m.actionness.to_string());
        line("attention", attention_name(m.attention).to_string());
        line("encoder", encoder_name(m.encoder).to_string());
        line("dropout", m.dropout.to_string());
        let _ = writeln!(out, "[data]\nlength = {}", self.data.length);
        out
    }
}
