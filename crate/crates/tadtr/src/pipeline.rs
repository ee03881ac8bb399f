//! Training, evaluation, inference and analysis over whole datasets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tadtr_core::data::{resize_features, to_seconds};
use tadtr_core::eval::{evaluate_map, rank_detections, EvalConfig, EvalReport, VideoAnnotation, VideoDetections};
use tadtr_core::flops::{estimate_flops, FlopCount};
use tadtr_core::matching::LossBreakdown;
use tadtr_core::model::{ModelConfig, TadTr};
use tadtr_core::optim::AdamW;
use tadtr_core::training::train_step;
use tadtr_core::{Scalar, Tensor};

use crate::config::RunConfig;
use crate::dataset::{feature_files, Dataset};
use crate::error::{Error, Result};
use crate::format::{apply_checkpoint, load_checkpoint, load_features, round_params_to_storage};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: Scalar,
    /// Batch means averaged over the epoch.
    pub loss: LossBreakdown,
    pub seconds: f64,
    pub eval: Option<EvalReport>,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let l = &self.loss;
        let mut line = format!(
            "epoch={} loss={:.6} cls={:.6} l1={:.6} iou={:.6} act={:.6} lr={:e} time={:.1}s",
            self.epoch, l.total, l.classification, l.segment_l1, l.segment_iou, l.actionness, self.lr, self.seconds
        );
        if let Some(r) = &self.eval {
            let _ = write!(line, " map_avg={:.6}", r.average_map);
        }
        line
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<Scalar> {
        self.epochs.iter().map(|e| e.loss.total).collect()
    }
}

pub struct TrainOutcome {
    /// Final weights, rounded to checkpoint precision.
    pub model: TadTr,
    pub log: TrainLog,
    /// Validation report of the final weights, when a validation split exists.
    pub snapshot: Option<EvalReport>,
}

impl RunConfig {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            thresholds: self.thresholds.clone(),
            top_k: self.top_k,
        }
    }
}

fn check_compatible(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let mismatch = |reason: String| {
        Err(Error::Config {
            origin: "dataset".into(),
            reason,
        })
    };
    if data.classes.len() != model.num_classes {
        return mismatch(format!(
            "{} annotated classes but model.num_classes = {}",
            data.classes.len(),
            model.num_classes
        ));
    }
    if let Some(v) = data.videos.iter().find(|v| v.features.cols() != model.input_dim) {
        return mismatch(format!(
            "video {} has {} channels but model.input_dim = {}",
            v.video_id,
            v.features.cols(),
            model.input_dim
        ));
    }
    if let Some(v) = data.videos.iter().find(|v| v.actions.len() > model.queries) {
        return mismatch(format!(
            "video {} has {} actions but only {} queries",
            v.video_id,
            v.actions.len(),
            model.queries
        ));
    }
    Ok(())
}

/// Builds a model whose sampling projections use the configured multiplier.
pub fn build_model(cfg: &RunConfig) -> Result<TadTr> {
    let mut model = TadTr::new(cfg.model.clone(), cfg.seed)?;
    for entry in model.params.iter_mut() {
        if entry.name.contains(".offsets.") || entry.name.contains(".logits.") {
            entry.lr_mult = cfg.optim.sampling_lr_mult;
        }
    }
    Ok(model)
}

/// Mini-batch AdamW over `train`, with the learning rate cut tenfold after
/// `optim.decay_epoch`. `on_epoch` sees every record as it is produced.
pub fn train_model(
    cfg: &RunConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    check_compatible(&cfg.model, train)?;
    if let Some(val) = val {
        check_compatible(&cfg.model, val)?;
    }
    if train.videos.is_empty() {
        return Err(Error::Config {
            origin: "dataset".into(),
            reason: "training split is empty".into(),
        });
    }
    let mut model = build_model(cfg)?;
    let mut optimizer = AdamW::new(cfg.optim.adamw, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.videos.len()).collect();
    let mut log = TrainLog::default();
    let eval_cfg = cfg.eval_config();
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        optimizer.set_lr(lr);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let batches = order.chunks(cfg.batch_size).len();
        for (batch_id, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<_> = chunk.iter().map(|&i| &train.videos[i]).collect();
            let loss = match train_step(&mut model, &mut optimizer, &batch, &cfg.loss) {
                Ok(l) if l.total.is_finite() => l,
                Ok(_)
                | Err(tadtr_core::Error::NonFinite(_))
                | Err(tadtr_core::Error::Tensor(tadtr_core::TensorError::NonFinite(_))) => {
                    return Err(Error::NonFiniteLoss { epoch, batch: batch_id })
                }
                Err(e) => return Err(e.into()),
            };
            sum.total += loss.total;
            sum.classification += loss.classification;
            sum.segment_l1 += loss.segment_l1;
            sum.segment_iou += loss.segment_iou;
            sum.actionness += loss.actionness;
        }
        let n = batches as Scalar;
        let mean = LossBreakdown {
            total: sum.total / n,
            classification: sum.classification / n,
            segment_l1: sum.segment_l1 / n,
            segment_iou: sum.segment_iou / n,
            actionness: sum.actionness / n,
            layers: Vec::new(),
        };
        let eval = match val {
            Some(val) if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 => {
                Some(evaluate_model(&model, val, &eval_cfg)?)
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss: mean,
            seconds: start.elapsed().as_secs_f64(),
            eval,
        };
        on_epoch(&record);
        log.epochs.push(record);
    }

    round_params_to_storage(&mut model.params);
    let snapshot = val.map(|v| evaluate_model(&model, v, &eval_cfg)).transpose()?;
    Ok(TrainOutcome { model, log, snapshot })
}

/// Runs the model over every video and scores the detections.
pub fn evaluate_model(model: &TadTr, data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(data.videos.len());
    for v in &data.videos {
        let p = model.predict(&v.features)?;
        predictions.push(VideoDetections::from_set(v.video_id.clone(), &p.detections, cfg.top_k));
    }
    let annotations: Vec<VideoAnnotation> = data.videos.iter().map(Into::into).collect();
    Ok(evaluate_map(&predictions, &annotations, model.config.num_classes, cfg)?)
}

/// Sidecar file holding the model section next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".cfg");
    PathBuf::from(name)
}

/// Rebuilds a model from `cfg` and fills it with checkpoint weights.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<TadTr> {
    let mut model = build_model(cfg)?;
    apply_checkpoint(&mut model.params, load_checkpoint(checkpoint)?)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferRow {
    pub label: usize,
    pub start_sec: Scalar,
    pub end_sec: Scalar,
    pub score: Scalar,
}

/// All `N_q` last-layer detections of one sequence, best first.
///
/// `duration_sec` defaults to one second per input frame.
pub fn infer(model: &TadTr, raw: &Tensor, length: usize, duration_sec: Option<Scalar>) -> Result<Vec<InferRow>> {
    let duration = duration_sec.unwrap_or(raw.rows() as Scalar);
    let features = resize_features(raw, length)?;
    let prediction = model.predict(&features)?;
    Ok(rank_detections(&prediction.detections, None)
        .iter()
        .map(|d| {
            let (s, e) = d.segment.clipped();
            let (start_sec, end_sec) = to_seconds(&tadtr_core::Segment::from_interval(s, e), duration);
            InferRow {
                label: d.label,
                start_sec,
                end_sec,
                score: d.score,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRow {
    pub query: usize,
    pub video: String,
    pub center: Scalar,
    pub length: Scalar,
}

/// One row per (video, query), grouped by query index.
pub fn query_distribution(model: &TadTr, features_dir: &Path, length: usize) -> Result<Vec<QueryRow>> {
    let mut rows = Vec::new();
    for path in feature_files(features_dir)? {
        let video = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let features = resize_features(&load_features(&path)?, length)?;
        for d in model.predict(&features)?.detections.detections {
            rows.push(QueryRow {
                query: d.query,
                video: video.clone(),
                center: d.segment.center,
                length: d.segment.length,
            });
        }
    }
    rows.sort_by_key(|r| r.query);
    Ok(rows)
}

pub fn flops_report(cfg: &ModelConfig, length: usize) -> (FlopCount, String) {
    let f = estimate_flops(cfg, length);
    let mut text = String::from(
        "# multiply-adds of linear maps, attention products, sampling and FFNs; activations and norms excluded\n",
    );
    let _ = writeln!(text, "length={length}");
    let _ = writeln!(text, "input_projection={}", f.input_projection);
    let _ = writeln!(text, "encoder={}", f.encoder);
    let _ = writeln!(text, "decoder={}", f.decoder);
    let _ = writeln!(text, "heads={}", f.heads);
    let _ = writeln!(text, "actionness={}", f.actionness);
    let _ = writeln!(text, "flops={}", f.total());
    (f, text)
}
