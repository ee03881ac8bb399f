//! Ranking and mean average precision over temporal IoU thresholds.
//!
//! Detections are used exactly as the model emits them: one per query,
//! ranked by score, with no suppression step. Duplicates of an already
//! matched ground truth simply count as false positives.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::AnnotatedVideo;
use crate::error::{Error, Result};
use crate::matching::GroundTruthAction;
use crate::model::{Detection, DetectionSet};
use crate::segment::{interval_iou, Segment};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Strictly increasing, each in `(0, 1)`.
    pub thresholds: Vec<Scalar>,
    /// Detections kept per video; `None` keeps all of them.
    pub top_k: Option<usize>,
}

impl EvalConfig {
    pub fn new(thresholds: Vec<Scalar>) -> Result<Self> {
        let cfg = Self {
            thresholds,
            top_k: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The `[0.5:0.95:0.05]` grid behind the average mAP.
    pub fn average_grid() -> Self {
        Self::new(parse_threshold_grid("[0.5:0.95:0.05]").expect("static grid")).expect("static grid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Eval("threshold list is empty".into()));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Eval(format!("threshold {t} outside (0, 1)")));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Eval("thresholds must be strictly increasing".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::Eval("top_k must be positive".into()));
        }
        Ok(())
    }
}

/// Parses `[a:b:s]` into `a, a+s, …, b`, both ends included.
///
/// Values are rounded to 1e-9 so that `0.3` prints as `0.3`.
pub fn parse_threshold_grid(text: &str) -> Result<Vec<Scalar>> {
    let bad = || Error::Eval(format!("threshold grid `{text}` is not of the form [a:b:s]"));
    let inner = text
        .trim()
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(bad)?;
    let parts: Vec<Scalar> = inner
        .split(':')
        .map(|p| p.trim().parse::<Scalar>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [a, b, s] = parts[..] else {
        return Err(bad());
    };
    if !(s > 0.0 && a <= b && a.is_finite() && b.is_finite()) {
        return Err(Error::Eval(format!("threshold grid `{text}` needs a <= b and s > 0")));
    }
    let steps = (b - a) / s;
    let n = libm::round(steps);
    if libm::fabs(steps - n) > 1e-6 {
        return Err(Error::Eval(format!("step {s} does not divide [{a}, {b}]")));
    }
    Ok((0..=n as usize)
        .map(|i| libm::round((a + i as Scalar * s) * 1e9) / 1e9)
        .collect())
}

/// Sorts by descending score, ties in query order, and keeps the first `top_k`.
pub fn rank_detections(set: &DetectionSet, top_k: Option<usize>) -> Vec<Detection> {
    let mut ranked = set.detections.clone();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    if let Some(k) = top_k {
        ranked.truncate(k);
    }
    ranked
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredDetection {
    pub label: usize,
    pub segment: Segment,
    pub score: Scalar,
}

impl From<&Detection> for ScoredDetection {
    fn from(d: &Detection) -> Self {
        Self {
            label: d.label,
            segment: d.segment,
            score: d.score,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoDetections {
    pub video_id: String,
    pub detections: Vec<ScoredDetection>,
}

impl VideoDetections {
    pub fn from_set(video_id: impl Into<String>, set: &DetectionSet, top_k: Option<usize>) -> Self {
        Self {
            video_id: video_id.into(),
            detections: rank_detections(set, top_k).iter().map(ScoredDetection::from).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub actions: Vec<GroundTruthAction>,
}

impl From<&AnnotatedVideo> for VideoAnnotation {
    fn from(v: &AnnotatedVideo) -> Self {
        Self {
            video_id: v.video_id.clone(),
            actions: v.actions.clone(),
        }
    }
}

/// Temporal IoU on the parts of both segments inside `[0, 1]`.
pub fn tiou(a: &Segment, b: &Segment) -> Scalar {
    interval_iou(a.clipped(), b.clipped())
}

/// AP of one class. `detections` holds `(video index, segment, score)`;
/// `truth[v]` lists that class's ground-truth segments in video `v`.
///
/// Returns `None` when the class has no ground truth at all.
pub fn average_precision(
    detections: &[(usize, Segment, Scalar)],
    truth: &[Vec<Segment>],
    threshold: Scalar,
) -> Option<Scalar> {
    let positives: usize = truth.iter().map(Vec::len).sum();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].2.total_cmp(&detections[a].2));

    let mut taken: Vec<Vec<bool>> = truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(order.len());
    for &i in &order {
        let (video, segment, _) = detections[i];
        let mut best: Option<(usize, Scalar)> = None;
        for (j, gt) in truth[video].iter().enumerate() {
            if taken[video][j] {
                continue;
            }
            let iou = tiou(&segment, gt);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[video][j] = true;
        }
        hits.push(best.is_some());
    }
    Some(envelope_ap(&hits, positives))
}

/// Area under the precision-recall curve with the precision envelope.
fn envelope_ap(hits: &[bool], positives: usize) -> Scalar {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (rank, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as Scalar / (rank + 1) as Scalar);
        recall.push(tp as Scalar / positives as Scalar);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<Scalar>,
    /// `per_class[t][c]`; `None` for classes without ground truth.
    pub per_class: Vec<Vec<Option<Scalar>>>,
    pub map: Vec<Scalar>,
    pub average_map: Scalar,
    pub num_detections: usize,
    pub num_ground_truth: usize,
}

impl EvalReport {
    pub fn map_at(&self, threshold: Scalar) -> Option<Scalar> {
        self.thresholds
            .iter()
            .position(|t| libm::fabs(t - threshold) < 1e-9)
            .map(|i| self.map[i])
    }
}

pub fn evaluate_map(
    predictions: &[VideoDetections],
    annotations: &[VideoAnnotation],
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let index_of = |id: &str| annotations.iter().position(|a| a.video_id == id);

    // truth[c][v]: segments of class c in video v.
    let mut truth = vec![vec![Vec::new(); annotations.len()]; num_classes];
    for (v, ann) in annotations.iter().enumerate() {
        for a in &ann.actions {
            let slot = truth.get_mut(a.label).ok_or_else(|| {
                Error::Eval(format!(
                    "video {} has label {} beyond {num_classes} classes",
                    ann.video_id, a.label
                ))
            })?;
            slot[v].push(a.segment);
        }
    }
    let mut by_class: Vec<Vec<(usize, Segment, Scalar)>> = vec![Vec::new(); num_classes];
    let mut num_detections = 0;
    for pred in predictions {
        let v = index_of(&pred.video_id)
            .ok_or_else(|| Error::Eval(format!("prediction for unknown video `{}`", pred.video_id)))?;
        let kept = cfg.top_k.unwrap_or(usize::MAX).min(pred.detections.len());
        for d in &pred.detections[..kept] {
            let list = by_class
                .get_mut(d.label)
                .ok_or_else(|| Error::Eval(format!("detection label {} beyond {num_classes} classes", d.label)))?;
            list.push((v, d.segment, d.score));
        }
        num_detections += kept;
    }

    let mut per_class = Vec::with_capacity(cfg.thresholds.len());
    let mut map = Vec::with_capacity(cfg.thresholds.len());
    for &theta in &cfg.thresholds {
        let aps: Vec<Option<Scalar>> = (0..num_classes)
            .map(|c| average_precision(&by_class[c], &truth[c], theta))
            .collect();
        let present: Vec<Scalar> = aps.iter().flatten().copied().collect();
        map.push(if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<Scalar>() / present.len() as Scalar
        });
        per_class.push(aps);
    }
    let average_map = map.iter().sum::<Scalar>() / map.len() as Scalar;
    Ok(EvalReport {
        thresholds: cfg.thresholds.clone(),
        per_class,
        map,
        average_map,
        num_detections,
        num_ground_truth: annotations.iter().map(|a| a.actions.len()).sum(),
    })
}

impl fmt::Display for EvalReport {
    /// Human-readable table followed by one `map@<θ>=<v>` line per threshold
    /// and a final `map_avg=<v>` line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "detections={} ground_truth={}",
            self.num_detections, self.num_ground_truth
        )?;
        write!(f, "{:>8}", "class")?;
        for t in &self.thresholds {
            write!(f, " {:>8}", format!("@{t}"))?;
        }
        writeln!(f)?;
        let classes = self.per_class.first().map_or(0, Vec::len);
        for c in 0..classes {
            write!(f, "{c:>8}")?;
            for row in &self.per_class {
                match row[c] {
                    Some(ap) => write!(f, " {ap:>8.4}")?,
                    None => write!(f, " {:>8}", "-")?,
                }
            }
            writeln!(f)?;
        }
        for (t, m) in self.thresholds.iter().zip(&self.map) {
            writeln!(f, "map@{t}={m:.6}")?;
        }
        writeln!(f, "map_avg={:.6}", self.average_map)
    }
}
