//! Ground-truth assignment and the training objective.

mod hungarian;

use alloc::vec;
use alloc::vec::Vec;

pub use hungarian::{hungarian_assign, Assignment};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::{softmax_row, Ctx, ForwardVars};
use crate::segment::{iou_loss, segment_iou, segment_l1, Segment};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthAction {
    /// Real class index; never the background slot.
    pub label: usize,
    pub segment: Segment,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub iou: Scalar,
    pub coord: Scalar,
    pub actionness: Scalar,
    /// Weight of the background log-loss of unmatched predictions.
    pub no_object: Scalar,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            iou: 2.0,
            coord: 5.0,
            actionness: 5.0,
            no_object: 1.0,
        }
    }
}

/// `cost[j, i] = -p_i(c_j) + w_iou * iou_loss(s_j, ŝ_i) + w_coord * l1(s_j, ŝ_i)`.
///
/// `probs` is `[N_q, classes + 1]`.
pub fn matching_cost(
    gts: &[GroundTruthAction],
    probs: &Tensor,
    segments: &[Segment],
    weights: &LossWeights,
) -> Result<Tensor> {
    let n = segments.len();
    if n == 0 {
        return Err(Error::Assignment("prediction set is empty".into()));
    }
    if probs.rank() != 2 || probs.rows() != n {
        return Err(Error::Assignment(alloc::format!(
            "{} segments but class probabilities of shape {:?}",
            n,
            probs.shape()
        )));
    }
    let classes = probs.cols();
    let mut data = Vec::with_capacity(gts.len() * n);
    for gt in gts {
        if gt.label + 1 >= classes {
            return Err(Error::Assignment(alloc::format!(
                "label {} outside {} real classes",
                gt.label,
                classes - 1
            )));
        }
        for (i, pred) in segments.iter().enumerate() {
            let p = probs.data()[i * classes + gt.label];
            data.push(-p + weights.iou * iou_loss(&gt.segment, pred) + weights.coord * segment_l1(&gt.segment, pred));
        }
    }
    Ok(Tensor::new(&[gts.len(), n], data)?)
}

/// Largest IoU of each predicted segment with any ground truth; 0 without ground truth.
pub fn actionness_targets(predictions: &[Segment], gts: &[GroundTruthAction]) -> Vec<Scalar> {
    predictions
        .iter()
        .map(|p| gts.iter().map(|g| segment_iou(p, &g.segment)).fold(0.0, Scalar::max))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerLoss {
    pub classification: Scalar,
    pub segment_l1: Scalar,
    /// Sum of `1 + iou_loss` over matched pairs.
    pub segment_iou: Scalar,
    pub total: Scalar,
    pub assignment: Assignment,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Layer means of the per-layer terms.
    pub classification: Scalar,
    pub segment_l1: Scalar,
    pub segment_iou: Scalar,
    /// Unweighted `Σ|ĝ - g|` over last-layer predictions.
    pub actionness: Scalar,
    pub total: Scalar,
    pub layers: Vec<LayerLoss>,
}

impl LossBreakdown {
    /// Recombines the components with the given weights.
    pub fn weighted_total(&self, w: &LossWeights) -> Scalar {
        self.classification + w.coord * self.segment_l1 + w.iou * self.segment_iou + w.actionness * self.actionness
    }
}

/// Records the loss of one video into `ctx` and returns its graph handle.
///
/// Every decoder layer is matched and supervised independently; the layer
/// losses are averaged and the actionness term on the last layer is added.
/// Matching works on detached values.
pub fn total_loss(
    ctx: &mut Ctx<'_>,
    vars: &ForwardVars,
    gts: &[GroundTruthAction],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let layers = vars.layers.len();
    if layers == 0 {
        return Err(Error::Config("model has no decoder layers".into()));
    }
    let mut breakdown = LossBreakdown::default();
    let mut layer_totals = Vec::with_capacity(layers);
    for lv in &vars.layers {
        let (var, layer) = layer_loss(ctx, lv.logits, lv.segments, gts, weights)?;
        breakdown.classification += layer.classification / layers as Scalar;
        breakdown.segment_l1 += layer.segment_l1 / layers as Scalar;
        breakdown.segment_iou += layer.segment_iou / layers as Scalar;
        layer_totals.push(var);
        breakdown.layers.push(layer);
    }
    let scalars = reshape_scalars(ctx, &layer_totals)?;
    let stacked = ctx.graph.concat(&scalars, 0)?;
    let mut total = ctx.graph.mean(stacked);

    if let (Some(act), Some(last)) = (vars.actionness, vars.layers.last()) {
        let segments = crate::model::segments_of(ctx.graph.value(last.segments));
        let targets = actionness_targets(&segments, gts);
        let target = ctx.graph.constant(Tensor::from_vec(targets));
        let diff = ctx.graph.sub(act, target)?;
        let abs = ctx.graph.abs(diff);
        let act_sum = ctx.graph.sum(abs);
        breakdown.actionness = ctx.graph.value(act_sum).item()?;
        let weighted = ctx.graph.scale(act_sum, weights.actionness);
        total = ctx.graph.add(total, weighted)?;
    }
    breakdown.total = ctx.graph.value(total).item()?;
    Ok((total, breakdown))
}

fn reshape_scalars(ctx: &mut Ctx<'_>, vars: &[Var]) -> Result<Vec<Var>> {
    vars.iter()
        .map(|&v| ctx.graph.reshape(v, &[1]).map_err(Error::from))
        .collect()
}

fn layer_loss(
    ctx: &mut Ctx<'_>,
    logits: Var,
    segments: Var,
    gts: &[GroundTruthAction],
    weights: &LossWeights,
) -> Result<(Var, LayerLoss)> {
    let logit_values = ctx.graph.value(logits);
    let (n, classes) = (logit_values.rows(), logit_values.cols());
    let background = classes - 1;
    let mut probs = Vec::with_capacity(n * classes);
    for q in 0..n {
        probs.extend(softmax_row(logit_values.row(q)));
    }
    let probs = Tensor::new(&[n, classes], probs)?;
    let seg_values = crate::model::segments_of(ctx.graph.value(segments));
    let cost = matching_cost(gts, &probs, &seg_values, weights)?;
    let assignment = hungarian_assign(&cost)?;

    let mut target = vec![background; n];
    let mut class_weight = vec![weights.no_object; n];
    for &(j, i) in &assignment.pairs {
        target[i] = gts[j].label;
        class_weight[i] = 1.0;
    }
    let log_probs = ctx.graph.log_softmax(logits, 1)?;
    let flat: Vec<usize> = target.iter().enumerate().map(|(i, &c)| i * classes + c).collect();
    let picked = ctx.graph.gather(log_probs, &flat)?;
    let w = ctx
        .graph
        .constant(Tensor::from_vec(class_weight.into_iter().map(|w| -w).collect()));
    let weighted = ctx.graph.mul(picked, w)?;
    let cls = ctx.graph.sum(weighted);

    let mut layer = LayerLoss {
        classification: ctx.graph.value(cls).item()?,
        ..Default::default()
    };
    let mut total = cls;
    if !assignment.pairs.is_empty() {
        let rows = assignment.columns();
        let matched = ctx.graph.select_rows(segments, &rows)?;
        let gt_data: Vec<Scalar> = assignment
            .pairs
            .iter()
            .flat_map(|&(j, _)| gts[j].segment.as_array())
            .collect();
        let gt = ctx.graph.constant(Tensor::new(&[rows.len(), 2], gt_data)?);

        let diff = ctx.graph.sub(matched, gt)?;
        let abs = ctx.graph.abs(diff);
        let l1 = ctx.graph.sum(abs);

        let iou = ctx.graph.segment_iou(matched, gt)?;
        let iou_sum = ctx.graph.sum(iou);
        let neg = ctx.graph.scale(iou_sum, -1.0);
        let iou_term = ctx.graph.add_scalar(neg, rows.len() as Scalar);

        layer.segment_l1 = ctx.graph.value(l1).item()?;
        layer.segment_iou = ctx.graph.value(iou_term).item()?;
        let l1w = ctx.graph.scale(l1, weights.coord);
        let iouw = ctx.graph.scale(iou_term, weights.iou);
        total = ctx.graph.add(total, l1w)?;
        total = ctx.graph.add(total, iouw)?;
    }
    layer.total = ctx.graph.value(total).item()?;
    layer.assignment = assignment;
    Ok((total, layer))
}
