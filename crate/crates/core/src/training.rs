//! One optimization step over a mini-batch.
//!
//! The whole batch shares a single graph, so every parameter is bound once
//! and its gradient accumulates across videos during one backward pass.

use alloc::format;
use alloc::vec::Vec;

use crate::data::AnnotatedVideo;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::matching::{total_loss, LossBreakdown, LossWeights};
use crate::model::{Ctx, TadTr};
use crate::optim::AdamW;
use crate::tensor::{Scalar, Tensor};

/// Mean loss of `batch` and the gradient of that mean for every parameter.
pub fn batch_gradients(
    model: &TadTr,
    batch: &[&AnnotatedVideo],
    weights: &LossWeights,
) -> Result<(Vec<Tensor>, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as Scalar;
    let mut ctx = Ctx::new(&model.params, true);
    let mut mean = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for video in batch {
        let x = ctx.graph.constant(video.features.clone());
        let vars = model.forward(&mut ctx, x)?;
        let (loss, parts) = total_loss(&mut ctx, &vars, &video.actions, weights)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite(format!("loss of video {}", video.video_id)));
        }
        accumulate(&mut mean, &parts, scale);
        let scaled = ctx.graph.scale(loss, scale);
        total = Some(match total {
            Some(t) => ctx.graph.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = total.expect("batch is non-empty");
    ctx.graph.backward(total)?;
    let mut grads = model.params.zeros_like();
    ctx.binder.accumulate_grads(&ctx.graph, &mut grads, 1.0);
    Ok((grads, mean))
}

/// Computes gradients on `batch` and applies one optimizer update.
pub fn train_step(
    model: &mut TadTr,
    optimizer: &mut AdamW,
    batch: &[&AnnotatedVideo],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let (grads, loss) = batch_gradients(model, batch, weights)?;
    optimizer.step(&mut model.params, &grads)?;
    Ok(loss)
}

fn accumulate(into: &mut LossBreakdown, part: &LossBreakdown, scale: Scalar) {
    into.classification += scale * part.classification;
    into.segment_l1 += scale * part.segment_l1;
    into.segment_iou += scale * part.segment_iou;
    into.actionness += scale * part.actionness;
    into.total += scale * part.total;
}
