use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::attention::{DenseAttention, SamplingTrace, TemporalAttention};
use super::config::ModelConfig;
use super::encoder::temporal_attention;
use super::layers::{residual_norm, Ctx, FeedForward, LayerNorm, Linear, Mlp};
use crate::error::Result;
use crate::graph::Var;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attention: DenseAttention,
    pub norm_self: LayerNorm,
    pub cross_attention: TemporalAttention,
    pub norm_cross: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
    pub class_head: Linear,
    /// Predicts `(Δcenter, Δlength)` in log-odds space.
    pub segment_head: Mlp,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub reference: Linear,
    pub refine: bool,
}

/// Graph handles for one decoder layer's predictions.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    /// `[N_q, num_classes + 1]`, background last.
    pub logits: Var,
    /// `[N_q, 2]` normalized `(center, length)`.
    pub segments: Var,
    /// `[N_q]` normalized reference points used for cross-attention.
    pub reference: Var,
}

pub struct DecoderOutput {
    pub layers: Vec<LayerVars>,
    pub traces: Vec<SamplingTrace>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.hidden_dim;
        let layers = (0..cfg.decoder_layers)
            .map(|l| {
                let p = format!("decoder.layers.{l}");
                DecoderLayer {
                    self_attention: DenseAttention::new(store, rng, &format!("{p}.self_attention"), c, cfg.heads),
                    norm_self: LayerNorm::new(store, &format!("{p}.norm_self"), c),
                    cross_attention: temporal_attention(store, rng, &format!("{p}.cross_attention"), cfg),
                    norm_cross: LayerNorm::new(store, &format!("{p}.norm_cross"), c),
                    ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), c, cfg.ffn_dim),
                    norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), c),
                    class_head: Linear::new(store, rng, &format!("{p}.class_head"), c, cfg.num_classes + 1),
                    segment_head: Mlp::new(store, rng, &format!("{p}.segment_head"), &[c, c, c, c, 2]),
                }
            })
            .collect();
        Self {
            layers,
            reference: Linear::new(store, rng, "decoder.reference", c, 1),
            refine: cfg.refine_segments,
        }
    }

    /// Decodes `embeddings[N_q, C]` against `memory[T, C]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, embeddings: Var, memory: Var, positions: Var) -> Result<DecoderOutput> {
        let nq = ctx.graph.shape(embeddings)[0];
        let ref_logit = self.reference.forward(ctx, embeddings)?;
        let ref_logit = ctx.graph.reshape(ref_logit, &[nq])?;
        let first_reference = ctx.graph.sigmoid(ref_logit);

        // Log-odds base of the first layer: (σ⁻¹(reference), 0).
        let base_center = ctx.graph.inverse_sigmoid(first_reference);
        let base_center = ctx.graph.reshape(base_center, &[nq, 1])?;
        let zero_length = ctx.graph.constant(Tensor::zeros(&[nq, 1]));
        let first_base = ctx.graph.concat(&[base_center, zero_length], 1)?;

        let mut target = embeddings;
        let mut outputs: Vec<LayerVars> = Vec::with_capacity(self.layers.len());
        let mut traces = Vec::new();
        for layer in &self.layers {
            let (reference, base) = match outputs.last() {
                Some(prev) if self.refine => {
                    let prev = ctx.graph.detach(prev.segments);
                    let center = ctx.graph.narrow(prev, 1, 0, 1)?;
                    let center = ctx.graph.reshape(center, &[nq])?;
                    (center, ctx.graph.inverse_sigmoid(prev))
                }
                _ => (first_reference, first_base),
            };

            let sa = layer.self_attention.forward(ctx, target, target, target)?;
            target = residual_norm(ctx, &layer.norm_self, target, sa)?;
            let (ca, trace) = layer
                .cross_attention
                .forward(ctx, target, reference, memory, positions)?;
            traces.extend(trace);
            target = residual_norm(ctx, &layer.norm_cross, target, ca)?;
            let ff = layer.ffn.forward(ctx, target)?;
            target = residual_norm(ctx, &layer.norm_ffn, target, ff)?;

            let logits = layer.class_head.forward(ctx, target)?;
            let delta = layer.segment_head.forward(ctx, target)?;
            let moved = ctx.graph.add(delta, base)?;
            let segments = ctx.graph.sigmoid(moved);
            outputs.push(LayerVars {
                logits,
                segments,
                reference,
            });
        }
        Ok(DecoderOutput {
            layers: outputs,
            traces,
        })
    }
}
