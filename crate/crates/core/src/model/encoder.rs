use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::attention::{positional_encoding, DeformableAttention, DenseAttention, SamplingTrace, TemporalAttention};
use super::config::{AttentionKind, EncoderKind, ModelConfig};
use super::layers::{residual_norm, Ctx, FeedForward, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: TemporalAttention,
    pub norm_attention: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

#[derive(Clone, Debug)]
pub enum EncoderBody {
    Transformer(Vec<EncoderLayer>),
    /// Kernel-3 convolutions, each stored as a `3C -> C` linear map over
    /// the `[x(t-1), x(t), x(t+1)]` window.
    Cnn(Vec<Linear>),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub input_proj: Linear,
    pub body: EncoderBody,
}

pub struct EncoderOutput {
    /// `[T, C]` context-enhanced features.
    pub memory: Var,
    /// `[T, C]` positional table used for the queries.
    pub positions: Var,
    pub traces: Vec<SamplingTrace>,
}

pub(crate) fn temporal_attention(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cfg: &ModelConfig,
) -> TemporalAttention {
    match cfg.attention {
        AttentionKind::Deformable => TemporalAttention::Deformable(DeformableAttention::new(
            store,
            rng,
            name,
            cfg.hidden_dim,
            cfg.heads,
            cfg.points,
        )),
        AttentionKind::Dense => {
            TemporalAttention::Dense(DenseAttention::new(store, rng, name, cfg.hidden_dim, cfg.heads))
        }
    }
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.hidden_dim;
        let input_proj = Linear::new(store, rng, "encoder.input_proj", cfg.input_dim, c);
        let body = match cfg.encoder {
            EncoderKind::Transformer => EncoderBody::Transformer(
                (0..cfg.encoder_layers)
                    .map(|l| {
                        let p = format!("encoder.layers.{l}");
                        EncoderLayer {
                            attention: temporal_attention(store, rng, &format!("{p}.attention"), cfg),
                            norm_attention: LayerNorm::new(store, &format!("{p}.norm_attention"), c),
                            ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), c, cfg.ffn_dim),
                            norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), c),
                        }
                    })
                    .collect(),
            ),
            EncoderKind::Cnn1d => EncoderBody::Cnn(
                (0..2)
                    .map(|l| Linear::new(store, rng, &format!("encoder.conv.{l}"), 3 * c, c))
                    .collect(),
            ),
        };
        Self { input_proj, body }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, features: Var) -> Result<EncoderOutput> {
        let shape = ctx.graph.shape(features).to_vec();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(Error::Config(format!("encoder input must be [T>=2, C], got {shape:?}")));
        }
        let frames = shape[0];
        let width = self.input_proj.output;
        let positions = ctx.graph.constant(positional_encoding(frames, width)?);
        let mut x = self.input_proj.forward(ctx, features)?;
        let mut traces = Vec::new();
        match &self.body {
            EncoderBody::Transformer(layers) => {
                // Every frame attends around its own location.
                let own: Vec<Scalar> = (0..frames).map(|t| t as Scalar / (frames - 1) as Scalar).collect();
                let reference = ctx.graph.constant(Tensor::from_vec(own));
                for layer in layers {
                    let query = ctx.graph.add(x, positions)?;
                    let (update, trace) = layer.attention.forward(ctx, query, reference, x, positions)?;
                    traces.extend(trace);
                    x = residual_norm(ctx, &layer.norm_attention, x, update)?;
                    let update = layer.ffn.forward(ctx, x)?;
                    x = residual_norm(ctx, &layer.norm_ffn, x, update)?;
                }
            }
            EncoderBody::Cnn(convs) => {
                for conv in convs {
                    let prev = ctx.graph.shift_rows(x, -1)?;
                    let next = ctx.graph.shift_rows(x, 1)?;
                    let window = ctx.graph.concat(&[prev, x, next], 1)?;
                    let y = conv.forward(ctx, window)?;
                    x = ctx.graph.relu(y);
                }
            }
        }
        Ok(EncoderOutput {
            memory: x,
            positions,
            traces,
        })
    }
}
