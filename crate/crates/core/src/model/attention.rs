//! Sinusoidal positions, temporal deformable attention and dense attention.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::layers::{Ctx, Linear};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Learning-rate multiplier for the offset and attention-logit projections.
pub const SAMPLING_LR_MULT: Scalar = 0.1;

/// `T×C` sinusoidal table: `sin(τ / 10000^(γ/C))` on even channels and
/// `cos(τ / 10000^((γ-1)/C))` on odd ones.
pub fn positional_encoding(length: usize, width: usize) -> Result<Tensor> {
    if !width.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding width {width} must be even")));
    }
    let mut data = Vec::with_capacity(length * width);
    for t in 0..length {
        for c in 0..width {
            let even = c - c % 2;
            let angle = t as Scalar / libm::pow(10000.0, even as Scalar / width as Scalar);
            data.push(if c % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
        }
    }
    Ok(Tensor::new(&[length, width], data)?)
}

/// Initial sampling offset (frame units) of point `k` in head `m`:
/// heads cycle through `(k+1, 0, -(k+1), 0)`.
pub fn initial_offset(head: usize, point: usize) -> Scalar {
    const SIGN: [Scalar; 4] = [1.0, 0.0, -1.0, 0.0];
    SIGN[head % 4] * (point + 1) as Scalar
}

/// Handles to the sampling coordinates and weights of one attention call.
#[derive(Clone, Copy, Debug)]
pub struct SamplingTrace {
    /// `[Q, M·K]` continuous frame coordinates.
    pub coords: Var,
    /// `[Q, M·K]` attention weights, softmax-normalized within each head.
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct DeformableAttention {
    pub value: Linear,
    pub offsets: Linear,
    pub logits: Linear,
    pub output: Linear,
    pub heads: usize,
    pub points: usize,
}

impl DeformableAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        heads: usize,
        points: usize,
    ) -> Self {
        let value = Linear::new(store, rng, &format!("{name}.value"), width, width);
        let offsets = Linear::zeros(
            store,
            &format!("{name}.offsets"),
            width,
            heads * points,
            SAMPLING_LR_MULT,
        );
        {
            let bias = store.get_mut(offsets.bias).data_mut();
            for m in 0..heads {
                for k in 0..points {
                    bias[m * points + k] = initial_offset(m, k);
                }
            }
        }
        let logits = Linear::zeros(
            store,
            &format!("{name}.logits"),
            width,
            heads * points,
            SAMPLING_LR_MULT,
        );
        let output = Linear::new(store, rng, &format!("{name}.output"), width, width);
        Self {
            value,
            offsets,
            logits,
            output,
            heads,
            points,
        }
    }

    /// Attends from `query[Q, C]` around normalized `reference[Q]` into `source[T, C]`.
    ///
    /// A reference `t` maps to frame coordinate `t·(T-1)`; predicted offsets
    /// are added in frame units.
    pub fn forward(&self, ctx: &mut Ctx<'_>, query: Var, reference: Var, source: Var) -> Result<(Var, SamplingTrace)> {
        let q = ctx.graph.shape(query)[0];
        let frames = ctx.graph.shape(source)[0];
        let mk = self.heads * self.points;
        if ctx.graph.value(reference).numel() != q {
            return Err(Error::Config(format!(
                "reference has {} entries for {q} queries",
                ctx.graph.value(reference).numel()
            )));
        }

        let value = self.value.forward(ctx, source)?;
        let offsets = self.offsets.forward(ctx, query)?;
        let logits = self.logits.forward(ctx, query)?;
        let logits = ctx.graph.reshape(logits, &[q * self.heads, self.points])?;
        let weights = ctx.graph.softmax(logits, 1)?;
        let weights = ctx.graph.reshape(weights, &[q, mk])?;

        let base = ctx.graph.scale(reference, (frames.max(1) - 1) as Scalar);
        let base = ctx.graph.repeat_cols(base, mk);
        let coords = ctx.graph.add(base, offsets)?;

        let sampled = ctx.graph.deform_sample(value, coords, weights, self.heads)?;
        let out = self.output.forward(ctx, sampled)?;
        if !ctx.graph.value(out).all_finite() {
            return Err(Error::NonFinite("temporal deformable attention".into()));
        }
        Ok((out, SamplingTrace { coords, weights }))
    }
}

/// Scaled dot-product multi-head attention over all keys.
#[derive(Clone, Debug)]
pub struct DenseAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl DenseAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, heads: usize) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), width, width),
            key: Linear::new(store, rng, &format!("{name}.key"), width, width),
            value: Linear::new(store, rng, &format!("{name}.value"), width, width),
            output: Linear::new(store, rng, &format!("{name}.output"), width, width),
            heads,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, query: Var, key: Var, value: Var) -> Result<Var> {
        let width = self.query.output;
        let head_dim = width / self.heads;
        let scale = 1.0 / libm::sqrt(head_dim as Scalar);
        let q = self.query.forward(ctx, query)?;
        let k = self.key.forward(ctx, key)?;
        let v = self.value.forward(ctx, value)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ctx.graph.narrow(q, 1, h * head_dim, head_dim)?;
            let kh = ctx.graph.narrow(k, 1, h * head_dim, head_dim)?;
            let vh = ctx.graph.narrow(v, 1, h * head_dim, head_dim)?;
            let kt = ctx.graph.transpose(kh)?;
            let scores = ctx.graph.matmul(qh, kt)?;
            let scores = ctx.graph.scale(scores, scale);
            let attn = ctx.graph.softmax(scores, 1)?;
            outs.push(ctx.graph.matmul(attn, vh)?);
        }
        let merged = ctx.graph.concat(&outs, 1)?;
        let out = self.output.forward(ctx, merged)?;
        if !ctx.graph.value(out).all_finite() {
            return Err(Error::NonFinite("dense attention".into()));
        }
        Ok(out)
    }
}

/// The attention used by encoder self-attention and decoder cross-attention.
#[derive(Clone, Debug)]
pub enum TemporalAttention {
    Deformable(DeformableAttention),
    Dense(DenseAttention),
}

impl TemporalAttention {
    /// `query[Q,C]` attends into `source[T,C]`. `reference[Q]` anchors
    /// deformable sampling; `key_pos[T,C]` is added to dense keys.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        query: Var,
        reference: Var,
        source: Var,
        key_pos: Var,
    ) -> Result<(Var, Option<SamplingTrace>)> {
        match self {
            Self::Deformable(a) => {
                let (out, trace) = a.forward(ctx, query, reference, source)?;
                Ok((out, Some(trace)))
            }
            Self::Dense(a) => {
                let key = ctx.graph.add(source, key_pos)?;
                Ok((a.forward(ctx, query, key, source)?, None))
            }
        }
    }
}
