//! Analytic multiply-add count of one forward pass.
//!
//! Only linear maps, attention products, sampling and FFNs are counted.
//! Activations, normalization, softmax and the positional table are free.
//! Sampling one channel at a fractional coordinate costs two multiply-adds
//! (the blend of two rows); weighting it by attention costs one more.

use crate::model::{AttentionKind, EncoderKind, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub input_projection: u64,
    pub encoder: u64,
    pub decoder: u64,
    /// Class and segment heads of every decoder layer plus the reference map.
    pub heads: u64,
    pub actionness: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.input_projection + self.encoder + self.decoder + self.heads + self.actionness
    }
}

fn linear(rows: usize, input: usize, output: usize) -> u64 {
    (rows * input * output) as u64
}

/// `queries` attend into `keys` positions.
fn attention(cfg: &ModelConfig, kind: AttentionKind, queries: usize, keys: usize) -> u64 {
    let c = cfg.hidden_dim;
    match kind {
        AttentionKind::Deformable => {
            let mk = cfg.heads * cfg.points;
            linear(keys, c, c)
                + 2 * linear(queries, c, mk)
                + 3 * (queries * cfg.points * c) as u64
                + linear(queries, c, c)
        }
        AttentionKind::Dense => 2 * linear(queries, c, c) + 2 * linear(keys, c, c) + 2 * (queries * keys * c) as u64,
    }
}

fn ffn(cfg: &ModelConfig, rows: usize) -> u64 {
    linear(rows, cfg.hidden_dim, cfg.ffn_dim) + linear(rows, cfg.ffn_dim, cfg.hidden_dim)
}

/// Exact count for the implemented network on a `length`-frame input.
pub fn estimate_flops(cfg: &ModelConfig, length: usize) -> FlopCount {
    let (c, nq) = (cfg.hidden_dim, cfg.queries);
    let encoder = match cfg.encoder {
        EncoderKind::Transformer => {
            cfg.encoder_layers as u64 * (attention(cfg, cfg.attention, length, length) + ffn(cfg, length))
        }
        EncoderKind::Cnn1d => 2 * linear(length, 3 * c, c),
    };
    let per_decoder_layer =
        attention(cfg, AttentionKind::Dense, nq, nq) + attention(cfg, cfg.attention, nq, length) + ffn(cfg, nq);
    let per_head = linear(nq, c, cfg.num_classes + 1) + 3 * linear(nq, c, c) + linear(nq, c, 2);
    let actionness = if cfg.actionness {
        let sampling = 2 * (nq * cfg.roi_bins * cfg.roi_samples * c) as u64;
        sampling + linear(nq, cfg.roi_bins * c, c) + linear(nq, c, c) + linear(nq, c, 1)
    } else {
        0
    };
    FlopCount {
        input_projection: linear(length, cfg.input_dim, c),
        encoder,
        decoder: cfg.decoder_layers as u64 * per_decoder_layer,
        heads: cfg.decoder_layers as u64 * per_head + linear(nq, c, 1),
        actionness,
    }
}
