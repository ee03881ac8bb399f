use alloc::format;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Deformable,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Transformer,
    /// Two kernel-3 convolutions with ReLU.
    Cnn1d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input feature width.
    pub input_dim: usize,
    /// Model width.
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub points: usize,
    pub queries: usize,
    /// Real action classes; the background slot is added on top.
    pub num_classes: usize,
    pub roi_expand: Scalar,
    pub roi_bins: usize,
    pub roi_samples: usize,
    pub refine_segments: bool,
    pub actionness: bool,
    pub attention: AttentionKind,
    pub encoder: EncoderKind,
    pub dropout: Scalar,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dim: 256,
            ffn_dim: 2048,
            encoder_layers: 2,
            decoder_layers: 4,
            heads: 8,
            points: 4,
            queries: 30,
            num_classes: 5,
            roi_expand: 1.5,
            roi_bins: 16,
            roi_samples: 2,
            refine_segments: true,
            actionness: true,
            attention: AttentionKind::Deformable,
            encoder: EncoderKind::Transformer,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// The ablation without actionness regression and segment refinement.
    pub fn base_variant(&self) -> Self {
        Self {
            refine_segments: false,
            actionness: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("points", self.points),
            ("queries", self.queries),
            ("num_classes", self.num_classes),
            ("roi_bins", self.roi_bins),
            ("roi_samples", self.roi_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.encoder == EncoderKind::Transformer && self.encoder_layers == 0 {
            return Err(Error::Config("encoder_layers must be at least 1".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return Err(Error::Config("hidden_dim must be even".into()));
        }
        if !(self.roi_expand >= 1.0) {
            return Err(Error::Config(format!("roi_expand {} must be >= 1", self.roi_expand)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
