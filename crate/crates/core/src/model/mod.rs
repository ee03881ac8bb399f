//! The detector: encoder, query decoder with segment refinement, and the
//! actionness head over RoIAligned encoder features.

pub mod attention;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod layers;

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use attention::{initial_offset, positional_encoding, SamplingTrace, SAMPLING_LR_MULT};
pub use config::{AttentionKind, EncoderKind, ModelConfig};
pub use decoder::LayerVars;
pub use layers::Ctx;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::kernels::RoiAlignSpec;
use crate::params::{ParamId, ParamStore};
use crate::segment::Segment;
use crate::tensor::{Scalar, Tensor};
use decoder::Decoder;
use encoder::Encoder;
use layers::Mlp;

/// A model: its configuration, weights and the layout addressing them.
#[derive(Clone, Debug)]
pub struct TadTr {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub query_embed: ParamId,
    pub actionness: Option<Mlp>,
}

/// Graph handles produced by one forward pass.
pub struct ForwardVars {
    pub memory: Var,
    pub layers: Vec<LayerVars>,
    /// `[N_q]` actionness in `(0, 1)`, when the head is enabled.
    pub actionness: Option<Var>,
    pub encoder_traces: Vec<SamplingTrace>,
    pub decoder_traces: Vec<SamplingTrace>,
}

/// Plain values of one decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput {
    pub logits: Tensor,
    pub segments: Vec<Segment>,
    pub reference: Vec<Scalar>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub query: usize,
    /// Softmax over `num_classes + 1`, background last.
    pub probs: Vec<Scalar>,
    /// Argmax over real classes.
    pub label: usize,
    pub class_prob: Scalar,
    pub segment: Segment,
    /// 1 when the actionness head is disabled.
    pub actionness: Scalar,
    pub score: Scalar,
}

/// Exactly one detection per query, in query order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub layers: Vec<LayerOutput>,
    pub detections: DetectionSet,
}

pub(crate) fn softmax_row(row: &[Scalar]) -> Vec<Scalar> {
    let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let exp: Vec<Scalar> = row.iter().map(|v| libm::exp(v - max)).collect();
    let sum: Scalar = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn segments_of(t: &Tensor) -> Vec<Segment> {
    t.data().chunks_exact(2).map(|s| Segment::new(s[0], s[1])).collect()
}

impl TadTr {
    /// Builds a model with freshly initialized weights.
    ///
    /// Attention-logit projections start at zero (uniform attention) and
    /// offset projections have zero weight with biases placing point `k` of
    /// head `m` at [`initial_offset`]`(m, k)` frames. Query embeddings are unit
    /// normal; every other linear map is uniform in `±1/sqrt(fan_in)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, &config);
        let decoder = Decoder::new(&mut params, &mut rng, &config);
        let c = config.hidden_dim;
        let embed: Vec<Scalar> = (0..config.queries * c)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let query_embed = params.add("decoder.query_embed", Tensor::new(&[config.queries, c], embed)?);
        let actionness = config
            .actionness
            .then(|| Mlp::new(&mut params, &mut rng, "actionness", &[config.roi_bins * c, c, c, 1]));
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            query_embed,
            actionness,
        })
    }

    pub fn roi_spec(&self) -> RoiAlignSpec {
        RoiAlignSpec {
            bins: self.config.roi_bins,
            expand: self.config.roi_expand,
            samples_per_bin: self.config.roi_samples,
        }
    }

    /// Records the full forward pass of `features[T, C_V]` into `ctx`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, features: Var) -> Result<ForwardVars> {
        let width = ctx.graph.shape(features).get(1).copied();
        if width != Some(self.config.input_dim) {
            return Err(Error::Config(alloc::format!(
                "expected {} input channels, got shape {:?}",
                self.config.input_dim,
                ctx.graph.shape(features)
            )));
        }
        let enc = self.encoder.forward(ctx, features)?;
        let embeddings = ctx.param(self.query_embed);
        let dec = self.decoder.forward(ctx, embeddings, enc.memory, enc.positions)?;
        let actionness = match (&self.actionness, dec.layers.last()) {
            (Some(head), Some(last)) => {
                let segments = ctx.graph.detach(last.segments);
                let aligned = ctx.graph.roi_align(enc.memory, segments, self.roi_spec())?;
                let logit = head.forward(ctx, aligned)?;
                let n = ctx.graph.shape(logit)[0];
                let logit = ctx.graph.reshape(logit, &[n])?;
                Some(ctx.graph.sigmoid(logit))
            }
            _ => None,
        };
        Ok(ForwardVars {
            memory: enc.memory,
            layers: dec.layers,
            actionness,
            encoder_traces: enc.traces,
            decoder_traces: dec.traces,
        })
    }

    /// Inference on one feature sequence. Only the last decoder layer feeds
    /// the detections.
    pub fn predict(&self, features: &Tensor) -> Result<Prediction> {
        let mut ctx = Ctx::new(&self.params, false);
        let x = ctx.graph.constant(features.clone());
        let vars = self.forward(&mut ctx, x)?;
        Ok(self.collect(&ctx, &vars))
    }

    pub fn collect(&self, ctx: &Ctx<'_>, vars: &ForwardVars) -> Prediction {
        let g = &ctx.graph;
        let layers: Vec<LayerOutput> = vars
            .layers
            .iter()
            .map(|l| LayerOutput {
                logits: g.value(l.logits).clone(),
                segments: segments_of(g.value(l.segments)),
                reference: g.value(l.reference).data().to_vec(),
            })
            .collect();
        let actionness = vars.actionness.map(|a| g.value(a).data().to_vec());
        let detections = layers
            .last()
            .map(|last| detections_from(&self.config, last, actionness.as_deref()))
            .unwrap_or_default();
        Prediction { layers, detections }
    }
}

/// Scores each query: best real-class probability times actionness.
pub fn detections_from(cfg: &ModelConfig, layer: &LayerOutput, actionness: Option<&[Scalar]>) -> DetectionSet {
    let detections =
        layer
            .segments
            .iter()
            .enumerate()
            .map(|(q, segment)| {
                let probs = softmax_row(layer.logits.row(q));
                let (label, class_prob) = probs[..cfg.num_classes].iter().copied().enumerate().fold(
                    (0, Scalar::NEG_INFINITY),
                    |best, (i, p)| if p > best.1 { (i, p) } else { best },
                );
                let act = actionness.map_or(1.0, |a| a[q]);
                Detection {
                    query: q,
                    probs,
                    label,
                    class_prob,
                    segment: *segment,
                    actionness: act,
                    score: class_prob * act,
                }
            })
            .collect();
    DetectionSet { detections }
}
