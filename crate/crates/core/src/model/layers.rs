use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{Result, Scalar, Tensor};

/// One forward pass: the graph under construction plus parameter bindings.
pub struct Ctx<'p> {
    pub graph: Graph,
    pub binder: Binder<'p>,
    pub(crate) dropout: Option<(Scalar, ChaCha8Rng)>,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p ParamStore, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            binder: Binder::new(params, trainable),
            dropout: None,
        }
    }

    /// Enables inverted dropout with probability `p`, seeded.
    pub fn with_dropout(mut self, p: Scalar, rng: ChaCha8Rng) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, rng));
        }
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.binder.bind(&mut self.graph, id)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *p;
        let shape = self.graph.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<Scalar> = (0..n)
            .map(|_| if rng.gen::<Scalar>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.graph.constant(Tensor::new(&shape, mask)?);
        self.graph.mul(x, m)
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: Scalar) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("numel")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Weight stored `[input, output]`; both tensors use the fan-in uniform bound.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Self {
        let bound = 1.0 / libm::sqrt(input as Scalar);
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[input, output], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[output], bound));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize, lr_mult: Scalar) -> Self {
        let weight = store.add_scaled(format!("{name}.weight"), Tensor::zeros(&[input, output]), lr_mult);
        let bias = store.add_scaled(format!("{name}.bias"), Tensor::zeros(&[output]), lr_mult);
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.graph.matmul(x, w)?;
        ctx.graph.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.graph.layer_norm(x, g, b)
    }
}

/// Stack of linear maps with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x)?;
            if i < last {
                x = ctx.graph.relu(x);
            }
        }
        Ok(x)
    }
}

/// Position-wise feed-forward block `C -> hidden -> C`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: Linear,
    pub project: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            expand: Linear::new(store, rng, &format!("{name}.expand"), width, hidden),
            project: Linear::new(store, rng, &format!("{name}.project"), hidden, width),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.expand.forward(ctx, x)?;
        let h = ctx.graph.relu(h);
        let h = ctx.dropout(h)?;
        self.project.forward(ctx, h)
    }
}

/// `LayerNorm(x + dropout(update))`.
pub(crate) fn residual_norm(ctx: &mut Ctx<'_>, norm: &LayerNorm, x: Var, update: Var) -> Result<Var> {
    let update = ctx.dropout(update)?;
    let sum = ctx.graph.add(x, update)?;
    norm.forward(ctx, sum)
}
