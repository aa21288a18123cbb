use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Dense layer `x·W (+ b)`; weights stored `[in, out]`.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[input, output], input, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.b"), &[output], input, rng));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            offset: store.add(format!("{name}.offset"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (a, b) = (g.param(self.gain), g.param(self.offset));
        g.layer_norm(x, a, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gain, self.offset]
    }
}

/// Stack of dense layers with ReLU between them and a linear output.
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(store, &format!("{name}.{k}"), w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if k < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::ids).collect()
    }
}

/// Per-head slices `[B,N,d]` of a `[B,N,heads·d]` projection.
pub(crate) fn split_heads(g: &mut Graph, x: Var, heads: usize, d: usize) -> Result<Vec<Var>> {
    (0..heads).map(|k| g.slice_last(x, k * d, d)).collect()
}
