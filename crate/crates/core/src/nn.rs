//! Shared layers built on [`crate::autograd`].

use std::rc::Rc;

use ndarray::Array2;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::init::Initializer;

/// Affine map `x W + b` over rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), init.fan_in((in_dim, out_dim), in_dim));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Array2::zeros((1, out_dim))));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Array2::ones((1, dim))),
            beta: store.insert(format!("{name}.beta"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer position-wise feedforward with SiLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, init, &format!("{name}.up"), dim, hidden, true),
            down: Linear::new(store, init, &format!("{name}.down"), hidden, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.silu(h);
        self.down.forward(g, h)
    }
}

/// Multi-head attention projections. Scores are scaled by `1/sqrt(D/H)`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            query: Linear::new(store, init, &format!("{name}.q"), dim, dim, true),
            key: Linear::new(store, init, &format!("{name}.k"), dim, dim, true),
            value: Linear::new(store, init, &format!("{name}.v"), dim, dim, true),
            output: Linear::new(store, init, &format!("{name}.o"), dim, dim, true),
            heads,
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / ((self.query.out_dim / self.heads) as f64).sqrt()
    }

    /// Attention of `queries` over `memory`, with `keys[i]` listing the
    /// memory rows visible to query row `i`.
    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var, keys: Rc<Vec<Vec<usize>>>) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, memory);
        let v = self.value.forward(g, memory);
        let h = g.attention(q, k, v, self.heads, self.scale(), keys);
        self.output.forward(g, h)
    }
}

/// Query row `i` sees memory rows `0..=i`.
pub fn causal_keys(n: usize) -> Rc<Vec<Vec<usize>>> {
    Rc::new((0..n).map(|i| (0..=i).collect()).collect())
}

/// Every query row sees all `m` memory rows.
pub fn full_keys(n: usize, m: usize) -> Rc<Vec<Vec<usize>>> {
    let all: Vec<usize> = (0..m).collect();
    Rc::new(vec![all; n])
}

/// Sinusoidal absolute position table, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Sets every parameter whose name starts with `prefix` to zero.
pub fn zero_params(store: &mut ParamStore, prefix: &str) -> usize {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, n, _)| n.starts_with(prefix))
        .map(|(id, _, _)| id)
        .collect();
    for id in &ids {
        store.get_mut(*id).fill(0.0);
    }
    ids.len()
}
