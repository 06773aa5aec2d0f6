//! Multi-head self-attention inside non-overlapping windows.

use std::sync::Arc;

use crate::autograd::{Graph, ParamId, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Linear};
use crate::tensor::{Scalar, Tensor};

/// Additive pre-softmax value for disallowed token pairs.
pub const MASK_VALUE: f64 = -1e9;

/// Learnable per-head bias indexed by the relative offset of a token pair.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub table: ParamId,
    pub window: usize,
    pub heads: usize,
    index: Arc<Vec<usize>>,
}

/// Table slot of the pair `(i, j)` of a `window`×`window` window, tokens
/// row-major.
pub fn relative_index(window: usize, i: usize, j: usize) -> usize {
    let (yi, xi) = (i / window, i % window);
    let (yj, xj) = (j / window, j % window);
    let dy = yi + window - 1 - yj;
    let dx = xi + window - 1 - xj;
    dy * (2 * window - 1) + dx
}

impl RelPosBias {
    pub fn new(b: &mut Builder, window: usize, heads: usize) -> Result<Self> {
        let span = (2 * window - 1) * (2 * window - 1);
        let table = b.uniform("table", [1, 1, 1, heads * span], 0.02)?;
        let t = window * window;
        let mut index = Vec::with_capacity(heads * t * t);
        for h in 0..heads {
            for i in 0..t {
                for j in 0..t {
                    index.push(h * span + relative_index(window, i, j));
                }
            }
        }
        Ok(RelPosBias { table, window, heads, index: Arc::new(index) })
    }

    /// Bias `(1, heads, T, T)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let t = self.window * self.window;
        let table = g.param(self.table);
        g.gather(table, self.index.clone(), [1, self.heads, t, t])
    }
}

/// Region id of each position along one axis of a grid rolled by
/// `-shift`: windows that straddle the wrap seam see two regions.
fn regions(len: usize, window: usize, shift: usize) -> Vec<usize> {
    (0..len)
        .map(|p| {
            if p < len - window {
                0
            } else if p < len - shift {
                1
            } else {
                2
            }
        })
        .collect()
}

/// Mask `(nW, 1, T, T)` for a shifted `h`×`w` grid: 0 where both tokens
/// come from the same region, [`MASK_VALUE`] otherwise.
pub fn shift_mask<T: Scalar>(h: usize, w: usize, window: usize, shift: usize) -> Tensor<T> {
    let (ry, rx) = (regions(h, window, shift), regions(w, window, shift));
    let (nh, nw) = (h / window, w / window);
    let t = window * window;
    let mut out = Tensor::zeros([nh * nw, 1, t, t]);
    let d = out.data_mut();
    let id = |wy: usize, wx: usize, k: usize| {
        let (y, x) = (wy * window + k / window, wx * window + k % window);
        ry[y] * 3 + rx[x]
    };
    for wy in 0..nh {
        for wx in 0..nw {
            let base = (wy * nw + wx) * t * t;
            for i in 0..t {
                for j in 0..t {
                    if id(wy, wx, i) != id(wy, wx, j) {
                        d[base + i * t + j] = T::c(MASK_VALUE);
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub qkv: Linear,
    pub proj: Linear,
    pub bias: RelPosBias,
}

impl WindowAttention {
    pub fn new(b: &mut Builder, dim: usize, heads: usize, window: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(WindowAttention {
            dim,
            heads,
            qkv: b.scope("qkv", |b| Linear::new(b, dim, 3 * dim, true))?,
            proj: b.scope("proj", |b| Linear::new(b, dim, dim, true))?,
            bias: b.scope("relpos", |b| RelPosBias::new(b, window, heads))?,
        })
    }

    /// Attention probabilities `(B, heads, T, T)` and the per-head values
    /// `(B, heads, T, d)`.
    fn probs<T: Scalar>(&self, g: &mut Graph<'_, T>, windows: Var, mask: Option<Var>) -> Result<(Var, Var)> {
        let [_, nb, t, c] = g.shape(windows).dims();
        if c != self.dim {
            return Err(Error::invalid_shape(
                "window_attention",
                format!("token dim {c}, expected {}", self.dim),
            ));
        }
        let ww = self.bias.window * self.bias.window;
        if t != ww {
            return Err(Error::invalid_shape(
                "window_attention",
                format!("{t} tokens per window, expected {ww}"),
            ));
        }
        let d = c / self.heads;
        let qkv = self.qkv.forward(g, windows)?;
        let qkv = g.reshape(qkv, [nb, t, 3 * self.heads, d])?;
        let qkv = g.permute(qkv, [0, 2, 1, 3])?;
        let q = g.narrow(qkv, 1, 0, self.heads)?;
        let q = g.scale(q, 1.0 / (d as f64).sqrt());
        let k = g.narrow(qkv, 1, self.heads, self.heads)?;
        let v = g.narrow(qkv, 1, 2 * self.heads, self.heads)?;
        let kt = g.permute(k, [0, 1, 3, 2])?;
        let scores = g.matmul(q, kt)?;
        let bias = self.bias.forward(g)?;
        let mut scores = g.add(scores, bias)?;
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        Ok((g.softmax(scores), v))
    }

    /// Attention weights for inspection.
    pub fn weights<T: Scalar>(&self, g: &mut Graph<'_, T>, windows: Var, mask: Option<Var>) -> Result<Var> {
        Ok(self.probs(g, windows, mask)?.0)
    }

    /// `windows` is `(1, B, T, C)`; `mask`, if given, is `(B, 1, T, T)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, windows: Var, mask: Option<Var>) -> Result<Var> {
        let [_, nb, t, c] = g.shape(windows).dims();
        let (p, v) = self.probs(g, windows, mask)?;
        let y = g.matmul(p, v)?;
        let y = g.permute(y, [0, 2, 1, 3])?;
        let y = g.reshape(y, [1, nb, t, c])?;
        self.proj.forward(g, y)
    }
}
