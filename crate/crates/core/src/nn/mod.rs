//! Parameterised layers shared by both segmenters.
//!
//! Layers hold only [`ParamId`]s, so a model built against an `f32` store
//! runs unchanged against an `f64` copy of it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{uniform, uniform_init, Graph, ParamId, ParamKind, ParamStore, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Batch-norm running-stat momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Registers named, seeded parameters into a store.
pub struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the parameter-name prefix.
    pub fn scope<R>(&mut self, name: impl AsRef<str>, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let saved = self.prefix.clone();
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(name.as_ref());
        let r = f(self);
        self.prefix = saved;
        r
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn weight(&mut self, name: &str, shape: [usize; 4], fan_in: usize) -> Result<ParamId> {
        let t = uniform_init(shape, fan_in, &mut self.rng);
        self.store.add(self.full_name(name), t, ParamKind::Trainable)
    }

    /// Trainable tensor drawn from `U(-bound, bound)`.
    pub fn uniform(&mut self, name: &str, shape: [usize; 4], bound: f64) -> Result<ParamId> {
        let t = uniform(shape, bound, &mut self.rng);
        self.store.add(self.full_name(name), t, ParamKind::Trainable)
    }

    pub fn constant(&mut self, name: &str, shape: [usize; 4], value: f32, kind: ParamKind) -> Result<ParamId> {
        self.store.add(self.full_name(name), Tensor::full(shape, value), kind)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Act {
    None,
    Relu,
    Gelu,
}

impl Act {
    pub fn apply<T: Scalar>(self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Act::None => x,
            Act::Relu => g.relu(x),
            Act::Gelu => g.gelu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, cin: usize, cout: usize, kernel: usize, stride: usize, bias: bool) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = b.weight("w", [cout, cin, kernel, kernel], fan_in)?;
        let bias = if bias { Some(b.weight("b", [1, 1, 1, cout], fan_in)?) } else { None };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad: kernel / 2,
            cin,
            cout,
            kernel,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, c: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: b.constant("gamma", [1, 1, 1, c], 1.0, ParamKind::Trainable)?,
            beta: b.constant("beta", [1, 1, 1, c], 0.0, ParamKind::Trainable)?,
            running_mean: b.constant("running_mean", [1, 1, 1, c], 0.0, ParamKind::Buffer)?,
            running_var: b.constant("running_var", [1, 1, 1, c], 1.0, ParamKind::Buffer)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.batch_norm(x, gm, bt, (self.running_mean, self.running_var), BN_MOMENTUM, BN_EPS)
    }
}

/// Convolution (no bias), batch norm, activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Act,
}

impl ConvBnAct {
    pub fn new(b: &mut Builder, cin: usize, cout: usize, kernel: usize, stride: usize, act: Act) -> Result<Self> {
        Ok(ConvBnAct {
            conv: b.scope("conv", |b| Conv2d::new(b, cin, cout, kernel, stride, false))?,
            bn: b.scope("bn", |b| BatchNorm2d::new(b, cout))?,
            act,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(self.act.apply(g, y))
    }
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, din: usize, dout: usize, bias: bool) -> Result<Self> {
        Ok(Linear {
            weight: b.weight("w", [1, 1, din, dout], din)?,
            bias: if bias { Some(b.weight("b", [1, 1, 1, dout], din)?) } else { None },
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: b.constant("gamma", [1, 1, 1, d], 1.0, ParamKind::Trainable)?,
            beta: b.constant("beta", [1, 1, 1, d], 0.0, ParamKind::Trainable)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;

    #[test]
    fn builder_scopes_names() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 0);
        let c = b.scope("enc", |b| b.scope("0", |b| ConvBnAct::new(b, 3, 4, 3, 1, Act::Relu))).unwrap();
        assert_eq!(store.name(c.conv.weight), "enc.0.conv.w");
        assert_eq!(store.name(c.bn.running_var), "enc.0.bn.running_var");
        assert_eq!(store.kind(c.bn.running_mean), ParamKind::Buffer);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let mk = |seed| {
            let mut store = ParamStore::new();
            let conv = Conv2d::new(&mut Builder::new(&mut store, seed), 2, 3, 3, 1, true).unwrap();
            store.get(conv.weight).clone()
        };
        assert_eq!(mk(5), mk(5));
        assert_ne!(mk(5), mk(6));
    }

    #[test]
    fn conv_bn_act_shape() {
        let mut store = ParamStore::new();
        let layer = ConvBnAct::new(&mut Builder::new(&mut store, 1), 3, 8, 3, 2, Act::Gelu).unwrap();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::full([2, 3, 9, 9], 0.5));
        let y = layer.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y).dims(), [2, 8, 5, 5]);
    }
}
