//! Learnable resizers: unshuffle-then-convolve downsampler and
//! convolve-then-shuffle upsampler.

use super::config::ResizerConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Act, Builder, Conv2d, ConvBnAct};
use crate::tensor::Scalar;

/// Downsampling network: `pixel_unshuffle(r)` then three stride-1 conv+BN
/// blocks, ReLU on all but the last.
#[derive(Clone, Debug)]
pub struct Dcn {
    pub r: usize,
    pub blocks: Vec<ConvBnAct>,
}

impl Dcn {
    pub fn new(b: &mut Builder, cfg: &ResizerConfig, in_channels: usize) -> Result<Self> {
        let mut cin = in_channels * cfg.r * cfg.r;
        let mut blocks = Vec::new();
        for (i, &cout) in cfg.dcn_channels.iter().enumerate() {
            let act = if i + 1 == cfg.dcn_channels.len() { Act::None } else { Act::Relu };
            blocks.push(b.scope(i.to_string(), |b| ConvBnAct::new(b, cin, cout, cfg.kernel, 1, act))?);
            cin = cout;
        }
        Ok(Dcn { r: cfg.r, blocks })
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.conv.cout)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let s = g.shape(image);
        if s.h() % self.r != 0 || s.w() % self.r != 0 {
            return Err(Error::invalid_shape(
                "dcn",
                format!("input {s} spatial dims not divisible by {}", self.r),
            ));
        }
        let mut x = g.pixel_unshuffle(image, self.r)?;
        for blk in &self.blocks {
            x = blk.forward(g, x)?;
        }
        Ok(x)
    }
}

/// Upsampling network: two conv+BN+ReLU blocks, a plain conv to `n * r^2`
/// channels, then `pixel_shuffle(r)`. Emits logits.
#[derive(Clone, Debug)]
pub struct Ucn {
    pub r: usize,
    pub blocks: Vec<ConvBnAct>,
    pub last: Conv2d,
}

impl Ucn {
    pub fn new(b: &mut Builder, cfg: &ResizerConfig, in_channels: usize) -> Result<Self> {
        let mut cin = in_channels;
        let mut blocks = Vec::new();
        let (&last_w, hidden) = cfg.ucn_channels.split_last().expect("validated widths");
        for (i, &cout) in hidden.iter().enumerate() {
            blocks.push(b.scope(i.to_string(), |b| ConvBnAct::new(b, cin, cout, cfg.kernel, 1, Act::Relu))?);
            cin = cout;
        }
        let last = b.scope(hidden.len().to_string(), |b| Conv2d::new(b, cin, last_w, cfg.kernel, 1, true))?;
        Ok(Ucn { r: cfg.r, blocks, last })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let mut x = features;
        for blk in &self.blocks {
            x = blk.forward(g, x)?;
        }
        let x = self.last.forward(g, x)?;
        g.pixel_shuffle(x, self.r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Mode, ParamStore};
    use crate::tensor::Tensor;

    fn cfg(n: usize) -> ResizerConfig {
        super::super::TrsNetConfig::toy(n).resizer
    }

    #[test]
    fn dcn_toy_shape() {
        let mut store = ParamStore::new();
        let dcn = Dcn::new(&mut Builder::new(&mut store, 0), &cfg(8), 3).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::full([1, 3, 8, 8], 0.3));
        let y = dcn.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y).dims(), [1, 3, 2, 2]);
    }

    #[test]
    fn dcn_rejects_indivisible() {
        let mut store = ParamStore::new();
        let dcn = Dcn::new(&mut Builder::new(&mut store, 0), &cfg(8), 3).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::zeros([1, 3, 10, 8]));
        assert!(dcn.forward(&mut g, x).is_err());
    }

    #[test]
    fn ucn_constant_bias_gives_constant_output() {
        let mut store = ParamStore::new();
        let ucn = Ucn::new(&mut Builder::new(&mut store, 0), &cfg(8), 8).unwrap();
        store.get_mut(ucn.last.weight).data_mut().fill(0.0);
        store.get_mut(ucn.last.bias.unwrap()).data_mut().fill(0.75);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::from_fn([1, 8, 3, 5], |[_, c, h, w]| (c + h * w) as f32));
        let y = ucn.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y).dims(), [1, 8, 12, 20]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.75));
    }
}
