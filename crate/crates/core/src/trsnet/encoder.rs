//! Split-attention encoder: a stride-2 stem followed by stages that each
//! halve the resolution and apply residual split-attention blocks.

use super::config::SplitAttnConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Act, Builder, Conv2d, ConvBnAct};
use crate::tensor::Scalar;

/// Split attention over `radix` parallel 3×3 conv branches.
///
/// The pooled branch sum feeds a two-layer bottleneck whose output holds one
/// logit per (channel, branch), laid out channel-major (`c * radix + r`);
/// a softmax across branches weights the final sum.
#[derive(Clone, Debug)]
pub struct SplitAttention {
    pub radix: usize,
    pub channels: usize,
    pub branches: Vec<ConvBnAct>,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl SplitAttention {
    pub fn new(b: &mut Builder, channels: usize, radix: usize, reduction: usize) -> Result<Self> {
        if radix < 2 {
            return Err(Error::Config(format!("split attention radix must be >= 2, got {radix}")));
        }
        let inter = (channels * radix / reduction.max(1)).max(8);
        let branches = (0..radix)
            .map(|r| b.scope(format!("branch{r}"), |b| ConvBnAct::new(b, channels, channels, 3, 1, Act::Relu)))
            .collect::<Result<Vec<_>>>()?;
        let fc1 = b.scope("fc1", |b| Conv2d::new(b, channels, inter, 1, 1, true))?;
        let fc2 = b.scope("fc2", |b| Conv2d::new(b, inter, channels * radix, 1, 1, true))?;
        Ok(SplitAttention {
            radix,
            channels,
            branches,
            fc1,
            fc2,
        })
    }

    fn splits<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Vec<Var>> {
        self.branches.iter().map(|blk| blk.forward(g, x)).collect()
    }

    /// Attention weights `(N, C, 1, radix)` for the given splits.
    fn weights<T: Scalar>(&self, g: &mut Graph<'_, T>, splits: &[Var]) -> Result<Var> {
        let mut sum = splits[0];
        for &s in &splits[1..] {
            sum = g.add(sum, s)?;
        }
        let pooled = g.mean_hw(sum);
        let h = self.fc1.forward(g, pooled)?;
        let h = g.relu(h);
        let logits = self.fc2.forward(g, h)?;
        let n = g.shape(logits).n();
        let logits = g.reshape(logits, [n, self.channels, 1, self.radix])?;
        Ok(g.softmax(logits))
    }

    /// The per-channel branch weights, for inspection.
    pub fn attention<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let splits = self.splits(g, x)?;
        self.weights(g, &splits)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let splits = self.splits(g, x)?;
        let a = self.weights(g, &splits)?;
        let mut out: Option<Var> = None;
        for (r, &s) in splits.iter().enumerate() {
            let w = g.narrow(a, 3, r, 1)?;
            let term = g.mul(s, w)?;
            out = Some(match out {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        Ok(out.expect("radix >= 2"))
    }
}

/// `relu(x + split_attention(x))`.
#[derive(Clone, Debug)]
pub struct SplitBlock {
    pub attn: SplitAttention,
}

impl SplitBlock {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.attn.forward(g, x)?;
        let y = g.add(x, y)?;
        Ok(g.relu(y))
    }
}

/// Strided transition conv followed by split-attention blocks (`E-i`).
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub down: ConvBnAct,
    pub blocks: Vec<SplitBlock>,
}

impl EncoderStage {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut x = self.down.forward(g, x)?;
        for blk in &self.blocks {
            x = blk.forward(g, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: ConvBnAct,
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(b: &mut Builder, cfg: &SplitAttnConfig, in_channels: usize) -> Result<Self> {
        let stem = b.scope("stem", |b| ConvBnAct::new(b, in_channels, cfg.stem_channels, 3, 2, Act::Relu))?;
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::new();
        for (i, (&c, &depth)) in cfg.stage_channels.iter().zip(&cfg.stage_depths).enumerate() {
            let stage = b.scope(format!("e{i}"), |b| {
                let down = b.scope("down", |b| ConvBnAct::new(b, cin, c, 3, 2, Act::Relu))?;
                let blocks = (0..depth)
                    .map(|k| {
                        b.scope(format!("block{k}"), |b| {
                            Ok(SplitBlock {
                                attn: SplitAttention::new(b, c, cfg.radix, cfg.reduction)?,
                            })
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(EncoderStage { down, blocks })
            })?;
            stages.push(stage);
            cin = c;
        }
        Ok(Encoder { stem, stages })
    }

    /// Channel count of each pyramid level, stem first.
    pub fn level_channels(&self) -> Vec<usize> {
        std::iter::once(self.stem.conv.cout)
            .chain(self.stages.iter().map(|s| s.down.conv.cout))
            .collect()
    }

    /// Feature pyramid: stem output then each stage output, each half the
    /// resolution of the previous.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Vec<Var>> {
        let mut feats = vec![self.stem.forward(g, x)?];
        for stage in &self.stages {
            let prev = *feats.last().unwrap();
            feats.push(stage.forward(g, prev)?);
        }
        Ok(feats)
    }
}
