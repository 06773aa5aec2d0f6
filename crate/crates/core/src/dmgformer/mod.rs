//! Windowed-attention segmenter for fixed-size crops: patch embedding,
//! hierarchical shifted-window stages, a convolutional decoder with skips
//! and a binary damage head.
//!
//! Token grids are channels-last `(N, H, W, C)`; the decoder works on
//! `(N, C, H, W)` maps.

pub mod attention;
mod config;

pub use attention::{relative_index, shift_mask, RelPosBias, WindowAttention, MASK_VALUE};
pub use config::{DmgFormerConfig, SwinStageConfig};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Act, Builder, Conv2d, ConvBnAct, LayerNorm, Linear};
use crate::ops::ResizeMode;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(b: &mut Builder, patch: usize, cin: usize, dim: usize) -> Result<Self> {
        let proj = b.scope("proj", |b| {
            let weight = b.weight("w", [dim, cin, patch, patch], cin * patch * patch)?;
            let bias = b.weight("b", [1, 1, 1, dim], cin * patch * patch)?;
            Ok(Conv2d { weight, bias: Some(bias), stride: patch, pad: 0, cin, cout: dim, kernel: patch })
        })?;
        let norm = b.scope("norm", |b| LayerNorm::new(b, dim))?;
        Ok(PatchEmbed { patch, proj, norm })
    }

    /// Projected patches before normalisation, `(N, H/p, W/p, C)`.
    pub fn project<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let s = g.shape(image);
        if s.h() % self.patch != 0 || s.w() % self.patch != 0 {
            return Err(Error::invalid_shape(
                "patch_embed",
                format!("input {s} not divisible by patch size {}", self.patch),
            ));
        }
        let y = self.proj.forward(g, image)?;
        g.permute(y, [0, 2, 3, 1])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let y = self.project(g, image)?;
        self.norm.forward(g, y)
    }
}

/// LN, (shifted) window attention, residual, LN, GELU MLP, residual.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub window: usize,
    pub shift: usize,
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SwinBlock {
    pub fn new(b: &mut Builder, dim: usize, heads: usize, window: usize, shift: usize, mlp_ratio: usize) -> Result<Self> {
        if window == 0 || shift >= window {
            return Err(Error::Config(format!("shift {shift} must be below window {window}")));
        }
        Ok(SwinBlock {
            window,
            shift,
            norm1: b.scope("norm1", |b| LayerNorm::new(b, dim))?,
            attn: b.scope("attn", |b| WindowAttention::new(b, dim, heads, window))?,
            norm2: b.scope("norm2", |b| LayerNorm::new(b, dim))?,
            fc1: b.scope("fc1", |b| Linear::new(b, dim, dim * mlp_ratio, true))?,
            fc2: b.scope("fc2", |b| Linear::new(b, dim * mlp_ratio, dim, true))?,
        })
    }

    /// Shift mask repeated over the batch, `(N·nW, 1, T, T)`.
    fn mask<T: Scalar>(&self, n: usize, h: usize, w: usize) -> Tensor<T> {
        let one = shift_mask::<T>(h, w, self.window, self.shift);
        let [nw, _, t, _] = one.shape().dims();
        let mut data = Vec::with_capacity(n * one.numel());
        for _ in 0..n {
            data.extend_from_slice(one.data());
        }
        Tensor::from_vec([n * nw, 1, t, t], data).expect("sized above")
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let grid = g.shape(x);
        let [n, h, w, _] = grid.dims();
        if h % self.window != 0 || w % self.window != 0 {
            return Err(Error::invalid_shape(
                "swin_block",
                format!("grid {h}x{w} not divisible by window {}", self.window),
            ));
        }
        let s = self.shift as isize;
        let y = self.norm1.forward(g, x)?;
        let y = if s > 0 { g.roll_hw(y, -s, -s) } else { y };
        let win = g.window_partition(y, self.window)?;
        let mask = if s > 0 { Some(g.input(self.mask(n, h, w))) } else { None };
        let att = self.attn.forward(g, win, mask)?;
        let y = g.window_reverse(att, self.window, grid)?;
        let y = if s > 0 { g.roll_hw(y, s, s) } else { y };
        let x = g.add(x, y)?;
        let y = self.norm2.forward(g, x)?;
        let y = self.fc1.forward(g, y)?;
        let y = g.gelu(y);
        let y = self.fc2.forward(g, y)?;
        g.add(x, y)
    }
}

/// 2×2 neighbourhood concat, LN, bias-free projection to `2C`.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerging {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(PatchMerging {
            norm: b.scope("norm", |b| LayerNorm::new(b, 4 * dim))?,
            reduce: b.scope("reduce", |b| Linear::new(b, 4 * dim, 2 * dim, false))?,
        })
    }

    /// The `(N, H/2, W/2, 4C)` neighbourhood concat.
    pub fn gather<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.c() % 2 != 0 || s.h() % 2 != 0 {
            return Err(Error::invalid_shape("patch_merging", format!("odd grid {}x{}", s.c(), s.h())));
        }
        let y = g.permute(x, [0, 3, 1, 2])?;
        let y = g.pixel_unshuffle(y, 2)?;
        g.permute(y, [0, 2, 3, 1])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.gather(g, x)?;
        let y = self.norm.forward(g, y)?;
        self.reduce.forward(g, y)
    }
}

#[derive(Clone, Debug)]
pub struct SwinStage {
    pub merge: Option<PatchMerging>,
    pub blocks: Vec<SwinBlock>,
}

impl SwinStage {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut x = match &self.merge {
            Some(m) => m.forward(g, x)?,
            None => x,
        };
        for blk in &self.blocks {
            x = blk.forward(g, x)?;
        }
        Ok(x)
    }
}

/// Nearest ×2 upsample, optional skip concat, two conv+BN+GELU layers.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub skip_channels: usize,
    pub conv1: ConvBnAct,
    pub conv2: ConvBnAct,
}

impl DecoderBlock {
    pub fn new(b: &mut Builder, cin: usize, skip_channels: usize, cout: usize) -> Result<Self> {
        Ok(DecoderBlock {
            skip_channels,
            conv1: b.scope("conv1", |b| ConvBnAct::new(b, cin + skip_channels, cout, 3, 1, Act::Gelu))?,
            conv2: b.scope("conv2", |b| ConvBnAct::new(b, cout, cout, 3, 1, Act::Gelu))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, skip: Option<Var>) -> Result<Var> {
        let s = g.shape(x);
        let up = g.resize(x, 2 * s.h(), 2 * s.w(), ResizeMode::Nearest)?;
        let y = match skip {
            Some(k) => {
                let ks = g.shape(k);
                if ks.h() != 2 * s.h() || ks.w() != 2 * s.w() || ks.n() != s.n() || ks.c() != self.skip_channels {
                    return Err(Error::shape("decoder_block skip", g.shape(up), ks));
                }
                g.concat(&[up, k], 1)?
            }
            None if self.skip_channels > 0 => {
                return Err(Error::InvalidArgument("decoder block expects a skip input".into()))
            }
            None => up,
        };
        let y = self.conv1.forward(g, y)?;
        self.conv2.forward(g, y)
    }
}

#[derive(Clone, Debug)]
pub struct DmgFormer {
    pub cfg: DmgFormerConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<SwinStage>,
    pub decoder: Vec<DecoderBlock>,
    pub head: Conv2d,
}

impl DmgFormer {
    pub fn new(cfg: &DmgFormerConfig, store: &mut ParamStore<f32>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(store, seed);
        let embed = b.scope("embed", |b| PatchEmbed::new(b, cfg.patch_size, 3, cfg.stages[0].dim))?;
        let mut stages = Vec::new();
        for (i, (sc, res)) in cfg.stages.iter().zip(cfg.stage_resolutions()).enumerate() {
            // A window covering the whole grid has nothing to shift.
            let window = sc.window.min(res);
            let shift = if res <= sc.window { 0 } else { sc.shift };
            let stage = b.scope(format!("s{i}"), |b| {
                let merge = if i > 0 {
                    Some(b.scope("merge", |b| PatchMerging::new(b, cfg.stages[i - 1].dim))?)
                } else {
                    None
                };
                let blocks = (0..sc.depth)
                    .map(|k| {
                        let sh = if k % 2 == 1 { shift } else { 0 };
                        b.scope(format!("block{k}"), |b| SwinBlock::new(b, sc.dim, sc.heads, window, sh, cfg.mlp_ratio))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SwinStage { merge, blocks })
            })?;
            stages.push(stage);
        }
        let l = cfg.stages.len();
        let mut decoder = Vec::new();
        let mut cin = cfg.stages[l - 1].dim;
        for (k, &cout) in cfg.decoder_widths.iter().enumerate() {
            // Block k consumes the skip of stage l-2-k; the last has none.
            let skip = if k + 1 < l { cfg.stages[l - 2 - k].dim } else { 0 };
            decoder.push(b.scope(format!("d{k}"), |b| DecoderBlock::new(b, cin, skip, cout))?);
            cin = cout;
        }
        let head = b.scope("head", |b| Conv2d::new(b, cin, cfg.out_channels, 1, 1, true))?;
        Ok(DmgFormer { cfg: cfg.clone(), embed, stages, decoder, head })
    }

    /// Logits `(N, out_channels, crop, crop)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, crop: Var) -> Result<Var> {
        let s = g.shape(crop);
        let c = self.cfg.crop;
        if s.c() != 3 || s.h() != c || s.w() != c {
            return Err(Error::invalid_shape("dmgformer", format!("input {s}, expected (N, 3, {c}, {c})")));
        }
        let mut x = self.embed.forward(g, crop)?;
        let mut feats = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            x = st.forward(g, x)?;
            feats.push(g.permute(x, [0, 3, 1, 2])?);
        }
        let l = feats.len();
        let mut y = feats[l - 1];
        for (k, blk) in self.decoder.iter().enumerate() {
            let skip = if k + 1 < l { Some(feats[l - 2 - k]) } else { None };
            y = blk.forward(g, y, skip)?;
        }
        self.head.forward(g, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use rand::{Rng, SeedableRng};

    fn rand_t(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn patch_embed_counts_tokens() {
        for (side, tokens) in [(224, 12544), (8, 16)] {
            let mut store = ParamStore::new();
            let pe = PatchEmbed::new(&mut Builder::new(&mut store, 0), 2, 3, 6).unwrap();
            let mut g = Graph::inference(&store);
            let x = g.input(Tensor::zeros([1, 3, side, side]));
            let y = pe.forward(&mut g, x).unwrap();
            let [_, h, w, c] = g.shape(y).dims();
            assert_eq!((h * w, c), (tokens, 6));
        }
    }

    #[test]
    fn zero_image_tokens_equal_projection_bias() {
        let mut store = ParamStore::new();
        let pe = PatchEmbed::new(&mut Builder::new(&mut store, 4), 2, 3, 5).unwrap();
        let bias = store.get(pe.proj.bias.unwrap()).data().to_vec();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros([2, 3, 8, 8]));
        let y = pe.project(&mut g, x).unwrap();
        for tok in g.value(y).data().chunks(5) {
            assert_eq!(tok, &bias[..]);
        }
        let y = pe.forward(&mut g, x).unwrap();
        let first = g.value(y).data()[..5].to_vec();
        for tok in g.value(y).data().chunks(5) {
            assert_eq!(tok, &first[..]);
        }
    }

    #[test]
    fn patch_embed_rejects_indivisible() {
        let mut store = ParamStore::new();
        let pe = PatchEmbed::new(&mut Builder::new(&mut store, 0), 2, 3, 4).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros([1, 3, 9, 8]));
        assert!(pe.forward(&mut g, x).is_err());
    }

    #[test]
    fn zero_shift_block_is_plain_window_attention() {
        let mut store = ParamStore::new();
        let blk = SwinBlock::new(&mut Builder::new(&mut store, 1), 4, 2, 2, 0, 2).unwrap();
        let x = rand_t([1, 4, 4, 4], 3);
        let mut g = Graph::inference(&store);
        let xv = g.input(x);
        let y = blk.forward(&mut g, xv).unwrap();
        assert_eq!(g.shape(y), g.shape(xv));

        let h = blk.norm1.forward(&mut g, xv).unwrap();
        let w = g.window_partition(h, 2).unwrap();
        let a = blk.attn.forward(&mut g, w, None).unwrap();
        let a = g.window_reverse(a, 2, g.shape(xv)).unwrap();
        let r = g.add(xv, a).unwrap();
        let m = blk.norm2.forward(&mut g, r).unwrap();
        let m = blk.fc1.forward(&mut g, m).unwrap();
        let m = g.gelu(m);
        let m = blk.fc2.forward(&mut g, m).unwrap();
        let expect = g.add(r, m).unwrap();
        assert_eq!(g.value(y), g.value(expect));
    }

    #[test]
    fn shifted_block_preserves_shape_and_differs() {
        let mut store = ParamStore::new();
        let blk = SwinBlock::new(&mut Builder::new(&mut store, 1), 4, 2, 2, 1, 2).unwrap();
        let mut plain = blk.clone();
        plain.shift = 0;
        let mut g = Graph::inference(&store);
        let xv = g.input(rand_t([2, 4, 6, 4], 7));
        let y = blk.forward(&mut g, xv).unwrap();
        let y0 = plain.forward(&mut g, xv).unwrap();
        assert_eq!(g.shape(y), g.shape(xv));
        assert_ne!(g.value(y), g.value(y0));
    }

    #[test]
    fn merging_halves_grid_and_keeps_values() {
        let mut store = ParamStore::new();
        let m = PatchMerging::new(&mut Builder::new(&mut store, 0), 3).unwrap();
        let x = rand_t([1, 4, 6, 3], 8);
        let mut g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let cat = m.gather(&mut g, xv).unwrap();
        assert_eq!(g.shape(cat).dims(), [1, 2, 3, 12]);
        let mut a: Vec<f32> = x.data().to_vec();
        let mut b: Vec<f32> = g.value(cat).data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
        let y = m.forward(&mut g, xv).unwrap();
        assert_eq!(g.shape(y).dims(), [1, 2, 3, 6]);

        let one = g.input(rand_t([1, 2, 2, 3], 9));
        let y = m.forward(&mut g, one).unwrap();
        assert_eq!(g.shape(y).dims(), [1, 1, 1, 6]);
        let odd = g.input(rand_t([1, 3, 2, 3], 9));
        assert!(m.forward(&mut g, odd).is_err());
    }

    #[test]
    fn decoder_block_upsamples_and_checks_skip() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 0);
        let with = b.scope("a", |b| DecoderBlock::new(b, 6, 4, 5)).unwrap();
        let without = b.scope("b", |b| DecoderBlock::new(b, 6, 0, 5)).unwrap();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(rand_t([2, 6, 7, 7], 1));
        let skip = g.input(rand_t([2, 4, 14, 14], 2));
        let y = with.forward(&mut g, x, Some(skip)).unwrap();
        assert_eq!(g.shape(y).dims(), [2, 5, 14, 14]);
        let y = without.forward(&mut g, x, None).unwrap();
        assert_eq!(g.shape(y).dims(), [2, 5, 14, 14]);
        let bad = g.input(rand_t([2, 4, 12, 14], 2));
        assert!(with.forward(&mut g, x, Some(bad)).is_err());
        assert!(with.forward(&mut g, x, None).is_err());
    }

    #[test]
    fn decoder_restores_crop_resolution() {
        let cfg = DmgFormerConfig::grad_toy();
        let mut store = ParamStore::new();
        let net = DmgFormer::new(&cfg, &mut store, 0).unwrap();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(rand_t([2, 3, 16, 16], 1));
        let y = net.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y).dims(), [2, 3, 16, 16]);
        let bad = g.input(rand_t([2, 3, 16, 8], 1));
        assert!(net.forward(&mut g, bad).is_err());
    }

    #[test]
    fn deepest_stage_has_no_shift_when_window_covers_grid() {
        let cfg = DmgFormerConfig::toy();
        let mut store = ParamStore::new();
        let net = DmgFormer::new(&cfg, &mut store, 0).unwrap();
        assert_eq!(net.stages[0].blocks[1].shift, 3);
        assert_eq!(net.stages[4].blocks[1].shift, 0);
        assert_eq!(net.stages[4].blocks[1].window, 7);
        assert_eq!(net.decoder.len(), 5);
        assert_eq!(net.decoder[4].skip_channels, 0);
        assert_eq!(net.decoder[0].skip_channels, 192);
    }

    #[test]
    fn full_crop_forward_is_deterministic() {
        let cfg = DmgFormerConfig::toy();
        let x = rand_t([2, 3, 224, 224], 5);
        let run = || {
            let mut store = ParamStore::new();
            let net = DmgFormer::new(&cfg, &mut store, 11).unwrap();
            let mut g = Graph::inference(&store);
            let xv = g.input(x.clone());
            let y = net.forward(&mut g, xv).unwrap();
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape().dims(), [2, 3, 224, 224]);
        assert_eq!(a.data(), run().data());
    }
}
