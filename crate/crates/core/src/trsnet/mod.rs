//! Compound segmenter with learnable resizers around a split-attention
//! encoder and nested decoder, plus the fixed-resizer baselines.

mod config;
pub mod encoder;
pub mod resizer;
pub mod unetpp;

use serde::{Deserialize, Serialize};

pub use config::{ResizerConfig, SplitAttnConfig, TrsNetConfig, UNetPPConfig};
pub use encoder::{Encoder, SplitAttention};
pub use resizer::{Dcn, Ucn};
pub use unetpp::{node_count, UNetPP};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Act, Builder, Conv2d, ConvBnAct};
use crate::ops::ResizeMode;
use crate::tensor::Scalar;

/// Encoder, nested decoder and a refinement block that returns to the
/// input resolution. Inputs are zero-padded at the bottom/right to a
/// multiple of the pyramid stride and the output cropped back.
#[derive(Clone, Debug)]
pub struct InternalNet {
    pub encoder: Encoder,
    pub decoder: UNetPP,
    pub refine: ConvBnAct,
    pub head: Option<Conv2d>,
    multiple: usize,
}

impl InternalNet {
    pub fn new(b: &mut Builder, cfg: &TrsNetConfig, in_channels: usize, with_head: bool) -> Result<Self> {
        let encoder = b.scope("encoder", |b| Encoder::new(b, &cfg.encoder, in_channels))?;
        let decoder = b.scope("decoder", |b| UNetPP::new(b, &cfg.decoder, &encoder.level_channels()))?;
        let refine = b.scope("refine", |b| {
            ConvBnAct::new(b, decoder.out_channels(), cfg.decoder.out_channels, 3, 1, Act::Relu)
        })?;
        let head = if with_head {
            Some(b.scope("head", |b| Conv2d::new(b, cfg.decoder.out_channels, cfg.n_classes, 1, 1, true))?)
        } else {
            None
        };
        Ok(InternalNet {
            encoder,
            decoder,
            refine,
            head,
            multiple: cfg.internal_multiple(),
        })
    }

    pub fn features<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        let m = self.multiple;
        let (ph, pw) = (s.h().div_ceil(m) * m - s.h(), s.w().div_ceil(m) * m - s.w());
        let xp = if ph + pw > 0 { g.pad_hw(x, 0, ph, 0, pw) } else { x };
        let levels = self.encoder.forward(g, xp)?;
        let d = self.decoder.forward(g, &levels)?;
        let ds = g.shape(d);
        let up = g.resize(d, ds.h() * 2, ds.w() * 2, ResizeMode::Nearest)?;
        let f = self.refine.forward(g, up)?;
        if ph + pw > 0 {
            g.crop_hw(f, 0, 0, s.h(), s.w())
        } else {
            Ok(f)
        }
    }

    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Unsupported("internal network built without a head".into()))?;
        let f = self.features(g, x)?;
        head.forward(g, f)
    }
}

/// Which member of the family a [`TrsNet`] is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrsVariant {
    /// DCN, internal network, UCN.
    Compound,
    /// Internal network on uniformly downsized images; predicts downsized
    /// masks.
    LowRes,
    /// Internal network between fixed downsize and upsize layers.
    Uniform,
    /// Internal network at native resolution (used on crops).
    Internal,
}

#[derive(Clone, Debug)]
pub struct TrsNet {
    pub cfg: TrsNetConfig,
    pub variant: TrsVariant,
    pub dcn: Option<Dcn>,
    pub internal: InternalNet,
    pub ucn: Option<Ucn>,
}

impl TrsNet {
    pub fn new(cfg: &TrsNetConfig, variant: TrsVariant, store: &mut ParamStore<f32>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(store, seed);
        let compound = variant == TrsVariant::Compound;
        let dcn = if compound { Some(b.scope("dcn", |b| Dcn::new(b, &cfg.resizer, 3))?) } else { None };
        let in_ch = dcn.as_ref().map_or(3, Dcn::out_channels);
        let internal = b.scope("internal", |b| InternalNet::new(b, cfg, in_ch, !compound))?;
        let ucn = if compound {
            Some(b.scope("ucn", |b| Ucn::new(b, &cfg.resizer, cfg.decoder.out_channels))?)
        } else {
            None
        };
        Ok(TrsNet {
            cfg: cfg.clone(),
            variant,
            dcn,
            internal,
            ucn,
        })
    }

    /// Output resolution relative to the input, as `(up, down)`.
    pub fn output_scale(&self) -> (usize, usize) {
        match self.variant {
            TrsVariant::LowRes => (1, self.cfg.resizer.r),
            _ => (1, 1),
        }
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let r = self.cfg.resizer.r;
        if self.variant != TrsVariant::Internal && (h % r != 0 || w % r != 0) {
            return Err(Error::invalid_shape(
                "trsnet",
                format!("input {h}x{w} not divisible by resize factor {r}"),
            ));
        }
        Ok(())
    }

    /// Logits `(N, n, H, W)`, or `(N, n, H/r, W/r)` for the low-resolution
    /// baseline.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let s = g.shape(image);
        self.check_input(s.h(), s.w())?;
        let r = self.cfg.resizer.r;
        let mode = self.cfg.uniform_mode;
        match self.variant {
            TrsVariant::Compound => {
                let low = self.dcn.as_ref().unwrap().forward(g, image)?;
                let f = self.internal.features(g, low)?;
                self.ucn.as_ref().unwrap().forward(g, f)
            }
            TrsVariant::LowRes => {
                let low = g.resize(image, s.h() / r, s.w() / r, mode)?;
                self.internal.logits(g, low)
            }
            TrsVariant::Uniform => uniform_wrap(g, image, r, mode, |g, x| self.internal.logits(g, x)),
            TrsVariant::Internal => self.internal.logits(g, image),
        }
    }
}

/// Runs `inner` between a fixed `1/r` downsize and an `r` upsize.
pub fn uniform_wrap<T: Scalar>(
    g: &mut Graph<'_, T>,
    image: Var,
    r: usize,
    mode: ResizeMode,
    inner: impl FnOnce(&mut Graph<'_, T>, Var) -> Result<Var>,
) -> Result<Var> {
    let s = g.shape(image);
    let low = g.resize(image, s.h() / r, s.w() / r, mode)?;
    let y = inner(g, low)?;
    g.resize(y, s.h(), s.w(), mode)
}
