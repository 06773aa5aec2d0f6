//! The five evaluated models behind one interface.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::dmgformer::{DmgFormer, DmgFormerConfig};
use crate::error::{Error, Result};
use crate::loss::LossMode;
use crate::mask::Mask;
use crate::tensor::{Scalar, Tensor};
use crate::tiling::{augmented_inference, compute_grid, GridSpec};
use crate::trsnet::{TrsNet, TrsNetConfig, TrsVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "trsnet")]
    TrsNet,
    #[serde(rename = "baseline-lowres")]
    BaselineLowRes,
    #[serde(rename = "baseline-uniform")]
    BaselineUniform,
    #[serde(rename = "dmgformer")]
    DmgFormer,
    /// The internal network run directly on 480×270 grid crops.
    #[serde(rename = "internal-crop-480x270")]
    InternalCrop,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::TrsNet,
        ModelKind::BaselineLowRes,
        ModelKind::BaselineUniform,
        ModelKind::DmgFormer,
        ModelKind::InternalCrop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TrsNet => "trsnet",
            ModelKind::BaselineLowRes => "baseline-lowres",
            ModelKind::BaselineUniform => "baseline-uniform",
            ModelKind::DmgFormer => "dmgformer",
            ModelKind::InternalCrop => "internal-crop-480x270",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown model {name:?}")))
    }

    /// Whether the model sees grid crops instead of whole images.
    pub fn tiled(self) -> bool {
        matches!(self, ModelKind::DmgFormer | ModelKind::InternalCrop)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    TrsNet(TrsNetConfig),
    DmgFormer(DmgFormerConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub arch: Arch,
    /// `(width, height)` of grid crops for the internal-crop model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<(usize, usize)>,
}

impl ModelSpec {
    /// Desk-scale configuration of `kind` with `classes` outputs.
    pub fn toy(kind: ModelKind, classes: usize) -> Self {
        let arch = match kind {
            ModelKind::DmgFormer => Arch::DmgFormer(DmgFormerConfig { out_channels: classes, ..DmgFormerConfig::toy() }),
            _ => Arch::TrsNet(TrsNetConfig::toy(classes)),
        };
        let crop = (kind == ModelKind::InternalCrop).then_some((480, 270));
        ModelSpec { kind, arch, crop }
    }

    /// Smallest working configuration of `kind`, for tests and smoke runs.
    pub fn tiny(kind: ModelKind, classes: usize) -> Self {
        let mut s = Self::toy(kind, classes);
        s.arch = match kind {
            ModelKind::DmgFormer => Arch::DmgFormer(DmgFormerConfig { out_channels: classes, ..DmgFormerConfig::grad_toy() }),
            _ => Arch::TrsNet(TrsNetConfig::tiny(classes)),
        };
        s
    }

    pub fn classes(&self) -> usize {
        match &self.arch {
            Arch::TrsNet(c) => c.n_classes,
            Arch::DmgFormer(c) => c.out_channels,
        }
    }

    /// Crop `(width, height)` of tiled models.
    pub fn crop_size(&self) -> Option<(usize, usize)> {
        match (&self.arch, self.kind) {
            (Arch::DmgFormer(c), _) => Some((c.crop, c.crop)),
            (_, ModelKind::InternalCrop) => Some(self.crop.unwrap_or((480, 270))),
            _ => None,
        }
    }

    /// Replaces the crop size. DmgFormer crops are square.
    pub fn set_crop(&mut self, w: usize, h: usize) -> Result<()> {
        match (&mut self.arch, self.kind) {
            (Arch::DmgFormer(c), _) => {
                if w != h {
                    return Err(Error::Config(format!("dmgformer crops are square, got {w}x{h}")));
                }
                c.crop = w;
            }
            (_, ModelKind::InternalCrop) => self.crop = Some((w, h)),
            _ => return Err(Error::Config(format!("model {} does not use crops", self.kind))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.arch, self.kind) {
            (Arch::DmgFormer(c), ModelKind::DmgFormer) => c.validate(),
            (Arch::TrsNet(c), k) if k != ModelKind::DmgFormer => c.validate(),
            _ => Err(Error::Config(format!("architecture does not match model {}", self.kind))),
        }
    }

    /// Output side divisor relative to the input.
    pub fn output_divisor(&self) -> usize {
        match (&self.arch, self.kind) {
            (Arch::TrsNet(c), ModelKind::BaselineLowRes) => c.resizer.r,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Net {
    Trs(TrsNet),
    Dmg(DmgFormer),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub net: Net,
    pub store: ParamStore<f32>,
}

/// Per-pixel probabilities over the channel axis.
pub fn probabilities(logits: &Tensor<f32>, mode: LossMode) -> Tensor<f32> {
    match mode {
        LossMode::Multilabel => logits.map(|z| 1.0 / (1.0 + (-z).exp())),
        LossMode::Multiclass => {
            let [n, c, h, w] = logits.shape().dims();
            let hw = h * w;
            let mut out = logits.clone();
            let d = out.data_mut();
            for b in 0..n {
                for px in 0..hw {
                    let at = |k: usize| (b * c + k) * hw + px;
                    let m = (0..c).map(|k| d[at(k)]).fold(f32::NEG_INFINITY, f32::max);
                    let mut s = 0.0;
                    for k in 0..c {
                        let e = (d[at(k)] - m).exp();
                        d[at(k)] = e;
                        s += e;
                    }
                    for k in 0..c {
                        d[at(k)] /= s;
                    }
                }
            }
            out
        }
    }
}

/// Label mask from probabilities: an argmax plane for multiclass heads,
/// one `p > 0.5` plane per channel for multilabel heads.
pub fn decide(probs: &Tensor<f32>, mode: LossMode) -> Mask {
    let [n, c, h, w] = probs.shape().dims();
    assert_eq!(n, 1, "decide expects a single image");
    match mode {
        LossMode::Multiclass => Mask { channels: 1, height: h, width: w, data: crate::metrics::argmax(probs) },
        LossMode::Multilabel => {
            Mask { channels: c, height: h, width: w, data: probs.data().iter().map(|&p| u8::from(p > 0.5)).collect() }
        }
    }
}

/// Nearest-neighbour mask downsizing by an integer factor, matching the
/// tensor resize taps.
pub fn downsize_mask(m: &Mask, r: usize) -> Mask {
    if r == 1 {
        return m.clone();
    }
    let (h, w) = (m.height / r, m.width / r);
    let mut out = Mask::zeros(m.channels, h, w);
    for c in 0..m.channels {
        for y in 0..h {
            for x in 0..w {
                out.set(c, y, x, m.at(c, y * r, x * r));
            }
        }
    }
    out
}

impl Model {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let net = match (&spec.arch, spec.kind) {
            (Arch::DmgFormer(c), _) => Net::Dmg(DmgFormer::new(c, &mut store, seed)?),
            (Arch::TrsNet(c), kind) => {
                let variant = match kind {
                    ModelKind::TrsNet => TrsVariant::Compound,
                    ModelKind::BaselineLowRes => TrsVariant::LowRes,
                    ModelKind::BaselineUniform => TrsVariant::Uniform,
                    _ => TrsVariant::Internal,
                };
                Net::Trs(TrsNet::new(c, variant, &mut store, seed)?)
            }
        };
        Ok(Model { spec: spec.clone(), net, store })
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match &self.net {
            Net::Trs(n) => n.forward(g, x),
            Net::Dmg(n) => n.forward(g, x),
        }
    }

    /// Eval-mode logits of a batch the model accepts directly.
    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::inference(&self.store);
        let v = g.input(x.clone());
        let y = self.forward(&mut g, v)?;
        Ok(g.value(y).clone())
    }

    /// Grid for tiled models on a `width`×`height` image.
    pub fn grid(&self, width: usize, height: usize) -> Result<Option<GridSpec>> {
        self.spec.crop_size().map(|(cw, ch)| compute_grid(width, height, cw, ch)).transpose()
    }

    /// Probabilities `(1, n, H', W')` for one image; tiled models average
    /// `1 + ai` padding placements.
    pub fn predict_probs(&self, image: &Tensor<f32>, mode: LossMode, ai: usize) -> Result<Tensor<f32>> {
        let s = image.shape();
        if s.n() != 1 || s.c() != 3 {
            return Err(Error::invalid_shape("predict", format!("expected one RGB image, got {s}")));
        }
        match self.grid(s.w(), s.h())? {
            Some(grid) => {
                let f = |crop: &Tensor<f32>| self.logits(crop).map(|l| probabilities(&l, mode));
                augmented_inference(&f, image, &grid, ai)
            }
            None => {
                if ai > 0 {
                    return Err(Error::Config(format!("augmented inference needs a tiled model, not {}", self.kind())));
                }
                Ok(probabilities(&self.logits(image)?, mode))
            }
        }
    }

    pub fn predict(&self, image: &Tensor<f32>, mode: LossMode, ai: usize) -> Result<Mask> {
        Ok(decide(&self.predict_probs(image, mode, ai)?, mode))
    }
}
