use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::ResizeMode;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResizerConfig {
    /// Down/up factor of the learnable resizers.
    pub r: usize,
    pub kernel: usize,
    /// Conv widths after the unshuffle; the last is the low-resolution
    /// image channel count fed to the internal network.
    pub dcn_channels: Vec<usize>,
    /// Conv widths before the shuffle; the last must be `n * r * r`.
    pub ucn_channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitAttnConfig {
    pub radix: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    /// Bottleneck reduction of the attention MLP.
    pub reduction: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetPPConfig {
    /// Nesting depth; equals the encoder stage count.
    pub depth: usize,
    /// Conv width of decoder row `i` (nodes `D-i,*`).
    pub widths: Vec<usize>,
    /// Channels of the feature map handed to the head or upsampler.
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrsNetConfig {
    pub resizer: ResizerConfig,
    pub encoder: SplitAttnConfig,
    pub decoder: UNetPPConfig,
    /// Output classes, background included.
    pub n_classes: usize,
    /// Interpolation of the fixed resizers in the uniform baseline.
    #[serde(default = "default_uniform_mode")]
    pub uniform_mode: ResizeMode,
}

fn default_uniform_mode() -> ResizeMode {
    ResizeMode::Bilinear
}

impl TrsNetConfig {
    /// Desk-scale configuration with `n_classes` outputs.
    pub fn toy(n_classes: usize) -> Self {
        let r = 4;
        TrsNetConfig {
            resizer: ResizerConfig {
                r,
                kernel: 3,
                dcn_channels: vec![32, 32, 3],
                ucn_channels: vec![32, 32, n_classes * r * r],
            },
            encoder: SplitAttnConfig {
                radix: 2,
                stem_channels: 8,
                stage_channels: vec![16, 32, 64, 128],
                stage_depths: vec![1, 1, 1, 1],
                reduction: 4,
            },
            decoder: UNetPPConfig {
                depth: 4,
                widths: vec![8, 16, 32, 64],
                out_channels: 8,
            },
            n_classes,
            uniform_mode: ResizeMode::Bilinear,
        }
    }

    /// A smaller variant for finite-difference checks.
    pub fn tiny(n_classes: usize) -> Self {
        let mut c = Self::toy(n_classes);
        c.resizer.dcn_channels = vec![4, 4, 3];
        c.resizer.ucn_channels = vec![4, 4, n_classes * 16];
        c.encoder.stem_channels = 4;
        c.encoder.stage_channels = vec![4, 4, 8, 8];
        c.decoder.widths = vec![4, 4, 4, 4];
        c.decoder.out_channels = 4;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let rz = &self.resizer;
        if rz.r < 1 || rz.kernel % 2 == 0 {
            return bad(format!("resizer r={} kernel={} (kernel must be odd)", rz.r, rz.kernel));
        }
        if rz.dcn_channels.len() != 3 || rz.ucn_channels.len() != 3 {
            return bad("resizers need exactly three conv widths each".into());
        }
        let want = self.n_classes * rz.r * rz.r;
        if rz.ucn_channels[2] != want {
            return bad(format!("last upsampler width {} must equal n*r^2 = {want}", rz.ucn_channels[2]));
        }
        let e = &self.encoder;
        if e.radix < 2 {
            return bad(format!("radix must be >= 2, got {}", e.radix));
        }
        if e.stage_channels.is_empty() || e.stage_channels.len() != e.stage_depths.len() {
            return bad("stage_channels and stage_depths must be non-empty and equally long".into());
        }
        if self.decoder.depth != e.stage_channels.len() || self.decoder.widths.len() != self.decoder.depth {
            return bad(format!(
                "decoder depth {} / widths {} must match {} encoder stages",
                self.decoder.depth,
                self.decoder.widths.len(),
                e.stage_channels.len()
            ));
        }
        if self.n_classes < 1 {
            return bad("n_classes must be positive".into());
        }
        Ok(())
    }

    /// Spatial multiple the internal network pads its input to.
    pub fn internal_multiple(&self) -> usize {
        1 << (self.decoder.depth + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_configs_validate() {
        for n in [3, 5, 8] {
            TrsNetConfig::toy(n).validate().unwrap();
            TrsNetConfig::tiny(n).validate().unwrap();
        }
    }

    #[test]
    fn ucn_width_must_match_classes() {
        let mut c = TrsNetConfig::toy(8);
        c.resizer.ucn_channels[2] = 100;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn radix_one_rejected() {
        let mut c = TrsNetConfig::toy(8);
        c.encoder.radix = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(TrsNetConfig::toy(8)).unwrap();
        v["resizer"]["bogus"] = 1.into();
        assert!(serde_json::from_value::<TrsNetConfig>(v).is_err());
    }
}
