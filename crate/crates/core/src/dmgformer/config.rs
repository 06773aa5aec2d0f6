use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwinStageConfig {
    pub dim: usize,
    /// Blocks in the stage; odd-indexed blocks use the shifted window grid.
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmgFormerConfig {
    /// Square input side.
    pub crop: usize,
    pub patch_size: usize,
    pub stages: Vec<SwinStageConfig>,
    /// Output width of each decoder block, deepest first. One block per
    /// stage.
    pub decoder_widths: Vec<usize>,
    /// Hidden width of the block MLP as a multiple of the token dim.
    pub mlp_ratio: usize,
    pub out_channels: usize,
}

impl DmgFormerConfig {
    /// Patch 2, five stages of two blocks, window 7, shift 3.
    pub fn toy() -> Self {
        let dims = [24, 48, 96, 192, 384];
        let heads = [1, 2, 4, 8, 16];
        DmgFormerConfig {
            crop: 224,
            patch_size: 2,
            stages: dims
                .iter()
                .zip(heads)
                .map(|(&dim, heads)| SwinStageConfig { dim, depth: 2, heads, window: 7, shift: 3 })
                .collect(),
            decoder_widths: vec![192, 96, 48, 24, 16],
            mlp_ratio: 4,
            out_channels: 3,
        }
    }

    /// 16×16 input, window 2, three stages; small enough for finite
    /// differences.
    pub fn grad_toy() -> Self {
        let stage = |dim, heads| SwinStageConfig { dim, depth: 2, heads, window: 2, shift: 1 };
        DmgFormerConfig {
            crop: 16,
            patch_size: 2,
            stages: vec![stage(4, 1), stage(8, 2), stage(16, 2)],
            decoder_widths: vec![8, 4, 4],
            mlp_ratio: 2,
            out_channels: 3,
        }
    }

    /// Token-grid side of each stage.
    pub fn stage_resolutions(&self) -> Vec<usize> {
        let base = self.crop / self.patch_size.max(1);
        (0..self.stages.len()).map(|i| base >> i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.crop % self.patch_size != 0 {
            return bad(format!("crop {} not divisible by patch size {}", self.crop, self.patch_size));
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.decoder_widths.len() != self.stages.len() {
            return bad(format!(
                "{} decoder blocks for {} stages",
                self.decoder_widths.len(),
                self.stages.len()
            ));
        }
        if self.mlp_ratio == 0 || self.out_channels == 0 || self.decoder_widths.contains(&0) {
            return bad("mlp ratio, output channels and decoder widths must be positive".into());
        }
        let base = self.crop / self.patch_size;
        if base % (1 << (self.stages.len() - 1)) != 0 {
            return bad(format!("token grid {base} cannot be halved {} times", self.stages.len() - 1));
        }
        for (i, (s, res)) in self.stages.iter().zip(self.stage_resolutions()).enumerate() {
            if s.heads == 0 || s.dim % s.heads != 0 {
                return bad(format!("stage {i}: dim {} not divisible by {} heads", s.dim, s.heads));
            }
            if s.window == 0 || s.shift != s.window / 2 {
                return bad(format!("stage {i}: shift {} must be half of window {}", s.shift, s.window));
            }
            if res % s.window.min(res) != 0 {
                return bad(format!("stage {i}: resolution {res} not divisible by window {}", s.window));
            }
            if i > 0 && s.dim != 2 * self.stages[i - 1].dim {
                return bad(format!("stage {i}: patch merging doubles dim, expected {}", 2 * self.stages[i - 1].dim));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_resolutions() {
        let c = DmgFormerConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.crop / c.patch_size, 112);
        assert_eq!(c.stage_resolutions(), vec![112, 56, 28, 14, 7]);
        DmgFormerConfig::grad_toy().validate().unwrap();
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = DmgFormerConfig::toy();
        c.stages[2].heads = 5;
        assert!(c.validate().is_err());
        let mut c = DmgFormerConfig::toy();
        c.stages[0].shift = 2;
        assert!(c.validate().is_err());
        let mut c = DmgFormerConfig::toy();
        c.stages[0].window = 5;
        c.stages[0].shift = 2;
        assert!(c.validate().is_err());
        let mut c = DmgFormerConfig::toy();
        c.decoder_widths.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn serde_round_trip() {
        let c = DmgFormerConfig::toy();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<DmgFormerConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<DmgFormerConfig>(&s.replace("\"crop\"", "\"crap\"")).is_err());
    }
}
