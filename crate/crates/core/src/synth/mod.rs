//! Procedural façade scenes with aligned component, damage-state, crack,
//! rebar and spall masks, plus their file formats and augmentations.

pub mod augment;
pub mod dataset;
pub mod netpbm;
pub mod scene;

use serde::{Deserialize, Serialize};

pub use augment::{augment, AffineRange, AugmentPolicy};
pub use dataset::{generate_dataset, load_dataset, split, write_dataset, Dataset, DatasetManifest, Split};
pub use netpbm::{annotate, read_image, read_mask, write_image, write_mask};
pub use scene::{generate, Component, Damage, Rect, SceneParams, SceneSpec};

use crate::error::Result;
use crate::loss::LossMode;
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Component labels; index = class id (0 is background).
pub const COMPONENT_CLASSES: [&str; 8] =
    ["background", "wall", "beam", "column", "window-frame", "window-pane", "door", "slab"];

/// Damage-state labels; index = class id (0 is background).
pub const DAMAGE_CLASSES: [&str; 5] = ["background", "undamaged", "light", "moderate", "severe"];

/// Channels of the concurrent damage head.
pub const DAMAGE_TYPES: [&str; 3] = ["crack", "rebar", "spall"];

/// One rendered scene. Every mask is single-plane at the image size.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    /// `(1, 3, H, W)`, values `k / 255`.
    pub image: Tensor<f32>,
    pub component: Mask,
    pub damage: Mask,
    pub crack: Mask,
    pub rebar: Mask,
    pub spall: Mask,
}

impl SegmentationSample {
    pub fn height(&self) -> usize {
        self.component.height
    }

    pub fn width(&self) -> usize {
        self.component.width
    }

    pub fn masks(&self) -> [&Mask; 5] {
        [&self.component, &self.damage, &self.crack, &self.rebar, &self.spall]
    }

    pub fn masks_mut(&mut self) -> [&mut Mask; 5] {
        [&mut self.component, &mut self.damage, &mut self.crack, &mut self.rebar, &mut self.spall]
    }
}

/// Mask directory names, in [`SegmentationSample::masks`] order.
pub const MASK_NAMES: [&str; 5] = ["component", "damage", "crack", "rebar", "spall"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Components,
    DamageState,
    CrackRebarSpall,
}

impl Task {
    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Task::Components => &COMPONENT_CLASSES,
            Task::DamageState => &DAMAGE_CLASSES,
            Task::CrackRebarSpall => &DAMAGE_TYPES,
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn classes(self) -> usize {
        self.class_names().len()
    }

    pub fn mode(self) -> LossMode {
        match self {
            Task::CrackRebarSpall => LossMode::Multilabel,
            _ => LossMode::Multiclass,
        }
    }

    /// The training target: one label plane, or the three binary planes.
    pub fn target(self, s: &SegmentationSample) -> Mask {
        match self {
            Task::Components => s.component.clone(),
            Task::DamageState => s.damage.clone(),
            Task::CrackRebarSpall => {
                let mut data = s.crack.data.clone();
                data.extend_from_slice(&s.rebar.data);
                data.extend_from_slice(&s.spall.data);
                Mask { channels: 3, height: s.height(), width: s.width(), data }
            }
        }
    }

    pub fn parse(name: &str) -> Result<Task> {
        serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| crate::Error::Config(format!("unknown task {name:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_and_targets() {
        assert_eq!(Task::parse("crack-rebar-spall").unwrap(), Task::CrackRebarSpall);
        assert!(Task::parse("cracks").is_err());
        assert_eq!(Task::Components.classes(), 8);
        assert_eq!(Task::DamageState.classes(), 5);
        let s = generate(&SceneSpec::random(64, 64, 3, &SceneParams::default())).unwrap();
        let t = Task::CrackRebarSpall.target(&s);
        assert_eq!(t.channels, 3);
        assert_eq!(t.plane(0), &s.crack.data[..]);
        assert_eq!(t.plane(2), &s.spall.data[..]);
        assert_eq!(Task::Components.target(&s), s.component);
    }
}
