//! Seeded scene collections, splits and their on-disk layout.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::netpbm::{read_image, read_mask, write_image, write_mask};
use super::scene::{generate, SceneParams, SceneSpec};
use super::{SegmentationSample, COMPONENT_CLASSES, DAMAGE_CLASSES, DAMAGE_TYPES, MASK_NAMES};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub component: Vec<String>,
    pub damage_state: Vec<String>,
    pub damage_type: Vec<String>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        let v = |s: &[&str]| s.iter().map(|x| x.to_string()).collect();
        Taxonomy { component: v(&COMPONENT_CLASSES), damage_state: v(&DAMAGE_CLASSES), damage_type: v(&DAMAGE_TYPES) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub params: SceneParams,
    pub taxonomy: Taxonomy,
    pub samples: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SegmentationSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut manifest = self.manifest.clone();
        manifest.samples = indices.iter().map(|&i| self.manifest.samples[i].clone()).collect();
        Dataset { manifest, samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }
}

/// Seed of scene `index` under `master`; each index gets its own stream.
pub fn scene_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64);
    rng.next_u64()
}

pub fn generate_dataset(count: usize, width: usize, height: usize, seed: u64, params: &SceneParams) -> Result<Dataset> {
    let samples = (0..count)
        .into_par_iter()
        .map(|i| generate(&SceneSpec::random(width, height, scene_seed(seed, i), params)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: DatasetManifest {
            version: MANIFEST_VERSION,
            seed,
            width,
            height,
            params: params.clone(),
            taxonomy: Taxonomy::default(),
            samples: (0..count).map(|i| format!("{i:05}")).collect(),
        },
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into train/val/test by `fractions`.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    mkdir(&dir.join("images"))?;
    for name in MASK_NAMES {
        mkdir(&dir.join("masks").join(name))?;
    }
    ds.samples.par_iter().zip(ds.manifest.samples.par_iter()).try_for_each(|(s, id)| -> Result<()> {
        write_image(dir.join("images").join(format!("{id}.ppm")), &s.image)?;
        for (name, m) in MASK_NAMES.iter().zip(s.masks()) {
            write_mask(dir.join("masks").join(name).join(format!("{id}.pgm")), m)?;
        }
        Ok(())
    })?;
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&ds.manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Config(format!("dataset manifest version {} is not {MANIFEST_VERSION}", manifest.version)));
    }
    let samples = manifest
        .samples
        .par_iter()
        .map(|id| -> Result<SegmentationSample> {
            let image = read_image(dir.join("images").join(format!("{id}.ppm")))?;
            let m = |name: &str| read_mask(dir.join("masks").join(name).join(format!("{id}.pgm")));
            let s = SegmentationSample {
                image,
                component: m("component")?,
                damage: m("damage")?,
                crack: m("crack")?,
                rebar: m("rebar")?,
                spall: m("spall")?,
            };
            let [_, _, h, w] = s.image.shape().0;
            if s.masks().iter().any(|m| (m.height, m.width) != (h, w)) {
                return Err(Error::InvalidArgument(format!("sample {id}: mask size differs from image")));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eighty_ten_ten_split_sizes() {
        let s = split(100, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let all = split(7, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(all.train.len(), 7);
        assert!(all.val.is_empty() && all.test.is_empty());
        assert_eq!(split(100, [0.8, 0.1, 0.1], 3).unwrap(), s);
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(split(10, [0.8, 0.1, 0.2], 0).is_err());
        assert!(split(10, [1.2, -0.1, -0.1], 0).is_err());
        assert!(split(10, [f64::NAN, 0.5, 0.5], 0).is_err());
    }

    #[test]
    fn generation_is_pure_and_round_trips_through_disk() {
        let p = SceneParams::default();
        let a = generate_dataset(3, 40, 32, 11, &p).unwrap();
        assert_eq!(a, generate_dataset(3, 40, 32, 11, &p).unwrap());
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&a, dir.path()).unwrap();
        assert!(dir.path().join("masks/spall/00002.pgm").exists());
        assert_eq!(load_dataset(dir.path()).unwrap(), a);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn splits_partition_the_indices(n in 0usize..300, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
                let f0 = a;
                let f1 = (1.0 - a) * b;
                let s = split(n, [f0, f1, 1.0 - f0 - f1], seed).unwrap();
                let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }
}
