//! Training-time augmentation. Geometric transforms are shared by the image
//! and all masks; masks are resampled nearest-neighbour.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SegmentationSample;
use crate::mask::Mask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineRange {
    /// Maximum absolute rotation in degrees.
    pub rotate: f32,
    /// Maximum relative scale change.
    pub scale: f32,
    /// Maximum shift as a fraction of each side.
    pub translate: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub hflip: f64,
    /// Maximum additive brightness change.
    pub brightness: f32,
    /// Maximum relative contrast change.
    pub contrast: f32,
    /// Maximum hue rotation in radians.
    pub hue: f32,
    pub affine: Option<AffineRange>,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy { hflip: 0.0, brightness: 0.0, contrast: 0.0, hue: 0.0, affine: None }
    }

    pub fn photometric_only(&self) -> Self {
        AugmentPolicy { hflip: 0.0, affine: None, ..self.clone() }
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            hflip: 0.5,
            brightness: 0.08,
            contrast: 0.1,
            hue: 0.05,
            affine: Some(AffineRange { rotate: 5.0, scale: 0.05, translate: 0.03 }),
        }
    }
}

fn sym(rng: &mut ChaCha8Rng, r: f32) -> f32 {
    if r > 0.0 {
        rng.gen_range(-r..=r)
    } else {
        0.0
    }
}

pub fn hflip(s: &SegmentationSample) -> SegmentationSample {
    let [_, c, h, w] = s.image.shape().0;
    let src = s.image.data();
    let image = Tensor::from_fn([1, c, h, w], |[_, ch, y, x]| src[(ch * h + y) * w + (w - 1 - x)]);
    SegmentationSample {
        image,
        component: s.component.flip_x(),
        damage: s.damage.flip_x(),
        crack: s.crack.flip_x(),
        rebar: s.rebar.flip_x(),
        spall: s.spall.flip_x(),
    }
}

/// Output-to-source map for a rotation/scale about the centre plus shift.
#[derive(Clone, Copy)]
struct Affine {
    m: [f32; 4],
    t: [f32; 2],
    c: [f32; 2],
}

impl Affine {
    fn new(rotate_deg: f32, scale: f32, tx: f32, ty: f32, w: usize, h: usize) -> Self {
        let (s, c) = rotate_deg.to_radians().sin_cos();
        // Inverse of scale * R(θ) is R(-θ) / scale.
        let k = 1.0 / scale;
        Affine { m: [c * k, s * k, -s * k, c * k], t: [tx, ty], c: [w as f32 / 2.0, h as f32 / 2.0] }
    }

    fn source(&self, x: f32, y: f32) -> (f32, f32) {
        let (dx, dy) = (x - self.c[0] - self.t[0], y - self.c[1] - self.t[1]);
        (self.m[0] * dx + self.m[1] * dy + self.c[0], self.m[2] * dx + self.m[3] * dy + self.c[1])
    }
}

fn warp_mask(m: &Mask, a: &Affine) -> Mask {
    let (w, h) = (m.width, m.height);
    let mut out = Mask::zeros(m.channels, h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = a.source(x as f32 + 0.5, y as f32 + 0.5);
            if sx < 0.0 || sy < 0.0 {
                continue;
            }
            let (ix, iy) = (sx as usize, sy as usize);
            if ix < w && iy < h {
                for c in 0..m.channels {
                    out.set(c, y, x, m.at(c, iy, ix));
                }
            }
        }
    }
    out
}

fn warp_image(img: &Tensor<f32>, a: &Affine) -> Tensor<f32> {
    let [_, ch, h, w] = img.shape().0;
    let d = img.data();
    let px = |c: usize, y: i64, x: i64| -> f32 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            d[(c * h + y as usize) * w + x as usize]
        }
    };
    let mut out = Tensor::zeros([1, ch, h, w]);
    let o = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = a.source(x as f32 + 0.5, y as f32 + 0.5);
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for c in 0..ch {
                let top = px(c, y0, x0) * (1.0 - ax) + px(c, y0, x0 + 1) * ax;
                let bot = px(c, y0 + 1, x0) * (1.0 - ax) + px(c, y0 + 1, x0 + 1) * ax;
                o[(c * h + y) * w + x] = top * (1.0 - ay) + bot * ay;
            }
        }
    }
    out
}

fn color_jitter(img: &mut Tensor<f32>, brightness: f32, contrast: f32, hue: f32) {
    let [_, _, h, w] = img.shape().0;
    let plane = h * w;
    let d = img.data_mut();
    let mean = d.iter().map(|&v| v as f64).sum::<f64>() as f32 / d.len() as f32;
    let (s, c) = hue.sin_cos();
    for i in 0..plane {
        let (r, g, b) = (d[i], d[plane + i], d[2 * plane + i]);
        // Hue rotation in YIQ space.
        let yy = 0.299 * r + 0.587 * g + 0.114 * b;
        let ii = 0.596 * r - 0.274 * g - 0.322 * b;
        let qq = 0.211 * r - 0.523 * g + 0.312 * b;
        let (ii, qq) = (ii * c - qq * s, ii * s + qq * c);
        let rgb = [
            yy + 0.956 * ii + 0.621 * qq,
            yy - 0.272 * ii - 0.647 * qq,
            yy - 1.106 * ii + 1.703 * qq,
        ];
        for (ch, v) in rgb.into_iter().enumerate() {
            let v = (v - mean) * (1.0 + contrast) + mean + brightness;
            d[ch * plane + i] = v.clamp(0.0, 1.0);
        }
    }
}

/// Applies a random draw from `policy`. A policy with all ranges zero
/// returns the sample unchanged.
pub fn augment(sample: &SegmentationSample, policy: &AugmentPolicy, seed: u64) -> SegmentationSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = if policy.hflip > 0.0 && rng.gen_bool(policy.hflip.min(1.0)) { hflip(sample) } else { sample.clone() };
    if let Some(a) = &policy.affine {
        let (w, h) = (s.width(), s.height());
        let rot = sym(&mut rng, a.rotate);
        let scale = 1.0 + sym(&mut rng, a.scale);
        let tx = sym(&mut rng, a.translate) * w as f32;
        let ty = sym(&mut rng, a.translate) * h as f32;
        if rot != 0.0 || scale != 1.0 || tx != 0.0 || ty != 0.0 {
            let t = Affine::new(rot, scale, tx, ty, w, h);
            s.image = warp_image(&s.image, &t);
            for m in s.masks_mut() {
                *m = warp_mask(m, &t);
            }
        }
    }
    let b = sym(&mut rng, policy.brightness);
    let c = sym(&mut rng, policy.contrast);
    let hue = sym(&mut rng, policy.hue);
    if b != 0.0 || c != 0.0 || hue != 0.0 {
        color_jitter(&mut s.image, b, c, hue);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SceneParams, SceneSpec};

    fn sample(seed: u64) -> SegmentationSample {
        generate(&SceneSpec::random(64, 48, seed, &SceneParams::default())).unwrap()
    }

    #[test]
    fn identity_policy_is_a_no_op() {
        let s = sample(1);
        assert_eq!(augment(&s, &AugmentPolicy::identity(), 9), s);
        let zero = AugmentPolicy {
            affine: Some(AffineRange { rotate: 0.0, scale: 0.0, translate: 0.0 }),
            ..AugmentPolicy::identity()
        };
        assert_eq!(augment(&s, &zero, 9), s);
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = sample(2);
        assert_ne!(hflip(&s), s);
        assert_eq!(hflip(&hflip(&s)), s);
        let always = AugmentPolicy { hflip: 1.0, ..AugmentPolicy::identity() };
        assert_eq!(augment(&augment(&s, &always, 1), &always, 2), s);
    }

    #[test]
    fn color_jitter_leaves_masks_untouched() {
        let s = sample(3);
        let p = AugmentPolicy { brightness: 0.2, contrast: 0.3, hue: 0.5, ..AugmentPolicy::identity() };
        let a = augment(&s, &p, 4);
        assert_ne!(a.image, s.image);
        assert_eq!(a.masks(), s.masks());
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_hue_rotation_preserves_colour() {
        let s = sample(4);
        let mut img = s.image.clone();
        color_jitter(&mut img, 0.0, 0.0, 0.0);
        for (a, b) in img.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() < 2e-3, "{a} vs {b}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn geometry_introduces_no_new_classes(seed in any::<u64>(), aug in any::<u64>()) {
                let s = sample(seed);
                let p = AugmentPolicy {
                    affine: Some(AffineRange { rotate: 20.0, scale: 0.2, translate: 0.1 }),
                    ..AugmentPolicy::default()
                };
                let a = augment(&s, &p, aug);
                for (m, orig) in a.masks().iter().zip(s.masks()) {
                    for &v in &m.data {
                        prop_assert!(v == 0 || orig.data.contains(&v));
                    }
                }
                for px in 0..a.crack.data.len() {
                    if a.crack.data[px] == 1 {
                        prop_assert!(a.component.data[px] != 0);
                    }
                }
            }
        }
    }
}
