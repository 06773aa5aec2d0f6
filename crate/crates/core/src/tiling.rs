//! Crop-grid geometry, zero-padding placements, training crop jitter,
//! reassembly and padding-averaged inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::ops::{crop_hw, pad_hw};
use crate::tensor::{Scalar, Tensor};

/// Default jitter range in pixels.
pub const DEFAULT_MAX_SHIFT: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub crop_w: usize,
    pub crop_h: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_x: usize,
    pub pad_y: usize,
}

impl GridSpec {
    pub fn padded_width(&self) -> usize {
        self.cols * self.crop_w
    }

    pub fn padded_height(&self) -> usize {
        self.rows * self.crop_h
    }

    pub fn tiles(&self) -> usize {
        self.rows * self.cols
    }

    /// `(top, left)` of tile `i`, row-major.
    pub fn tile_origin(&self, i: usize) -> (usize, usize) {
        ((i / self.cols) * self.crop_h, (i % self.cols) * self.crop_w)
    }
}

pub fn compute_grid(width: usize, height: usize, crop_w: usize, crop_h: usize) -> Result<GridSpec> {
    if width == 0 || height == 0 || crop_w == 0 || crop_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid needs positive sizes, got image {width}x{height}, crop {crop_w}x{crop_h}"
        )));
    }
    let cols = width.div_ceil(crop_w);
    let rows = height.div_ceil(crop_h);
    Ok(GridSpec {
        width,
        height,
        crop_w,
        crop_h,
        rows,
        cols,
        pad_x: cols * crop_w - width,
        pad_y: rows * crop_h - height,
    })
}

/// Where the padding of one axis goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// All padding before the content.
    Start,
    /// `floor(P/2)` before, `ceil(P/2)` after.
    Middle,
    /// All padding after the content.
    End,
}

impl PadMode {
    pub const ALL: [PadMode; 3] = [PadMode::Start, PadMode::Middle, PadMode::End];

    /// Padding placed before the content.
    pub fn before(self, total: usize) -> usize {
        match self {
            PadMode::Start => total,
            PadMode::Middle => total / 2,
            PadMode::End => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PaddingVariant {
    pub x: PadMode,
    pub y: PadMode,
}

impl PaddingVariant {
    /// Content at the origin, padding right and bottom.
    pub const BASELINE: PaddingVariant = PaddingVariant { x: PadMode::End, y: PadMode::End };

    /// All nine placements, row-major over `(x, y)`.
    pub fn all() -> Vec<PaddingVariant> {
        PadMode::ALL
            .iter()
            .flat_map(|&x| PadMode::ALL.iter().map(move |&y| PaddingVariant { x, y }))
            .collect()
    }

    /// Baseline followed by the first `k` other placements of [`Self::all`].
    pub fn schedule(k: usize) -> Result<Vec<PaddingVariant>> {
        if k > 8 {
            return Err(Error::InvalidArgument(format!("at most 8 extra padding variants, got {k}")));
        }
        let mut v = vec![Self::BASELINE];
        v.extend(Self::all().into_iter().filter(|&p| p != Self::BASELINE).take(k));
        Ok(v)
    }

    /// `(top, left)` offset of the content on the padded canvas.
    pub fn offset(&self, grid: &GridSpec) -> (usize, usize) {
        (self.y.before(grid.pad_y), self.x.before(grid.pad_x))
    }
}

fn check_image<T: Scalar>(image: &Tensor<T>, grid: &GridSpec) -> Result<()> {
    let s = image.shape();
    if s.h() != grid.height || s.w() != grid.width {
        return Err(Error::invalid_shape(
            "tiling",
            format!("image {s} does not match grid {}x{}", grid.width, grid.height),
        ));
    }
    Ok(())
}

pub fn pad_image<T: Scalar>(image: &Tensor<T>, grid: &GridSpec, variant: PaddingVariant) -> Result<Tensor<T>> {
    check_image(image, grid)?;
    let (top, left) = variant.offset(grid);
    Ok(pad_hw(image, top, grid.pad_y - top, left, grid.pad_x - left))
}

pub fn pad_mask(mask: &Mask, grid: &GridSpec, variant: PaddingVariant) -> Result<Mask> {
    let (top, left) = variant.offset(grid);
    if mask.height != grid.height || mask.width != grid.width {
        return Err(Error::InvalidArgument("mask does not match grid".into()));
    }
    mask.pad(top, left, grid.padded_height(), grid.padded_width())
}

fn check_padded(h: usize, w: usize, grid: &GridSpec) -> Result<()> {
    if h != grid.padded_height() || w != grid.padded_width() {
        return Err(Error::invalid_shape(
            "crop_grid",
            format!("padded {w}x{h}, grid expects {}x{}", grid.padded_width(), grid.padded_height()),
        ));
    }
    Ok(())
}

/// Row-major tiles of a padded image.
pub fn crop_grid<T: Scalar>(padded: &Tensor<T>, grid: &GridSpec) -> Result<Vec<Tensor<T>>> {
    check_padded(padded.shape().h(), padded.shape().w(), grid)?;
    (0..grid.tiles())
        .map(|i| {
            let (top, left) = grid.tile_origin(i);
            crop_hw(padded, top, left, grid.crop_h, grid.crop_w)
        })
        .collect()
}

pub fn crop_grid_mask(padded: &Mask, grid: &GridSpec) -> Result<Vec<Mask>> {
    check_padded(padded.height, padded.width, grid)?;
    (0..grid.tiles())
        .map(|i| {
            let (top, left) = grid.tile_origin(i);
            padded.crop(top, left, grid.crop_h, grid.crop_w)
        })
        .collect()
}

/// Places tiles on the padded canvas and strips the variant's margins.
pub fn reassemble<T: Scalar>(crops: &[Tensor<T>], grid: &GridSpec, variant: PaddingVariant) -> Result<Tensor<T>> {
    if crops.len() != grid.tiles() {
        return Err(Error::InvalidArgument(format!("{} crops for a {}-tile grid", crops.len(), grid.tiles())));
    }
    let [n, c, _, _] = crops[0].shape().dims();
    let mut canvas = Tensor::zeros([n, c, grid.padded_height(), grid.padded_width()]);
    let (pw, ph) = (grid.padded_width(), grid.padded_height());
    for (i, crop) in crops.iter().enumerate() {
        if crop.shape().dims() != [n, c, grid.crop_h, grid.crop_w] {
            return Err(Error::shape("reassemble", crop.shape(), crops[0].shape()));
        }
        let (top, left) = grid.tile_origin(i);
        let dst = canvas.data_mut();
        for p in 0..n * c {
            for y in 0..grid.crop_h {
                let s = (p * grid.crop_h + y) * grid.crop_w;
                let d = (p * ph + top + y) * pw + left;
                dst[d..d + grid.crop_w].copy_from_slice(&crop.data()[s..s + grid.crop_w]);
            }
        }
    }
    let (top, left) = variant.offset(grid);
    crop_hw(&canvas, top, left, grid.height, grid.width)
}

pub fn reassemble_mask(crops: &[Mask], grid: &GridSpec, variant: PaddingVariant) -> Result<Mask> {
    if crops.len() != grid.tiles() {
        return Err(Error::InvalidArgument(format!("{} crops for a {}-tile grid", crops.len(), grid.tiles())));
    }
    let c = crops[0].channels;
    let mut canvas = Mask::zeros(c, grid.padded_height(), grid.padded_width());
    for (i, crop) in crops.iter().enumerate() {
        let (top, left) = grid.tile_origin(i);
        for ch in 0..c {
            for y in 0..grid.crop_h {
                for x in 0..grid.crop_w {
                    canvas.set(ch, top + y, left + x, crop.at(ch, y, x));
                }
            }
        }
    }
    let (top, left) = variant.offset(grid);
    canvas.crop(top, left, grid.height, grid.width)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JitterSpec {
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for JitterSpec {
    fn default() -> Self {
        JitterSpec { max_shift: DEFAULT_MAX_SHIFT, seed: 0 }
    }
}

/// Tile origins, each moved by independent uniform offsets in
/// `[-max_shift, max_shift]` and clamped to the canvas.
pub fn jitter_origins(grid: &GridSpec, max_shift: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let max_top = (grid.padded_height() - grid.crop_h) as i64;
    let max_left = (grid.padded_width() - grid.crop_w) as i64;
    let m = max_shift as i64;
    (0..grid.tiles())
        .map(|i| {
            let (top, left) = grid.tile_origin(i);
            let (dy, dx) = if m > 0 { (rng.gen_range(-m..=m), rng.gen_range(-m..=m)) } else { (0, 0) };
            (
                (top as i64 + dy).clamp(0, max_top) as usize,
                (left as i64 + dx).clamp(0, max_left) as usize,
            )
        })
        .collect()
}

/// Jittered training crops of a padded image and its padded mask.
pub fn jitter_crops<T: Scalar>(
    padded: &Tensor<T>,
    mask: &Mask,
    grid: &GridSpec,
    jitter: &JitterSpec,
) -> Result<Vec<(Tensor<T>, Mask)>> {
    check_padded(padded.shape().h(), padded.shape().w(), grid)?;
    check_padded(mask.height, mask.width, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(jitter.seed);
    jitter_origins(grid, jitter.max_shift, &mut rng)
        .into_iter()
        .map(|(top, left)| {
            Ok((
                crop_hw(padded, top, left, grid.crop_h, grid.crop_w)?,
                mask.crop(top, left, grid.crop_h, grid.crop_w)?,
            ))
        })
        .collect()
}

/// Settings that reproduce an augmented-inference output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedInference {
    pub grid: GridSpec,
    pub variants: Vec<PaddingVariant>,
}

/// Per-pixel mean over padding placements of the crop-wise probabilities
/// of `model`. `model` maps a `(N, C, h_c, w_c)` crop to `(N, n, h_c, w_c)`
/// probabilities. Crops are evaluated in parallel; the reduction order is
/// fixed.
pub fn augmented_inference<F>(model: &F, image: &Tensor<f32>, grid: &GridSpec, k: usize) -> Result<Tensor<f32>>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    augmented_inference_with(model, image, grid, &PaddingVariant::schedule(k)?)
}

/// As [`augmented_inference`] over an explicit variant list.
pub fn augmented_inference_with<F>(
    model: &F,
    image: &Tensor<f32>,
    grid: &GridSpec,
    variants: &[PaddingVariant],
) -> Result<Tensor<f32>>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    if variants.is_empty() {
        return Err(Error::InvalidArgument("no padding variants".into()));
    }
    let mut acc: Option<Tensor<f64>> = None;
    for &v in variants {
        let padded = pad_image(image, grid, v)?;
        let crops = crop_grid(&padded, grid)?;
        let probs = crops.par_iter().map(model).collect::<Result<Vec<_>>>()?;
        let full = reassemble(&probs, grid, v)?.cast::<f64>();
        acc = Some(match acc {
            None => full,
            Some(mut a) => {
                for (x, y) in a.data_mut().iter_mut().zip(full.data()) {
                    *x += y;
                }
                a
            }
        });
    }
    let n = variants.len() as f64;
    Ok(acc.expect("non-empty").map(|v| v / n).cast())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([1, c, h, w], |[_, c, y, x]| (1 + c * 1000 + y * 37 + x) as f32)
    }

    #[test]
    fn full_hd_grids() {
        let g = compute_grid(1920, 1080, 224, 224).unwrap();
        assert_eq!((g.cols, g.rows, g.pad_x, g.pad_y), (9, 5, 96, 40));
        let g = compute_grid(1920, 1080, 480, 270).unwrap();
        assert_eq!((g.cols, g.rows, g.pad_x, g.pad_y), (4, 4, 0, 0));
        let g = compute_grid(224, 224, 224, 224).unwrap();
        assert_eq!((g.cols, g.rows, g.pad_x, g.pad_y), (1, 1, 0, 0));
        assert!(compute_grid(0, 10, 4, 4).is_err());
    }

    #[test]
    fn end_end_keeps_content_at_origin() {
        let img = ramp(1, 1080, 1920);
        let g = compute_grid(1920, 1080, 224, 224).unwrap();
        let p = pad_image(&img, &g, PaddingVariant::BASELINE).unwrap();
        assert_eq!(p.shape().dims(), [1, 1, 1120, 2016]);
        assert_eq!(p.at(0, 0, 0, 0), img.at(0, 0, 0, 0));
        assert_eq!(p.at(0, 0, 1079, 1919), img.at(0, 0, 1079, 1919));
        assert!((1080..1120).all(|y| p.at(0, 0, y, 5) == 0.0));
        assert!((1920..2016).all(|x| p.at(0, 0, 7, x) == 0.0));
    }

    #[test]
    fn middle_splits_evenly() {
        let g = compute_grid(1920, 1080, 224, 224).unwrap();
        let v = PaddingVariant { x: PadMode::Middle, y: PadMode::Middle };
        assert_eq!(v.offset(&g), (20, 48));
        assert_eq!(PadMode::Middle.before(7), 3);
    }

    #[test]
    fn zero_padding_makes_variants_identical() {
        let img = ramp(2, 8, 12);
        let g = compute_grid(12, 8, 4, 4).unwrap();
        let base = pad_image(&img, &g, PaddingVariant::BASELINE).unwrap();
        for v in PaddingVariant::all() {
            assert_eq!(pad_image(&img, &g, v).unwrap(), base);
        }
    }

    #[test]
    fn schedule_order() {
        let all = PaddingVariant::all();
        assert_eq!(all.len(), 9);
        assert_eq!(all[8], PaddingVariant::BASELINE);
        let s = PaddingVariant::schedule(8).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(s[0], PaddingVariant::BASELINE);
        assert_eq!(s[1], PaddingVariant { x: PadMode::Start, y: PadMode::Start });
        assert_eq!(PaddingVariant::schedule(4).unwrap()[4], PaddingVariant { x: PadMode::Middle, y: PadMode::Start });
        assert!(PaddingVariant::schedule(9).is_err());
    }

    #[test]
    fn crops_tile_the_canvas() {
        let g = compute_grid(1920, 1080, 224, 224).unwrap();
        let padded = Tensor::<f32>::zeros([1, 1, g.padded_height(), g.padded_width()]);
        let crops = crop_grid(&padded, &g).unwrap();
        assert_eq!(crops.len(), 45);
        assert!(crops.iter().all(|c| c.shape().dims() == [1, 1, 224, 224]));
        let mut cover = vec![0u8; g.padded_height() * g.padded_width()];
        for i in 0..g.tiles() {
            let (t, l) = g.tile_origin(i);
            for y in t..t + 224 {
                for x in l..l + 224 {
                    cover[y * g.padded_width() + x] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&c| c == 1));
        let bad = Tensor::<f32>::zeros([1, 1, 1080, 1920]);
        assert!(crop_grid(&bad, &g).is_err());
    }

    #[test]
    fn single_tile_is_the_padded_image() {
        let img = ramp(3, 5, 6);
        let g = compute_grid(6, 5, 8, 8).unwrap();
        let p = pad_image(&img, &g, PaddingVariant::BASELINE).unwrap();
        assert_eq!(crop_grid(&p, &g).unwrap(), vec![p]);
    }

    #[test]
    fn round_trip_every_variant() {
        for (w, h, cw, ch) in [(13, 9, 4, 5), (20, 7, 6, 3), (8, 8, 8, 8), (5, 11, 2, 4)] {
            let img = ramp(2, h, w);
            let mask = Mask::from_vec(1, h, w, (0..h * w).map(|i| (i * 7 % 251) as u8).collect()).unwrap();
            let g = compute_grid(w, h, cw, ch).unwrap();
            for v in PaddingVariant::all() {
                let crops = crop_grid(&pad_image(&img, &g, v).unwrap(), &g).unwrap();
                assert_eq!(reassemble(&crops, &g, v).unwrap(), img);
                let mc = crop_grid_mask(&pad_mask(&mask, &g, v).unwrap(), &g).unwrap();
                assert_eq!(reassemble_mask(&mc, &g, v).unwrap(), mask);
            }
        }
    }

    #[test]
    fn mismatched_variant_breaks_round_trip() {
        let img = ramp(1, 9, 13);
        let g = compute_grid(13, 9, 4, 4).unwrap();
        let all = PaddingVariant::all();
        for &a in &all {
            for &b in &all {
                let crops = crop_grid(&pad_image(&img, &g, a).unwrap(), &g).unwrap();
                let back = reassemble(&crops, &g, b).unwrap();
                assert_eq!(back == img, a == b, "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn wrong_crop_count_rejected() {
        let g = compute_grid(8, 8, 4, 4).unwrap();
        let crops = vec![Tensor::<f32>::zeros([1, 1, 4, 4]); 3];
        assert!(reassemble(&crops, &g, PaddingVariant::BASELINE).is_err());
    }

    #[test]
    fn zero_jitter_equals_grid_and_seed_is_reproducible() {
        let g = compute_grid(30, 20, 8, 8).unwrap();
        let img = pad_image(&ramp(1, 20, 30), &g, PaddingVariant::BASELINE).unwrap();
        let mask = Mask::zeros(1, g.padded_height(), g.padded_width());
        let plain = crop_grid(&img, &g).unwrap();
        let j = jitter_crops(&img, &mask, &g, &JitterSpec { max_shift: 0, seed: 3 }).unwrap();
        assert_eq!(j.into_iter().map(|(c, _)| c).collect::<Vec<_>>(), plain);
        let spec = JitterSpec { max_shift: 5, seed: 9 };
        assert_eq!(jitter_crops(&img, &mask, &g, &spec).unwrap(), jitter_crops(&img, &mask, &g, &spec).unwrap());
    }

    #[test]
    fn jittered_image_and_mask_windows_agree() {
        let g = compute_grid(30, 20, 8, 8).unwrap();
        let img = pad_image(&ramp(1, 20, 30), &g, PaddingVariant::BASELINE).unwrap();
        let m = Mask::from_vec(1, 24, 32, img.data().iter().map(|&v| (v as u32 % 256) as u8).collect()).unwrap();
        for (c, mc) in jitter_crops(&img, &m, &g, &JitterSpec { max_shift: 6, seed: 1 }).unwrap() {
            let expect: Vec<u8> = c.data().iter().map(|&v| (v as u32 % 256) as u8).collect();
            assert_eq!(mc.data, expect);
        }
    }

    #[test]
    fn constant_model_gives_constant_output() {
        let img = ramp(3, 10, 14);
        let g = compute_grid(14, 10, 4, 4).unwrap();
        let model = |x: &Tensor<f32>| {
            let s = x.shape();
            Ok(Tensor::full([s.n(), 2, s.h(), s.w()], 0.3))
        };
        for k in [0, 4, 8] {
            let y = augmented_inference(&model, &img, &g, k).unwrap();
            assert_eq!(y.shape().dims(), [1, 2, 10, 14]);
            assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn nine_passes_at_k_eight() {
        let img = ramp(3, 10, 14);
        let g = compute_grid(14, 10, 4, 4).unwrap();
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let model = |x: &Tensor<f32>| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(x.clone())
        };
        augmented_inference(&model, &img, &g, 8).unwrap();
        assert_eq!(calls.into_inner(), 9 * g.tiles());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn jittered_windows_stay_inside(w in 1usize..60, h in 1usize..60, cw in 1usize..20, ch in 1usize..20, shift in 0usize..40, seed in any::<u64>()) {
                let g = compute_grid(w, h, cw, ch).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for (top, left) in jitter_origins(&g, shift, &mut rng) {
                    prop_assert!(top + ch <= g.padded_height());
                    prop_assert!(left + cw <= g.padded_width());
                }
            }

            #[test]
            fn pad_crop_reassemble_identity(w in 1usize..40, h in 1usize..40, cw in 1usize..16, ch in 1usize..16, vi in 0usize..9) {
                let img = ramp(1, h, w);
                let g = compute_grid(w, h, cw, ch).unwrap();
                let v = PaddingVariant::all()[vi];
                let crops = crop_grid(&pad_image(&img, &g, v).unwrap(), &g).unwrap();
                prop_assert_eq!(reassemble(&crops, &g, v).unwrap(), img);
            }

            #[test]
            fn variant_order_does_not_matter(perm in Just((0..9).collect::<Vec<usize>>()).prop_shuffle()) {
                let img = ramp(1, 9, 11);
                let g = compute_grid(11, 9, 4, 4).unwrap();
                let model = |x: &Tensor<f32>| Ok(x.map(|v| ((v * 0.37).sin() + 1.0) * 0.5));
                let all = PaddingVariant::all();
                let shuffled: Vec<_> = perm.iter().map(|&i| all[i]).collect();
                let a = augmented_inference_with(&model, &img, &g, &all).unwrap();
                let b = augmented_inference_with(&model, &img, &g, &shuffled).unwrap();
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }
}
