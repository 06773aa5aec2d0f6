//! Non-trainable spatial resizing (nearest and half-pixel bilinear).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

/// Source taps for one output coordinate: `(i0, i1, weight of i1)`.
fn taps(mode: ResizeMode, out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| match mode {
            ResizeMode::Nearest => {
                let i = (o * inp / out).min(inp - 1);
                (i, i, 0.0)
            }
            ResizeMode::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            }
        })
        .collect()
}

pub fn resize<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize, mode: ResizeMode) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().dims();
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(Error::invalid_shape("resize", format!("{} to {oh}x{ow}", x.shape())));
    }
    let ty = taps(mode, oh, h);
    let tx = taps(mode, ow, w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::c(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::c(lx);
                    let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                    dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
    }
    Ok(out)
}

/// Integer scale factor: `scale > 1` upsamples, `1/scale` is given as
/// `down`.
pub fn resize_by<T: Scalar>(x: &Tensor<T>, up: usize, down: usize, mode: ResizeMode) -> Result<Tensor<T>> {
    let (h, w) = (x.shape().h(), x.shape().w());
    if down == 0 || up == 0 || (h * up) % down != 0 || (w * up) % down != 0 {
        return Err(Error::invalid_shape(
            "resize",
            format!("{} not divisible for scale {up}/{down}", x.shape()),
        ));
    }
    resize(x, h * up / down, w * up / down, mode)
}

/// Transpose of [`resize`]: scatters `gy` back onto an `in_shape` grid.
pub fn resize_backward<T: Scalar>(
    gy: &Tensor<T>,
    in_h: usize,
    in_w: usize,
    mode: ResizeMode,
) -> Tensor<T> {
    let [n, c, oh, ow] = gy.shape().dims();
    let ty = taps(mode, oh, in_h);
    let tx = taps(mode, ow, in_w);
    let mut dx = Tensor::zeros([n, c, in_h, in_w]);
    for b in 0..n {
        for ch in 0..c {
            let g = gy.plane(b, ch);
            let d = dx.plane_mut(b, ch);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::c(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::c(lx);
                    let v = g[oy * ow + ox];
                    d[y0 * in_w + x0] += v * (T::one() - ly) * (T::one() - lx);
                    d[y0 * in_w + x1] += v * (T::one() - ly) * lx;
                    d[y1 * in_w + x0] += v * ly * (T::one() - lx);
                    d[y1 * in_w + x1] += v * ly * lx;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_round_trip_on_block_constant_image() {
        let x = Tensor::from_fn([1, 2, 16, 12], |[_, c, y, x]| ((y / 4) * 7 + (x / 4) * 3 + c) as f32);
        let down = resize_by(&x, 1, 4, ResizeMode::Nearest).unwrap();
        assert_eq!(down.shape().dims(), [1, 2, 4, 3]);
        let up = resize_by(&down, 4, 1, ResizeMode::Nearest).unwrap();
        assert_eq!(up, x);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor::full([1, 1, 8, 8], 2.5f32);
        let y = resize(&x, 3, 13, ResizeMode::Bilinear).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn bilinear_downsample_by_two_averages_pairs() {
        let x = Tensor::from_vec([1, 1, 1, 4], vec![0.0f64, 2.0, 4.0, 6.0]).unwrap();
        let y = resize(&x, 1, 2, ResizeMode::Bilinear).unwrap();
        assert_eq!(y.data(), &[1.0, 5.0]);
    }

    #[test]
    fn backward_is_transpose() {
        // <resize(x), g> == <x, resize_backward(g)> for random x, g
        let x = Tensor::from_fn([1, 1, 5, 7], |[_, _, y, x]| ((y * 7 + x) as f64).sin());
        let g = Tensor::from_fn([1, 1, 9, 4], |[_, _, y, x]| ((y * 4 + x) as f64).cos());
        for mode in [ResizeMode::Nearest, ResizeMode::Bilinear] {
            let y = resize(&x, 9, 4, mode).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let dx = resize_backward(&g, 5, 7, mode);
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
