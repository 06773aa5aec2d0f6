//! Pure rearrangements: pixel (un)shuffle, window partition, cyclic roll,
//! axis permutation, concatenation, narrowing and zero padding. Each has an
//! exact inverse that doubles as its backward pass.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Depth-to-space: `out[n, c, h*r+i, w*r+j] = in[n, c*r*r + i*r + j, h, w]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().dims();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::invalid_shape(
            "pixel_shuffle",
            format!("channels {c} not divisible by r^2 = {}", r * r),
        ));
    }
    let oc = c / (r * r);
    let mut out = Tensor::zeros([n, oc, h * r, w * r]);
    let os = out.shape();
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..n {
        for co in 0..oc {
            for i in 0..r {
                for j in 0..r {
                    let ci = co * r * r + i * r + j;
                    let plane = &src[x.shape().offset(b, ci, 0, 0)..][..h * w];
                    for y in 0..h {
                        let row = os.offset(b, co, y * r + i, 0);
                        for (xx, &v) in plane[y * w..(y + 1) * w].iter().enumerate() {
                            dst[row + xx * r + j] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Space-to-depth, the exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().dims();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::invalid_shape(
            "pixel_unshuffle",
            format!("spatial {h}x{w} not divisible by {r}"),
        ));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = Tensor::zeros([n, c * r * r, oh, ow]);
    let os = out.shape();
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let co = ci * r * r + i * r + j;
                    let base = os.offset(b, co, 0, 0);
                    for y in 0..oh {
                        let row = x.shape().offset(b, ci, y * r + i, 0);
                        for xx in 0..ow {
                            dst[base + y * ow + xx] = src[row + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Channels-last `(N, H, W, C)` to `(1, N*nH*nW, ws*ws, C)`; windows are
/// ordered `(n, wy, wx)` row-major and tokens row-major inside a window.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, ws: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = x.shape().dims();
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return Err(Error::invalid_shape(
            "window_partition",
            format!("grid {h}x{w} not divisible by window {ws}"),
        ));
    }
    let (nh, nw) = (h / ws, w / ws);
    let mut out = Tensor::zeros([1, n * nh * nw, ws * ws, c]);
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                for iy in 0..ws {
                    let start = x.shape().offset(b, wy * ws + iy, wx * ws, 0);
                    let len = ws * c;
                    dst[o..o + len].copy_from_slice(&src[start..start + len]);
                    o += len;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`window_partition`] for a `(n, h, w, c)` grid.
pub fn window_reverse<T: Scalar>(
    windows: &Tensor<T>,
    ws: usize,
    grid: Shape,
) -> Result<Tensor<T>> {
    let [n, h, w, c] = grid.dims();
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return Err(Error::invalid_shape(
            "window_reverse",
            format!("grid {h}x{w} not divisible by window {ws}"),
        ));
    }
    let (nh, nw) = (h / ws, w / ws);
    let expect = Shape::new(1, n * nh * nw, ws * ws, c);
    if windows.shape() != expect {
        return Err(Error::shape("window_reverse", windows.shape(), expect));
    }
    let mut out = Tensor::zeros(grid);
    let src = windows.data();
    let dst = out.data_mut();
    let mut o = 0;
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                for iy in 0..ws {
                    let start = grid.offset(b, wy * ws + iy, wx * ws, 0);
                    let len = ws * c;
                    dst[start..start + len].copy_from_slice(&src[o..o + len]);
                    o += len;
                }
            }
        }
    }
    Ok(out)
}

/// Cyclic shift of a channels-last grid along H and W:
/// `out[n, (y + sy) mod H, (x + sx) mod W, :] = in[n, y, x, :]`.
pub fn roll_hw<T: Scalar>(x: &Tensor<T>, sy: isize, sx: isize) -> Tensor<T> {
    let [n, h, w, c] = x.shape().dims();
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..n {
        for y in 0..h {
            let ty = (y as isize + sy).rem_euclid(h as isize) as usize;
            for xx in 0..w {
                let tx = (xx as isize + sx).rem_euclid(w as isize) as usize;
                let s = x.shape().offset(b, y, xx, 0);
                let d = x.shape().offset(b, ty, tx, 0);
                dst[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    out
}

/// `out.shape[i] = in.shape[axes[i]]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, axes: [usize; 4]) -> Result<Tensor<T>> {
    let mut seen = [false; 4];
    for &a in &axes {
        if a >= 4 || seen[a] {
            return Err(Error::InvalidArgument(format!("permute: bad axes {axes:?}")));
        }
        seen[a] = true;
    }
    let d = x.shape().dims();
    let st = x.shape().strides();
    let out_shape = Shape([d[axes[0]], d[axes[1]], d[axes[2]], d[axes[3]]]);
    let ps = [st[axes[0]], st[axes[1]], st[axes[2]], st[axes[3]]];
    let [a, b, c, e] = out_shape.dims();
    let mut data = Vec::with_capacity(out_shape.numel());
    let src = x.data();
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let base = i * ps[0] + j * ps[1] + k * ps[2];
                if ps[3] == 1 {
                    data.extend_from_slice(&src[base..base + e]);
                } else {
                    data.extend((0..e).map(|l| src[base + l * ps[3]]));
                }
            }
        }
    }
    Tensor::from_vec(out_shape, data)
}

pub fn inverse_axes(axes: [usize; 4]) -> [usize; 4] {
    let mut inv = [0; 4];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn split_at_axis(shape: Shape, axis: usize) -> (usize, usize, usize) {
    let d = shape.dims();
    let outer: usize = d[..axis].iter().product();
    let inner: usize = d[axis + 1..].iter().product();
    (outer, d[axis], inner)
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    if axis >= 4 {
        return Err(Error::InvalidArgument(format!("concat axis {axis}")));
    }
    let mut dims = first.shape().dims();
    let mut total = 0;
    for p in parts {
        let pd = p.shape().dims();
        for k in 0..4 {
            if k != axis && pd[k] != dims[k] {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        total += pd[axis];
    }
    dims[axis] = total;
    let out_shape = Shape(dims);
    let (outer, _, inner) = split_at_axis(out_shape, axis);
    let mut data = Vec::with_capacity(out_shape.numel());
    for o in 0..outer {
        for p in parts {
            let len = p.shape().dims()[axis] * inner;
            data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= 4 || start + len > x.shape().dims()[axis] {
        return Err(Error::invalid_shape(
            "narrow",
            format!("axis {axis} range {start}..{} of {}", start + len, x.shape()),
        ));
    }
    let (outer, size, inner) = split_at_axis(x.shape(), axis);
    let mut dims = x.shape().dims();
    dims[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * size + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::from_vec(Shape(dims), data)
}

/// Adds `src` into the `[start, start+len)` slab of `dst` along `axis`.
pub(crate) fn narrow_backward_into<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, axis: usize, start: usize) {
    let (outer, size, inner) = split_at_axis(dst.shape(), axis);
    let len = src.shape().dims()[axis];
    let d = dst.data_mut();
    for o in 0..outer {
        let base = (o * size + start) * inner;
        for (a, &b) in d[base..base + len * inner]
            .iter_mut()
            .zip(&src.data()[o * len * inner..(o + 1) * len * inner])
        {
            *a += b;
        }
    }
}

/// Zero padding of the spatial axes (2, 3).
pub fn pad_hw<T: Scalar>(x: &Tensor<T>, top: usize, bottom: usize, left: usize, right: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape().dims();
    let (oh, ow) = (h + top + bottom, w + left + right);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let os = out.shape();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let s = x.shape().offset(b, ch, y, 0);
                let d = os.offset(b, ch, y + top, left);
                out.data_mut()[d..d + w].copy_from_slice(&x.data()[s..s + w]);
            }
        }
    }
    out
}

/// Spatial crop of a `(h, w)` window starting at `(top, left)`.
pub fn crop_hw<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let r = narrow(x, 2, top, h)?;
    narrow(&r, 3, left, w)
}
