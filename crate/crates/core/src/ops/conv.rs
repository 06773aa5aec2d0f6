//! 2-D cross-correlation (the kernel is not flipped) via chunked im2col and
//! GEMM. Scratch buffers are bounded so full-HD layers do not materialise a
//! whole column matrix at once.

use crate::error::{Error, Result};
use crate::tensor::{memory, Scalar, Shape, Tensor};

/// Upper bound on im2col scratch elements per chunk.
const SCRATCH_LIMIT: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    pub(crate) fn new(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, iw] = x.dims();
        let [cout, wcin, kh, kw] = w.dims();
        if wcin != cin {
            return Err(Error::shape("conv2d", x, w));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || iw + 2 * pad < kw {
            return Err(Error::shape("conv2d", x, w));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (iw + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w: iw,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub(crate) fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.ho, self.wo)
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (SCRATCH_LIMIT / (self.k() * self.wo).max(1)).clamp(1, self.ho)
    }
}

/// Output spatial size for one axis.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

struct Scratch<T: Scalar>(Vec<T>);

impl<T: Scalar> Scratch<T> {
    fn new(len: usize) -> Self {
        memory::track_alloc(len * std::mem::size_of::<T>());
        Scratch(vec![T::zero(); len])
    }
}

impl<T: Scalar> Drop for Scratch<T> {
    fn drop(&mut self) {
        memory::track_free(self.0.len() * std::mem::size_of::<T>());
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], oy0: usize, oy1: usize, col: &mut [T]) {
    let cols = (oy1 - oy0) * g.wo;
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let out = &mut dst[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *o = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], oy0: usize, oy1: usize, dx: &mut [T]) {
    let cols = (oy1 - oy0) * g.wo;
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let vals = &src[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    for (ox, &v) in vals.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::invalid_shape(
                "conv2d",
                format!("bias length {} for {} output channels", b.len(), g.cout),
            ));
        }
    }
    let mut out = Tensor::zeros(g.out_shape());
    let k = g.k();
    let in_len = g.cin * g.h * g.w;
    let out_hw = g.ho * g.wo;
    let wdata = weight.data();
    let chunk = g.rows_per_chunk();
    let mut col = if g.pointwise() {
        Scratch::new(0)
    } else {
        Scratch::new(k * chunk * g.wo)
    };
    for n in 0..g.n {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let yn = &mut out.data_mut()[n * g.cout * out_hw..(n + 1) * g.cout * out_hw];
        if g.pointwise() {
            T::gemm(g.cout, k, out_hw, T::one(), wdata, k, 1, xn, out_hw, 1, T::zero(), yn, out_hw, 1);
        } else {
            let mut oy0 = 0;
            while oy0 < g.ho {
                let oy1 = (oy0 + chunk).min(g.ho);
                let cols = (oy1 - oy0) * g.wo;
                im2col(&g, xn, oy0, oy1, &mut col.0);
                T::gemm(
                    g.cout,
                    k,
                    cols,
                    T::one(),
                    wdata,
                    k,
                    1,
                    &col.0,
                    cols,
                    1,
                    T::zero(),
                    &mut yn[oy0 * g.wo..],
                    out_hw,
                    1,
                );
                oy0 = oy1;
            }
        }
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut yn[co * out_hw..(co + 1) * out_hw] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution. `dx` is computed only when requested; `dw`
/// and `db` are always returned.
pub struct ConvGrads<T: Scalar> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if gy.shape() != g.out_shape() {
        return Err(Error::shape("conv2d_backward", gy.shape(), g.out_shape()));
    }
    let k = g.k();
    let in_len = g.cin * g.h * g.w;
    let out_hw = g.ho * g.wo;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = vec![T::zero(); g.cout];
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let chunk = g.rows_per_chunk();
    let (mut col, mut dcol) = if g.pointwise() {
        (Scratch::new(0), Scratch::new(0))
    } else {
        let len = k * chunk * g.wo;
        (Scratch::new(len), Scratch::new(if want_dx { len } else { 0 }))
    };
    let wdata = weight.data();
    for n in 0..g.n {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let gyn = &gy.data()[n * g.cout * out_hw..(n + 1) * g.cout * out_hw];
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += gyn[co * out_hw..(co + 1) * out_hw].iter().copied().sum::<T>();
        }
        if g.pointwise() {
            T::gemm(g.cout, out_hw, k, T::one(), gyn, out_hw, 1, xn, 1, out_hw, T::one(), dw.data_mut(), k, 1);
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
                T::gemm(k, g.cout, out_hw, T::one(), wdata, 1, k, gyn, out_hw, 1, T::zero(), dxn, out_hw, 1);
            }
            continue;
        }
        let mut oy0 = 0;
        while oy0 < g.ho {
            let oy1 = (oy0 + chunk).min(g.ho);
            let cols = (oy1 - oy0) * g.wo;
            im2col(&g, xn, oy0, oy1, &mut col.0);
            let gy_chunk = &gyn[oy0 * g.wo..];
            T::gemm(g.cout, cols, k, T::one(), gy_chunk, out_hw, 1, &col.0, 1, cols, T::one(), dw.data_mut(), k, 1);
            if let Some(dx) = dx.as_mut() {
                T::gemm(k, g.cout, cols, T::one(), wdata, 1, k, gy_chunk, out_hw, 1, T::zero(), &mut dcol.0, cols, 1);
                let dxn = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
                col2im(&g, &dcol.0, oy0, oy1, dxn);
            }
            oy0 = oy1;
        }
    }
    Ok(ConvGrads { dx, dw, db })
}
