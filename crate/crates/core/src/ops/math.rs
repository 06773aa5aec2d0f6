//! Elementwise activations, broadcasting arithmetic, batched matmul,
//! softmax and last-axis linear maps.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// `sqrt(2 / pi)` in the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh approximation of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::c(gelu_scalar(v.f64())))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Output shape of a broadcast between `a` and `b` (each dim equal or 1).
pub fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let (da, db) = (a.dims(), b.dims());
    let mut out = [0; 4];
    for k in 0..4 {
        out[k] = match (da[k], db[k]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(Shape(out))
}

fn bstrides(s: Shape, out: Shape) -> [usize; 4] {
    let st = s.strides();
    let mut r = [0; 4];
    for k in 0..4 {
        r[k] = if s.dims()[k] == out.dims()[k] { st[k] } else { 0 };
    }
    r
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_broadcast(a: Shape, b: Shape, out: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = bstrides(a, out);
    let sb = bstrides(b, out);
    let [n, c, h, w] = out.dims();
    let mut o = 0;
    for i in 0..n {
        for j in 0..c {
            for k in 0..h {
                let ba = i * sa[0] + j * sa[1] + k * sa[2];
                let bb = i * sb[0] + j * sb[1] + k * sb[2];
                for l in 0..w {
                    f(o, ba + l * sa[3], bb + l * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        out.clear_grad();
        for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
            *o += v;
        }
        return Ok(out);
    }
    let shape = broadcast_shape("add", a.shape(), b.shape())?;
    let mut out = Tensor::zeros(shape);
    let (da, db) = (a.data(), b.data());
    let dst = out.data_mut();
    for_broadcast(a.shape(), b.shape(), shape, |o, i, j| dst[o] = da[i] + db[j]);
    Ok(out)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = broadcast_shape("mul", a.shape(), b.shape())?;
    let mut out = Tensor::zeros(shape);
    let (da, db) = (a.data(), b.data());
    let dst = out.data_mut();
    for_broadcast(a.shape(), b.shape(), shape, |o, i, j| dst[o] = da[i] * db[j]);
    Ok(out)
}

/// Sums `g` (of the broadcast output shape) down to `target`.
pub fn reduce_to<T: Scalar>(g: &Tensor<T>, target: Shape) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = Tensor::zeros(target);
    let src = g.data();
    let dst = out.data_mut();
    for_broadcast(target, target, g.shape(), |o, i, _| dst[i] += src[o]);
    out
}

/// Gradients of broadcast `a * b` with respect to both operands.
pub fn mul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    let (va, vb, vg) = (a.data(), b.data(), g.data());
    let dst = da.data_mut();
    for_broadcast(a.shape(), b.shape(), g.shape(), |o, i, j| dst[i] += vg[o] * vb[j]);
    let dst = db.data_mut();
    for_broadcast(a.shape(), b.shape(), g.shape(), |o, i, j| dst[j] += vg[o] * va[i]);
    (da, db)
}

/// `(B1, B2, M, K) x (B1, B2, K, N) -> (B1, B2, M, N)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [b1, b2, m, k] = a.shape().dims();
    let [c1, c2, k2, n] = b.shape().dims();
    if (b1, b2, k) != (c1, c2, k2) {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros([b1, b2, m, n]);
    for i in 0..b1 * b2 {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[i * m * k..],
            k,
            1,
            &b.data()[i * k * n..],
            n,
            1,
            T::zero(),
            &mut out.data_mut()[i * m * n..],
            n,
            1,
        );
    }
    Ok(out)
}

/// Returns `(da, db)` for [`matmul`].
pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [b1, b2, m, k] = a.shape().dims();
    let n = b.shape().w();
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for i in 0..b1 * b2 {
        let gi = &g.data()[i * m * n..];
        // dA = G * B^T
        T::gemm(m, n, k, T::one(), gi, n, 1, &b.data()[i * k * n..], 1, n, T::zero(), &mut da.data_mut()[i * m * k..], k, 1);
        // dB = A^T * G
        T::gemm(k, m, n, T::one(), &a.data()[i * m * k..], 1, k, gi, n, 1, T::zero(), &mut db.data_mut()[i * k * n..], n, 1);
    }
    (da, db)
}

/// Numerically stable softmax over the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.shape().w();
    let mut out = Tensor::zeros(x.shape());
    for (xr, yr) in x.data().chunks_exact(d).zip(out.data_mut().chunks_exact_mut(d)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            sum += *y;
        }
        for y in yr.iter_mut() {
            *y /= sum;
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let d = y.shape().w();
    let mut dx = Tensor::zeros(y.shape());
    let rows = y.data().chunks_exact(d).zip(g.data().chunks_exact(d));
    for ((yr, gr), dr) in rows.zip(dx.data_mut().chunks_exact_mut(d)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for i in 0..d {
            dr[i] = yr[i] * (gr[i] - dot);
        }
    }
    dx
}

/// Last-axis affine map. `weight` is `(1, 1, in, out)`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>) -> Result<Tensor<T>> {
    let [_, _, din, dout] = weight.shape().dims();
    let [a, b, c, d] = x.shape().dims();
    if d != din || weight.shape().n() != 1 || weight.shape().c() != 1 {
        return Err(Error::shape("linear", x.shape(), weight.shape()));
    }
    if let Some(bias) = bias {
        if bias.len() != dout {
            return Err(Error::invalid_shape("linear", format!("bias length {} vs {dout}", bias.len())));
        }
    }
    let rows = a * b * c;
    let mut out = Tensor::zeros([a, b, c, dout]);
    T::gemm(rows, din, dout, T::one(), x.data(), din, 1, weight.data(), dout, 1, T::zero(), out.data_mut(), dout, 1);
    if let Some(bias) = bias {
        for row in out.data_mut().chunks_exact_mut(dout) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dweight, dbias)` for [`linear`].
pub fn linear_backward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let [_, _, din, dout] = weight.shape().dims();
    let rows = x.numel() / din;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    T::gemm(rows, dout, din, T::one(), g.data(), dout, 1, weight.data(), 1, dout, T::zero(), dx.data_mut(), din, 1);
    T::gemm(din, rows, dout, T::one(), x.data(), 1, din, g.data(), dout, 1, T::zero(), dw.data_mut(), dout, 1);
    let mut db = vec![T::zero(); dout];
    for row in g.data().chunks_exact(dout) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (dx, dw, db)
}

/// Spatial mean: `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn mean_hw<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().dims();
    let inv = T::c(1.0 / (h * w) as f64);
    Tensor::from_fn([n, c, 1, 1], |[b, ch, _, _]| x.plane(b, ch).iter().copied().sum::<T>() * inv)
}
