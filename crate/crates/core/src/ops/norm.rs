//! Batch normalisation over `(N, H, W)` per channel and layer normalisation
//! over the last axis.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-channel statistics saved by the forward pass.
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Unbiased batch variance, for running-stat updates (train mode only).
    pub var_unbiased: Vec<T>,
}

fn check_channels<T: Scalar>(op: &'static str, x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<()> {
    if gamma.len() != x.shape().c() || beta.len() != x.shape().c() {
        return Err(Error::invalid_shape(
            op,
            format!(
                "gamma/beta lengths {}/{} for input {}",
                gamma.len(),
                beta.len(),
                x.shape()
            ),
        ));
    }
    Ok(())
}

pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor<T>, BnStats<T>)> {
    check_channels("batch_norm", x, gamma, beta)?;
    let [n, c, h, w] = x.shape().dims();
    let count = n * h * w;
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut var_unbiased = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            s += x.plane(b, ch).iter().map(|v| v.f64()).sum::<f64>();
        }
        let m = s / count as f64;
        let mut ss = 0.0f64;
        for b in 0..n {
            ss += x.plane(b, ch).iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>();
        }
        let var = ss / count as f64;
        mean[ch] = T::c(m);
        inv_std[ch] = T::c(1.0 / (var + eps).sqrt());
        var_unbiased[ch] = T::c(if count > 1 { ss / (count - 1) as f64 } else { 0.0 });
    }
    let y = affine(x, gamma, beta, &mean, &inv_std);
    Ok((
        y,
        BnStats {
            mean,
            inv_std,
            var_unbiased,
        },
    ))
}

pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<(Tensor<T>, BnStats<T>)> {
    check_channels("batch_norm", x, gamma, beta)?;
    check_channels("batch_norm", x, running_mean, running_var)?;
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|v| T::c(1.0 / (v.f64() + eps).sqrt()))
        .collect();
    let y = affine(x, gamma, beta, running_mean, &inv_std);
    Ok((
        y,
        BnStats {
            mean: running_mean.to_vec(),
            inv_std,
            var_unbiased: Vec::new(),
        },
    ))
}

fn affine<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], inv_std: &[T]) -> Tensor<T> {
    let [n, c, _, _] = x.shape().dims();
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            let (m, shift) = (mean[ch], beta[ch]);
            for (o, &v) in y.plane_mut(b, ch).iter_mut().zip(x.plane(b, ch)) {
                *o = (v - m) * scale + shift;
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    stats: &BnStats<T>,
    gy: &Tensor<T>,
    train: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.shape().dims();
    let count = T::c((n * h * w) as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (m, is) = (stats.mean[ch], stats.inv_std[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            for (&dy, &v) in gy.plane(b, ch).iter().zip(x.plane(b, ch)) {
                sum_dy += dy;
                sum_dy_xhat += dy * (v - m) * is;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let g = gamma[ch];
        for b in 0..n {
            let gyp = gy.plane(b, ch);
            let xp = x.plane(b, ch);
            let out = dx.plane_mut(b, ch);
            for i in 0..out.len() {
                out[i] = if train {
                    let xhat = (xp[i] - m) * is;
                    g * is * (gyp[i] - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    g * is * gyp[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row statistics saved by [`layer_norm`].
pub struct LnStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor<T>, LnStats<T>)> {
    let d = x.shape().w();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::invalid_shape(
            "layer_norm",
            format!("gamma/beta lengths {}/{} for feature size {d}", gamma.len(), beta.len()),
        ));
    }
    let rows = x.numel() / d.max(1);
    let mut y = Tensor::zeros(x.shape());
    let mut mean = Vec::with_capacity(rows);
    let mut inv_std = Vec::with_capacity(rows);
    for (xr, yr) in x.data().chunks_exact(d).zip(y.data_mut().chunks_exact_mut(d)) {
        let m = xr.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        let (mt, ist) = (T::c(m), T::c(is));
        for i in 0..d {
            yr[i] = (xr[i] - mt) * ist * gamma[i] + beta[i];
        }
        mean.push(mt);
        inv_std.push(ist);
    }
    Ok((y, LnStats { mean, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    stats: &LnStats<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let d = x.shape().w();
    let dn = T::c(d as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let rows = x
        .data()
        .chunks_exact(d)
        .zip(gy.data().chunks_exact(d))
        .zip(dx.data_mut().chunks_exact_mut(d));
    for (r, ((xr, gr), dr)) in rows.enumerate() {
        let (m, is) = (stats.mean[r], stats.inv_std[r]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..d {
            let xhat = (xr[i] - m) * is;
            let gh = gr[i] * gamma[i];
            dgamma[i] += gr[i] * xhat;
            dbeta[i] += gr[i];
            sum_g += gh;
            sum_gx += gh * xhat;
        }
        for i in 0..d {
            let xhat = (xr[i] - m) * is;
            dr[i] = is * (gr[i] * gamma[i] - sum_g / dn - xhat * sum_gx / dn);
        }
    }
    (dx, dgamma, dbeta)
}
