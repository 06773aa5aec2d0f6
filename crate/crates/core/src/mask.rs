//! Integer label planes.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `channels` planes of `height`×`width` bytes, plane-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Mask { channels, height, width, data: vec![0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::InvalidArgument(format!(
                "{} bytes for a {channels}x{height}x{width} mask",
                data.len()
            )));
        }
        Ok(Mask { channels, height, width, data })
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [u8] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Single-plane mask made of the selected planes.
    pub fn select(&self, channels: &[usize]) -> Mask {
        let mut data = Vec::with_capacity(channels.len() * self.height * self.width);
        for &c in channels {
            data.extend_from_slice(self.plane(c));
        }
        Mask { channels: channels.len(), height: self.height, width: self.width, data }
    }

    /// Zero-filled canvas of `height`×`width` with `self` at `(top, left)`.
    pub fn pad(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Mask> {
        if top + self.height > height || left + self.width > width {
            return Err(Error::InvalidArgument("mask does not fit the padded canvas".into()));
        }
        let mut out = Mask::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..self.height {
                let src = &self.plane(c)[y * self.width..(y + 1) * self.width];
                let o = (c * height + top + y) * width + left;
                out.data[o..o + self.width].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Mask> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Mask::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let s = (c * self.height + top + y) * self.width + left;
                let o = (c * height + y) * width;
                out.data[o..o + width].copy_from_slice(&self.data[s..s + width]);
            }
        }
        Ok(out)
    }

    /// Horizontal mirror.
    pub fn flip_x(&self) -> Mask {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Masks stacked as a `(N, C, H, W)` byte vector.
    pub fn stack(masks: &[&Mask]) -> Result<Vec<u8>> {
        let first = masks.first().ok_or_else(|| Error::InvalidArgument("no masks to stack".into()))?;
        let mut out = Vec::with_capacity(masks.len() * first.data.len());
        for m in masks {
            if (m.channels, m.height, m.width) != (first.channels, first.height, first.width) {
                return Err(Error::InvalidArgument("masks of different shapes".into()));
            }
            out.extend_from_slice(&m.data);
        }
        Ok(out)
    }

    /// Inverse of [`Mask::stack`] for `n` masks of the given plane size.
    pub fn unstack(data: &[u8], channels: usize, height: usize, width: usize) -> Vec<Mask> {
        data.chunks(channels * height * width)
            .map(|c| Mask { channels, height, width, data: c.to_vec() })
            .collect()
    }

    /// Planes as a `(1, C, H, W)` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::c(v as f64)).collect();
        Tensor::from_vec([1, self.channels, self.height, self.width], data).expect("sized by mask")
    }
}
