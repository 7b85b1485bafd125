//! Dense channel-major (C×H×W) tensors of `f64` and the resampling operators
//! shared by the network and the losses.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values for a {}x{}x{} tensor",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.channels, other.height, other.width)
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn scaled(&self, k: f64) -> Tensor {
        let mut t = self.clone();
        t.scale(k);
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest deviation of a per-pixel channel sum from 1, or `None` if any
    /// entry is negative or non-finite.
    pub fn simplex_error(&self) -> Option<f64> {
        if self.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return None;
        }
        let p = self.plane();
        let mut worst: f64 = 0.0;
        for i in 0..p {
            let s: f64 = (0..self.channels).map(|c| self.data[c * p + i]).sum();
            worst = worst.max((s - 1.0).abs());
        }
        Some(worst)
    }

    /// Concatenates along the channel axis.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!((a.height, a.width), (b.height, b.width));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            channels: a.channels + b.channels,
            height: a.height,
            width: a.width,
            data,
        }
    }

    /// Splits off the first `first` channels.
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let cut = first * self.plane();
        (
            Tensor {
                channels: first,
                height: self.height,
                width: self.width,
                data: self.data[..cut].to_vec(),
            },
            Tensor {
                channels: self.channels - first,
                height: self.height,
                width: self.width,
                data: self.data[cut..].to_vec(),
            },
        )
    }
}

/// Channel-wise softmax at every pixel.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros_like(logits);
    let p = logits.plane();
    let c = logits.channels;
    for i in 0..p {
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            m = m.max(logits.data[k * p + i]);
        }
        let mut s = 0.0;
        for k in 0..c {
            let e = (logits.data[k * p + i] - m).exp();
            out.data[k * p + i] = e;
            s += e;
        }
        for k in 0..c {
            out.data[k * p + i] /= s;
        }
    }
    out
}

/// Backward of [`softmax_channels`] given its output.
pub fn softmax_channels_backward(probs: &Tensor, grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros_like(probs);
    let p = probs.plane();
    let c = probs.channels;
    for i in 0..p {
        let dot: f64 = (0..c).map(|k| probs.data[k * p + i] * grad.data[k * p + i]).sum();
        for k in 0..c {
            out.data[k * p + i] = probs.data[k * p + i] * (grad.data[k * p + i] - dot);
        }
    }
    out
}

/// 2×2 max pooling; returns the pooled tensor and the flat argmax index for
/// each output cell.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = Tensor::zeros(x.channels, h, w);
    let mut arg = vec![0usize; out.data.len()];
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = x.idx(c, 2 * y + dy, 2 * xx + dx);
                        if x.data[i] > best {
                            best = x.data[i];
                            bi = i;
                        }
                    }
                }
                let o = out.idx(c, y, xx);
                out.data[o] = best;
                arg[o] = bi;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(grad: &Tensor, arg: &[usize], input_shape: (usize, usize, usize)) -> Tensor {
    let mut out = Tensor::zeros(input_shape.0, input_shape.1, input_shape.2);
    for (g, &i) in grad.data.iter().zip(arg) {
        out.data[i] += g;
    }
    out
}

/// 2×2 average pooling.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = Tensor::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                let s = x.at(c, 2 * y, 2 * xx)
                    + x.at(c, 2 * y, 2 * xx + 1)
                    + x.at(c, 2 * y + 1, 2 * xx)
                    + x.at(c, 2 * y + 1, 2 * xx + 1);
                out.set(c, y, xx, 0.25 * s);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(grad.channels, grad.height * 2, grad.width * 2);
    for c in 0..grad.channels {
        for y in 0..grad.height {
            for x in 0..grad.width {
                let g = 0.25 * grad.at(c, y, x);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = out.idx(c, 2 * y + dy, 2 * x + dx);
                        out.data[i] += g;
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.channels, x.height * 2, x.width * 2);
    for c in 0..x.channels {
        for y in 0..out.height {
            for xx in 0..out.width {
                let v = x.at(c, y / 2, xx / 2);
                out.set(c, y, xx, v);
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward(grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(grad.channels, grad.height / 2, grad.width / 2);
    for c in 0..grad.channels {
        for y in 0..grad.height {
            for x in 0..grad.width {
                let i = out.idx(c, y / 2, x / 2);
                out.data[i] += grad.at(c, y, x);
            }
        }
    }
    out
}

/// One-dimensional bilinear interpolation taps for resizing `src` samples to
/// `dst` samples with half-pixel centres (source coordinate
/// `(i + 0.5) * src / dst - 0.5`, clamped to the valid range).
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resize of every channel to `height × width`.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Tensor {
    if x.height == height && x.width == width {
        return x.clone();
    }
    let ty = linear_taps(x.height, height);
    let tx = linear_taps(x.width, width);
    let mut out = Tensor::zeros(x.channels, height, width);
    for c in 0..x.channels {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = x.at(c, y0, x0) * (1.0 - fx) + x.at(c, y0, x1) * fx;
                let bot = x.at(c, y1, x0) * (1.0 - fx) + x.at(c, y1, x1) * fx;
                out.set(c, y, xx, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(grad: &Tensor, height: usize, width: usize) -> Tensor {
    if grad.height == height && grad.width == width {
        return grad.clone();
    }
    let ty = linear_taps(height, grad.height);
    let tx = linear_taps(width, grad.width);
    let mut out = Tensor::zeros(grad.channels, height, width);
    for c in 0..grad.channels {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = grad.at(c, y, xx);
                let i00 = out.idx(c, y0, x0);
                let i01 = out.idx(c, y0, x1);
                let i10 = out.idx(c, y1, x0);
                let i11 = out.idx(c, y1, x1);
                out.data[i00] += g * (1.0 - fy) * (1.0 - fx);
                out.data[i01] += g * (1.0 - fy) * fx;
                out.data[i10] += g * fy * (1.0 - fx);
                out.data[i11] += g * fy * fx;
            }
        }
    }
    out
}
