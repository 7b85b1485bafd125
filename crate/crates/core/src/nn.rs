//! Layers with explicit backward passes. Forward calls return the output and
//! whatever the backward pass needs; backward calls accumulate parameter
//! gradients into a gradient container of the same type.

#[cfg(test)]
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::seed::Rng;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Same-padded, stride-1 square convolution (kernel 1 or 3).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Row-major `[out][in][ky][kx]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    /// Fan-in scaled normal initialisation, zero bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut Rng) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let weight = (0..out_channels * fan_in).map(|_| normal.sample(rng)).collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..*self
        }
    }

    fn taps(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds the input into a `[in·k·k] × [H·W]` matrix.
    fn im2col(&self, x: &Tensor) -> Vec<f64> {
        let (h, w) = (x.height, x.width);
        if self.kernel == 1 {
            return x.data.clone();
        }
        let k = self.kernel as isize;
        let r = k / 2;
        let plane = h * w;
        let mut cols = vec![0.0; self.taps() * plane];
        for c in 0..self.in_channels {
            let src = x.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c as isize * k + ky) * k + kx) as usize;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let dy = ky - r;
                    let dx = kx - r;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        for xx in x_lo..x_hi {
                            drow[xx] = srow[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Tensor {
        if self.kernel == 1 {
            return Tensor {
                channels: self.in_channels,
                height: h,
                width: w,
                data: cols.to_vec(),
            };
        }
        let k = self.kernel as isize;
        let r = k / 2;
        let plane = h * w;
        let mut out = Tensor::zeros(self.in_channels, h, w);
        for c in 0..self.in_channels {
            let dst = out.channel_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c as isize * k + ky) * k + kx) as usize;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let dy = ky - r;
                    let dx = kx - r;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in x_lo..x_hi {
                            dst[sy as usize * w + (xx as isize + dx) as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        debug_assert_eq!(x.channels, self.in_channels);
        let plane = x.plane();
        let cols = self.im2col(x);
        let mut out = Tensor::zeros(self.out_channels, x.height, x.width);
        for o in 0..self.out_channels {
            out.channel_mut(o).fill(self.bias[o]);
        }
        let kk = self.taps();
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                kk,
                plane,
                1.0,
                self.weight.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                plane as isize,
                1,
                1.0,
                out.data.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
        (
            out,
            ConvCache {
                cols,
                height: x.height,
                width: x.width,
            },
        )
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &Tensor,
        grad: &mut Conv2d,
        need_input: bool,
    ) -> Option<Tensor> {
        let plane = cache.height * cache.width;
        let kk = self.taps();
        for o in 0..self.out_channels {
            grad.bias[o] += grad_out.channel(o).iter().sum::<f64>();
        }
        // dW += dY · colsᵀ
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                plane,
                kk,
                1.0,
                grad_out.data.as_ptr(),
                plane as isize,
                1,
                cache.cols.as_ptr(),
                1,
                plane as isize,
                1.0,
                grad.weight.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        if !need_input {
            return None;
        }
        // dcols = Wᵀ · dY
        let mut dcols = vec![0.0; kk * plane];
        unsafe {
            matrixmultiply::dgemm(
                kk,
                self.out_channels,
                plane,
                1.0,
                self.weight.as_ptr(),
                1,
                kk as isize,
                grad_out.data.as_ptr(),
                plane as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
        Some(self.col2im(&dcols, cache.height, cache.width))
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    height: usize,
    width: usize,
}

pub fn leaky_relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data
        .iter_mut()
        .for_each(|v| *v = if *v > 0.0 { *v } else { LEAKY_SLOPE * *v });
    out
}

/// Backward of [`leaky_relu`] given its pre-activation input.
pub fn leaky_relu_backward(pre: &Tensor, grad: &Tensor) -> Tensor {
    let mut out = grad.clone();
    for (g, &z) in out.data.iter_mut().zip(&pre.data) {
        if z <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
    out
}

/// Two 3×3 convolutions, each followed by a leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    c1: ConvCache,
    z1: Tensor,
    c2: ConvCache,
    z2: Tensor,
}

impl ConvBlock {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv2d::new(in_channels, out_channels, 3, rng),
            conv2: Conv2d::new(out_channels, out_channels, 3, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, BlockCache) {
        let (z1, c1) = self.conv1.forward(x);
        let a1 = leaky_relu(&z1);
        let (z2, c2) = self.conv2.forward(&a1);
        let a2 = leaky_relu(&z2);
        (a2, BlockCache { c1, z1, c2, z2 })
    }

    pub fn backward(
        &self,
        cache: &BlockCache,
        grad_out: &Tensor,
        grad: &mut ConvBlock,
        need_input: bool,
    ) -> Option<Tensor> {
        let g2 = leaky_relu_backward(&cache.z2, grad_out);
        let ga1 = self
            .conv2
            .backward(&cache.c2, &g2, &mut grad.conv2, true)
            .expect("input gradient requested");
        let g1 = leaky_relu_backward(&cache.z1, &ga1);
        self.conv1.backward(&cache.c1, &g1, &mut grad.conv1, need_input)
    }
}

/// Randomly perturbs a tensor; test helper shared by the layer tests.
#[cfg(test)]
pub(crate) fn random_tensor(c: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor {
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(c, h, w, data).unwrap()
}
