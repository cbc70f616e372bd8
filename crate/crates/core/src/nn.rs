//! Dense layers with explicit forward and backward passes.
//!
//! Every backward routine accumulates into a gradient buffer of the same
//! type as the layer, so a zeroed clone of a parameter struct doubles as its
//! gradient.

use alloc::vec;
use alloc::vec::Vec;
use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng;
use crate::tensor::FeatureMap;

/// Square-kernel 2-D convolution with zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-uniform initialisation, zero bias.
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl RngCore,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride, padding);
        let bound = libm::sqrt(6.0 / (in_channels * kernel * kernel) as f64);
        for w in &mut conv.weight {
            *w = rng::uniform(rng, -bound, bound);
        }
        conv
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    #[inline]
    fn w_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    /// Output rows/cols touched by kernel offset `k`, as `(first_out, count)`.
    fn valid_range(&self, k: usize, in_size: usize, out_size: usize) -> (usize, usize) {
        // out index o reads input o*stride + k - padding; keep it in [0, in_size)
        let mut first = 0usize;
        while first < out_size && first * self.stride + k < self.padding {
            first += 1;
        }
        let mut last = first;
        while last < out_size && last * self.stride + k < in_size + self.padding {
            last += 1;
        }
        (first, last - first)
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        ensure!(
            x.channels == self.in_channels,
            "conv expects {} input channels, got {}",
            self.in_channels,
            x.channels
        );
        let oh = self.output_size(x.height);
        let ow = self.output_size(x.width);
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        for o in 0..self.out_channels {
            let plane = &mut out.data[o * oh * ow..(o + 1) * oh * ow];
            plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let input = x.channel(i);
                for ky in 0..self.kernel {
                    let (oy0, ny) = self.valid_range(ky, x.height, oh);
                    for kx in 0..self.kernel {
                        let (ox0, nx) = self.valid_range(kx, x.width, ow);
                        let w = self.weight[self.w_index(o, i, ky, kx)];
                        if w == 0.0 {
                            continue;
                        }
                        for oy in oy0..oy0 + ny {
                            let iy = oy * self.stride + ky - self.padding;
                            let row_in = &input[iy * x.width..(iy + 1) * x.width];
                            let row_out = &mut plane[oy * ow..(oy + 1) * ow];
                            if self.stride == 1 {
                                let ix0 = ox0 + kx - self.padding;
                                for (dst, src) in row_out[ox0..ox0 + nx].iter_mut().zip(&row_in[ix0..ix0 + nx]) {
                                    *dst += w * src;
                                }
                            } else {
                                for ox in ox0..ox0 + nx {
                                    row_out[ox] += w * row_in[ox * self.stride + kx - self.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates weight/bias gradients into `grads`; returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        x: &FeatureMap,
        grad_out: &FeatureMap,
        grads: &mut Conv2d,
        want_input: bool,
    ) -> Option<FeatureMap> {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let mut grad_in = want_input.then(|| FeatureMap::zeros(x.channels, x.height, x.width));
        for o in 0..self.out_channels {
            let g = grad_out.channel(o);
            grads.bias[o] += g.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let input = x.channel(i);
                for ky in 0..self.kernel {
                    let (oy0, ny) = self.valid_range(ky, x.height, oh);
                    for kx in 0..self.kernel {
                        let (ox0, nx) = self.valid_range(kx, x.width, ow);
                        let widx = self.w_index(o, i, ky, kx);
                        let w = self.weight[widx];
                        let mut gw = 0.0;
                        for oy in oy0..oy0 + ny {
                            let iy = oy * self.stride + ky - self.padding;
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            for ox in ox0..ox0 + nx {
                                let ix = ox * self.stride + kx - self.padding;
                                let go = grow[ox];
                                gw += go * input[iy * x.width + ix];
                                if let Some(gi) = grad_in.as_mut() {
                                    gi.data[(i * x.height + iy) * x.width + ix] += w * go;
                                }
                            }
                        }
                        grads.weight[widx] += gw;
                    }
                }
            }
        }
        grad_in
    }
}

/// Fully connected layer, weight stored `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl RngCore) -> Self {
        let mut fc = Self::zeros(in_dim, out_dim);
        let bound = libm::sqrt(6.0 / in_dim as f64);
        for w in &mut fc.weight {
            *w = rng::uniform(rng, -bound, bound);
        }
        fc
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            x.len() == self.in_dim,
            "linear layer expects input length {}, got {}",
            self.in_dim,
            x.len()
        );
        Ok((0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect())
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut Linear, want_input: bool) -> Option<Vec<f64>> {
        let mut grad_in = want_input.then(|| vec![0.0; self.in_dim]);
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias[o] += g;
            let gw = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (dst, v) in gw.iter_mut().zip(x) {
                *dst += g * v;
            }
            if let Some(gi) = grad_in.as_mut() {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                for (dst, w) in gi.iter_mut().zip(row) {
                    *dst += g * w;
                }
            }
        }
        grad_in
    }
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn relu_map(x: &FeatureMap) -> FeatureMap {
    let mut out = x.clone();
    out.map_inplace(relu);
    out
}

pub fn relu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| relu(v)).collect()
}

/// Zeroes gradient entries where the post-ReLU activation is zero.
pub fn relu_backward(activated: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 3x3 max pool, stride 1, padding 1; returns the pooled map and the flat
/// source index of every output element.
pub fn max_pool3(x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let (c, h, w) = x.shape();
    let mut out = FeatureMap::zeros(c, h, w);
    let mut src = vec![0usize; x.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..3 {
                    let yy = y + dy;
                    if yy < 1 || yy > h {
                        continue;
                    }
                    for dx in 0..3 {
                        let xs = xx + dx;
                        if xs < 1 || xs > w {
                            continue;
                        }
                        let idx = (ch * h + yy - 1) * w + xs - 1;
                        if x.data[idx] > best {
                            best = x.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * h + y) * w + xx;
                out.data[o] = best;
                src[o] = best_idx;
            }
        }
    }
    (out, src)
}

pub fn max_pool3_backward(grad_out: &FeatureMap, src: &[usize]) -> FeatureMap {
    let mut grad_in = FeatureMap::zeros(grad_out.channels, grad_out.height, grad_out.width);
    for (g, &s) in grad_out.data.iter().zip(src) {
        grad_in.data[s] += g;
    }
    grad_in
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| libm::exp(l - m)).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Cross-entropy of `logits` against `label`, with its gradient.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut probs = softmax(logits);
    let loss = -libm::log(probs[label].max(f64::MIN_POSITIVE));
    probs[label] -= 1.0;
    (loss, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(conv: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let oh = conv.output_size(x.height);
        let ow = conv.output_size(x.width);
        let mut out = FeatureMap::zeros(conv.out_channels, oh, ow);
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[o];
                    for i in 0..conv.in_channels {
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                acc += conv.weight[conv.w_index(o, i, ky, kx)] * x.at(i, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at_mut(o, oy, ox) = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut r = rng::rng_for(3, 0, 0);
        for &(stride, size) in &[(1usize, 5usize), (2, 8), (2, 7)] {
            let conv = Conv2d::init(2, 3, 3, stride, 1, &mut r);
            let mut x = FeatureMap::zeros(2, size, size);
            for v in &mut x.data {
                *v = rng::uniform(&mut r, -1.0, 1.0);
            }
            let fast = conv.forward(&x).unwrap();
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_of_constant_is_constant() {
        let x = FeatureMap::from_vec(1, 3, 3, vec![2.0; 9]).unwrap();
        let (p, _) = max_pool3(&x);
        assert!(p.data.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (loss, g) = cross_entropy(&[0.5, -1.0, 2.0], 1);
        assert!(loss > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }
}
