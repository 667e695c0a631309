//! Layer primitives for the forward pass.
//!
//! Convolution is cross-correlation (no kernel flip) with zero padding, the
//! usual deep-learning convention.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::InferenceError;
use crate::tensor::FeatureTensor;

/// Work (multiply-adds) above which convolution fans out across threads.
const PARALLEL_CONV_WORK: usize = 1 << 16;

/// A 2-D convolution with its parameters.
///
/// `weights` is laid out `[out_ch][in_ch][kernel][kernel]`, `bias` has one
/// entry per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self, InferenceError> {
        if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
            return Err(InferenceError::ShapeMismatch(format!(
                "conv dimensions must be positive (in={in_ch}, out={out_ch}, k={kernel}, s={stride})"
            )));
        }
        let expected = out_ch * in_ch * kernel * kernel;
        if weights.len() != expected || bias.len() != out_ch {
            return Err(InferenceError::ShapeMismatch(format!(
                "conv {in_ch}->{out_ch} k={kernel} expects {expected} weights and {out_ch} biases, got {} and {}",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weights,
            bias,
        })
    }

    /// Standard VGG block convolution: 3×3, stride 1, padding 1.
    pub fn vgg(in_ch: usize, out_ch: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self, InferenceError> {
        Self::new(in_ch, out_ch, 3, 1, 1, weights, bias)
    }

    #[inline]
    pub fn weight(&self, o: usize, c: usize, dy: usize, dx: usize) -> f32 {
        self.weights[((o * self.in_ch + c) * self.kernel + dy) * self.kernel + dx]
    }

    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize), InferenceError> {
        let h = conv_out_dim(height, self.kernel, self.stride, self.pad);
        let w = conv_out_dim(width, self.kernel, self.stride, self.pad);
        match (h, w) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(InferenceError::OutputTooSmall {
                height,
                width,
                kernel: self.kernel,
            }),
        }
    }
}

fn conv_out_dim(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Output positions `lo..hi` along one axis whose input tap
/// `pos * stride + tap - pad` lands inside `0..len`.
#[inline]
fn valid_range(out_len: usize, len: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    // pos * stride + tap - pad <= len - 1
    let hi = if len + pad < tap + 1 {
        0
    } else {
        ((len + pad - tap - 1) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// Direct convolution. See [`Conv2d`] for the weight layout.
pub fn conv2d(input: &FeatureTensor, conv: &Conv2d) -> Result<FeatureTensor, InferenceError> {
    let (in_c, in_h, in_w) = input.shape();
    if in_c != conv.in_ch {
        return Err(InferenceError::ChannelMismatch {
            expected: conv.in_ch,
            got: in_c,
        });
    }
    let (out_h, out_w) = conv.output_size(in_h, in_w)?;
    let plane = out_h * out_w;
    let mut out = vec![0.0f32; conv.out_ch * plane];

    let fill_channel = |o: usize, dst: &mut [f32]| {
        dst.fill(conv.bias[o]);
        for c in 0..in_c {
            let src = input.channel(c);
            for dy in 0..conv.kernel {
                let (y_lo, y_hi) = valid_range(out_h, in_h, dy, conv.stride, conv.pad);
                for dx in 0..conv.kernel {
                    let w = conv.weight(o, c, dy, dx);
                    if w == 0.0 {
                        continue;
                    }
                    let (x_lo, x_hi) = valid_range(out_w, in_w, dx, conv.stride, conv.pad);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let iy = y * conv.stride + dy - conv.pad;
                        let src_row = &src[iy * in_w..(iy + 1) * in_w];
                        let dst_row = &mut dst[y * out_w..(y + 1) * out_w];
                        if conv.stride == 1 {
                            let ix0 = x_lo + dx - conv.pad;
                            let n = x_hi - x_lo;
                            for (d, s) in dst_row[x_lo..x_hi].iter_mut().zip(&src_row[ix0..ix0 + n]) {
                                *d += w * s;
                            }
                        } else {
                            for x in x_lo..x_hi {
                                dst_row[x] += w * src_row[x * conv.stride + dx - conv.pad];
                            }
                        }
                    }
                }
            }
        }
    };

    let work = conv.out_ch * plane * in_c * conv.kernel * conv.kernel;
    if work >= PARALLEL_CONV_WORK && conv.out_ch > 1 {
        out.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(o, dst)| fill_channel(o, dst));
    } else {
        out.chunks_mut(plane)
            .enumerate()
            .for_each(|(o, dst)| fill_channel(o, dst));
    }
    FeatureTensor::new(conv.out_ch, out_h, out_w, out)
}

pub fn relu(t: &FeatureTensor) -> FeatureTensor {
    let mut out = t.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place(t: &mut FeatureTensor) {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
}

/// Max over each `kernel × kernel` window, stepping by `stride`.
pub fn maxpool2d(t: &FeatureTensor, kernel: usize, stride: usize) -> Result<FeatureTensor, InferenceError> {
    let (c, h, w) = t.shape();
    if kernel == 0 || stride == 0 {
        return Err(InferenceError::ShapeMismatch(
            "pooling kernel and stride must be positive".into(),
        ));
    }
    let (Some(out_h), Some(out_w)) = (conv_out_dim(h, kernel, stride, 0), conv_out_dim(w, kernel, stride, 0)) else {
        return Err(InferenceError::OutputTooSmall {
            height: h,
            width: w,
            kernel,
        });
    };
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let src = t.channel(ch);
        for y in 0..out_h {
            for x in 0..out_w {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..kernel {
                    let row = &src[(y * stride + dy) * w..];
                    for dx in 0..kernel {
                        m = m.max(row[x * stride + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    FeatureTensor::new(c, out_h, out_w, out)
}

/// A fully connected layer; `weights` is `[out_dim][in_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self, InferenceError> {
        if in_dim == 0 || out_dim == 0 {
            return Err(InferenceError::ShapeMismatch(
                "linear dimensions must be positive".into(),
            ));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(InferenceError::ShapeMismatch(format!(
                "linear {in_dim}->{out_dim} expects {} weights and {out_dim} biases, got {} and {}",
                in_dim * out_dim,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }
}

pub fn linear(v: &[f32], layer: &Linear) -> Result<Vec<f32>, InferenceError> {
    if v.len() != layer.in_dim {
        return Err(InferenceError::ShapeMismatch(format!(
            "linear layer expects {} inputs, got {}",
            layer.in_dim,
            v.len()
        )));
    }
    Ok(layer
        .weights
        .chunks_exact(layer.in_dim)
        .zip(&layer.bias)
        .map(|(row, b)| b + row.iter().zip(v).map(|(w, x)| w * x).sum::<f32>())
        .collect())
}

/// Exp-normalised probabilities, shifted by the maximum for stability.
pub fn softmax(v: &[f32]) -> Result<Vec<f32>, InferenceError> {
    if v.is_empty() {
        return Err(InferenceError::ShapeMismatch("softmax of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(InferenceError::NonFinite);
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = v.iter().map(|&x| (x as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / total) as f32).collect())
}

/// Maps a patch in `[0, 1]` to `[-1, 1]` (mean 0.5, std 0.5).
pub fn normalize(patch: &FeatureTensor) -> Result<FeatureTensor, InferenceError> {
    let mut out = patch.clone();
    for v in out.data_mut() {
        if !v.is_finite() {
            return Err(InferenceError::NonFinite);
        }
        if !(0.0..=1.0).contains(v) {
            return Err(InferenceError::OutOfRange(*v));
        }
        *v = (*v - 0.5) / 0.5;
    }
    Ok(out)
}
