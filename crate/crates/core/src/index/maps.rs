//! Thresholded activation masks at input resolution.

use super::IndexError;
use crate::mask::BinaryMask;
use crate::tensor::FeatureTensor;

/// Source coordinate lookup for one output axis (half-pixel centers,
/// clamped at the borders).
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            taps.lo.push(lo);
            taps.hi.push((lo + 1).min(in_len - 1));
            taps.frac.push(src - lo as f64);
        }
        taps
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // clamped so that equal endpoints stay exact and rounding never leaves [a, b]
    (a + (b - a) * t).clamp(a.min(b), a.max(b))
}

/// Bilinearly upsamples a `height × width` plane to `out_w × out_h` and
/// sets every pixel whose interpolated value is strictly above `threshold`.
pub fn threshold_plane(
    plane: &[f32],
    width: usize,
    height: usize,
    threshold: f32,
    out_w: usize,
    out_h: usize,
) -> Result<BinaryMask, IndexError> {
    if width == 0 || height == 0 || out_w < width || out_h < height {
        return Err(IndexError::OutputTooSmall {
            map: (width, height),
            output: (out_w, out_h),
        });
    }
    let mut max = f32::NEG_INFINITY;
    for &v in plane {
        if !v.is_finite() {
            return Err(IndexError::NonFinite);
        }
        max = max.max(v);
    }
    if !threshold.is_finite() {
        return Err(IndexError::NonFinite);
    }
    // Interpolation never exceeds the map maximum.
    if max <= threshold {
        return Ok(BinaryMask::new(out_w, out_h));
    }

    let q = threshold as f64;
    let xs = AxisTaps::new(width, out_w);
    let ys = AxisTaps::new(height, out_h);

    let mut rows = vec![0.0f64; height * out_w];
    for r in 0..height {
        let src = &plane[r * width..(r + 1) * width];
        let dst = &mut rows[r * out_w..(r + 1) * out_w];
        for x in 0..out_w {
            dst[x] = lerp(src[xs.lo[x]] as f64, src[xs.hi[x]] as f64, xs.frac[x]);
        }
    }

    let mut words = vec![0u64; (out_w * out_h).div_ceil(64)];
    for y in 0..out_h {
        let top = &rows[ys.lo[y] * out_w..(ys.lo[y] + 1) * out_w];
        let bottom = &rows[ys.hi[y] * out_w..(ys.hi[y] + 1) * out_w];
        let fy = ys.frac[y];
        let base = y * out_w;
        for x in 0..out_w {
            if lerp(top[x], bottom[x], fy) > q {
                let i = base + x;
                words[i / 64] |= 1 << (i % 64);
            }
        }
    }
    Ok(BinaryMask::from_words(out_w, out_h, words))
}

/// Activation mask of a single-channel map at `out_w × out_h`.
pub fn activation_mask(
    map: &FeatureTensor,
    threshold: f32,
    out_w: usize,
    out_h: usize,
) -> Result<BinaryMask, IndexError> {
    if map.channels() != 1 {
        return Err(IndexError::Malformed(format!(
            "activation map must have one channel, got {}",
            map.channels()
        )));
    }
    threshold_plane(map.data(), map.width(), map.height(), threshold, out_w, out_h)
}
