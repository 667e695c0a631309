//! Naive reference implementations and random generators shared by the
//! integration tests. Everything here is deliberately written the slow,
//! obvious way and accumulates in f64.

#![allow(dead_code)]

use dissect_core::mask::BinaryMask;
use dissect_core::model::{Conv2d, Layer, Linear, Model};
use dissect_core::tensor::FeatureTensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut TestRng, len: usize, scale: f32) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn random_tensor(rng: &mut TestRng, c: usize, h: usize, w: usize) -> FeatureTensor {
    FeatureTensor::new(c, h, w, random_vec(rng, c * h * w, 1.0)).unwrap()
}

/// A tensor of values in `[0, 1]`.
pub fn random_patch(rng: &mut TestRng, c: usize, h: usize, w: usize) -> FeatureTensor {
    let data = (0..c * h * w).map(|_| rng.gen_range(0.0..=1.0)).collect();
    FeatureTensor::new(c, h, w, data).unwrap()
}

pub fn random_conv(rng: &mut TestRng, in_ch: usize, out_ch: usize, h: usize, w: usize) -> Conv2d {
    loop {
        let kernel = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=kernel / 2 + 1);
        if h + 2 * pad >= kernel && w + 2 * pad >= kernel {
            let weights = random_vec(rng, out_ch * in_ch * kernel * kernel, 1.0);
            let bias = random_vec(rng, out_ch, 0.5);
            return Conv2d::new(in_ch, out_ch, kernel, stride, pad, weights, bias).unwrap();
        }
    }
}

pub fn naive_conv(input: &FeatureTensor, conv: &Conv2d) -> FeatureTensor {
    let (c_in, h, w) = input.shape();
    assert_eq!(c_in, conv.in_ch);
    let k = conv.kernel;
    let out_h = (h + 2 * conv.pad - k) / conv.stride + 1;
    let out_w = (w + 2 * conv.pad - k) / conv.stride + 1;
    let mut out = FeatureTensor::zeros(conv.out_ch, out_h, out_w);
    for o in 0..conv.out_ch {
        for y in 0..out_h {
            for x in 0..out_w {
                let mut acc = conv.bias[o] as f64;
                for c in 0..c_in {
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = (y * conv.stride + dy) as isize - conv.pad as isize;
                            let ix = (x * conv.stride + dx) as isize - conv.pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wt = conv.weights[((o * c_in + c) * k + dy) * k + dx] as f64;
                            acc += wt * input.get(c, iy as usize, ix as usize) as f64;
                        }
                    }
                }
                out.set(o, y, x, acc as f32);
            }
        }
    }
    out
}

pub fn naive_maxpool(input: &FeatureTensor, k: usize, s: usize) -> FeatureTensor {
    let (c, h, w) = input.shape();
    let out_h = (h - k) / s + 1;
    let out_w = (w - k) / s + 1;
    let mut out = FeatureTensor::zeros(c, out_h, out_w);
    for ch in 0..c {
        for y in 0..out_h {
            for x in 0..out_w {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        m = m.max(input.get(ch, y * s + dy, x * s + dx));
                    }
                }
                out.set(ch, y, x, m);
            }
        }
    }
    out
}

pub fn naive_linear(v: &[f32], l: &Linear) -> Vec<f32> {
    (0..l.out_dim)
        .map(|o| {
            let mut acc = l.bias[o] as f64;
            for i in 0..l.in_dim {
                acc += l.weights[o * l.in_dim + i] as f64 * v[i] as f64;
            }
            acc as f32
        })
        .collect()
}

pub fn naive_softmax(v: &[f32]) -> Vec<f32> {
    let max = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = v.iter().map(|x| (*x as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| (x / s) as f32).collect()
}

pub fn naive_relu(t: &FeatureTensor) -> FeatureTensor {
    let (c, h, w) = t.shape();
    FeatureTensor::new(
        c,
        h,
        w,
        t.data().iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect(),
    )
    .unwrap()
}

/// Layer-by-layer forward pass built from the naive ops. Returns class
/// scores and the post-ReLU maps of `dissection`.
pub fn naive_forward(layers: &[Layer], dissection: usize, input: &FeatureTensor) -> (Vec<f32>, FeatureTensor) {
    let mut t = input.clone();
    let mut captured = None;
    for (i, layer) in layers.iter().enumerate() {
        t = match layer {
            Layer::Conv(c) => naive_conv(&t, c),
            Layer::Relu => naive_relu(&t),
            Layer::MaxPool { kernel, stride } => naive_maxpool(&t, *kernel, *stride),
            Layer::Flatten => {
                let d = t.data().to_vec();
                FeatureTensor::new(d.len(), 1, 1, d).unwrap()
            }
            Layer::Linear(l) => {
                let d = naive_linear(t.data(), l);
                FeatureTensor::new(d.len(), 1, 1, d).unwrap()
            }
            Layer::Softmax => {
                let d = naive_softmax(t.data());
                FeatureTensor::new(d.len(), 1, 1, d).unwrap()
            }
        };
        if i == dissection {
            captured = Some(naive_relu(&t));
        }
    }
    (t.data().to_vec(), captured.unwrap())
}

/// A random valid model for `c × h × w` inputs together with that input shape.
pub fn random_model(rng: &mut TestRng) -> (Model, (usize, usize, usize)) {
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(2..=8);
    let w = rng.gen_range(2..=8);
    let mut layers = Vec::new();
    let (mut ch, mut hh, mut ww) = (c, h, w);
    let convs = rng.gen_range(1..=2);
    for _ in 0..convs {
        let out = rng.gen_range(1..=4);
        let conv = random_conv(rng, ch, out, hh, ww);
        let (oh, ow) = conv.output_size(hh, ww).unwrap();
        layers.push(Layer::Conv(conv));
        layers.push(Layer::Relu);
        ch = out;
        hh = oh;
        ww = ow;
        if hh >= 2 && ww >= 2 && rng.gen_bool(0.5) {
            layers.push(Layer::max_pool());
            hh = (hh - 2) / 2 + 1;
            ww = (ww - 2) / 2 + 1;
        }
    }
    layers.push(Layer::Flatten);
    let classes = rng.gen_range(2..=4);
    let in_dim = ch * hh * ww;
    let lin = Linear::new(
        in_dim,
        classes,
        random_vec(rng, in_dim * classes, 1.0),
        random_vec(rng, classes, 0.5),
    )
    .unwrap();
    layers.push(Layer::Linear(lin));
    layers.push(Layer::Softmax);
    (Model::new(layers, None).unwrap(), (c, h, w))
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

pub fn random_mask(rng: &mut TestRng, w: usize, h: usize, density: f64) -> BinaryMask {
    let bits: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(density)).collect();
    BinaryMask::from_bits(w, h, &bits).unwrap()
}

/// IoU by counting pixels one at a time.
pub fn pixel_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Bilinear sample (half-pixel centers, edge clamped) of a `w × h` plane at
/// output pixel `(ox, oy)` of an `out_w × out_h` grid.
pub fn bilinear_at(plane: &[f32], w: usize, h: usize, out_w: usize, out_h: usize, ox: usize, oy: usize) -> f64 {
    let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    let at = |x: usize, y: usize| plane[y * w + x] as f64;
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}
