//! Hand-wired demo model and synthetic shape images.
//!
//! The model has eight dissection neurons with known behavior, which makes
//! it useful for demos and end-to-end tests without trained weights:
//!
//! | channel | fires on |
//! |---------|----------|
//! | 0 | right-angle corners (squares) |
//! | 1 | 45° staircase edges (discs) |
//! | 2 | raw brightness (weak) |
//! | 3 | top edges of bright shapes |
//! | 4 | top-left / bottom-right corners |
//! | 5 | one diagonal orientation |
//! | 6 | interiors of bright regions |
//! | 7 | nothing (dead neuron) |

use crate::corpus::GrayImage;
use crate::model::{Conv2d, Layer, Linear, Model};

pub const SQUARE_NEURON: usize = 0;
pub const CIRCLE_NEURON: usize = 1;
pub const NEURONS: usize = 8;

const FIRST_CHANNELS: usize = 10;

/// 3×3 binary template: `+1` where the pattern is bright, `-1` elsewhere.
fn template(rows: [[u8; 3]; 3]) -> [f32; 9] {
    let mut w = [0.0; 9];
    for (i, v) in rows.iter().flatten().enumerate() {
        w[i] = if *v == 1 { 1.0 } else { -1.0 };
    }
    w
}

fn rotate(t: [f32; 9]) -> [f32; 9] {
    // 90° clockwise
    let mut out = [0.0; 9];
    for y in 0..3 {
        for x in 0..3 {
            out[x * 3 + (2 - y)] = t[y * 3 + x];
        }
    }
    out
}

fn rotations(t: [f32; 9]) -> [[f32; 9]; 4] {
    let r1 = rotate(t);
    let r2 = rotate(r1);
    let r3 = rotate(r2);
    [t, r1, r2, r3]
}

/// Rewrites a filter designed for `[0, 1]` pixels so it gives the same
/// response on normalized `[-1, 1]` input.
fn for_normalized_input(raw: &[f32; 9], raw_bias: f32) -> ([f32; 9], f32) {
    let mut w = [0.0; 9];
    let mut bias = raw_bias;
    for (o, r) in w.iter_mut().zip(raw) {
        *o = r / 2.0;
        bias += r / 2.0;
    }
    (w, bias)
}

fn first_layer() -> Conv2d {
    let corner = template([[0, 0, 0], [0, 1, 1], [0, 1, 1]]);
    let staircase = template([[0, 0, 1], [0, 1, 1], [1, 1, 1]]);
    let mut brightness = [0.0; 9];
    brightness[4] = 1.0;
    let top_edge = [-1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];

    let mut filters: Vec<([f32; 9], f32)> = Vec::new();
    // an exact corner scores 4; nothing on a digital disc reaches it
    filters.extend(rotations(corner).iter().map(|t| (*t, -3.5)));
    // axis-aligned rectangles score at most 4 against a staircase
    filters.extend(rotations(staircase).iter().map(|t| (*t, -4.5)));
    filters.push((brightness, 0.0));
    filters.push((top_edge, 0.0));
    debug_assert_eq!(filters.len(), FIRST_CHANNELS);

    let mut weights = Vec::with_capacity(FIRST_CHANNELS * 9);
    let mut bias = Vec::with_capacity(FIRST_CHANNELS);
    for (raw, raw_bias) in &filters {
        let (w, b) = for_normalized_input(raw, *raw_bias);
        weights.extend_from_slice(&w);
        bias.push(b);
    }
    Conv2d::vgg(1, FIRST_CHANNELS, weights, bias).expect("static shapes")
}

fn second_layer() -> Conv2d {
    let mut weights = vec![0.0f32; NEURONS * FIRST_CHANNELS * 9];
    let mut set = |o: usize, c: usize, taps: &[usize], w: f32| {
        for &t in taps {
            weights[(o * FIRST_CHANNELS + c) * 9 + t] = w;
        }
    };
    let boxed: Vec<usize> = (0..9).collect();
    let center = [4usize];
    for c in 0..4 {
        set(0, c, &boxed, 1.0);
    }
    for c in 4..8 {
        set(1, c, &boxed, 1.0);
    }
    set(2, 8, &center, 0.25);
    set(3, 9, &center, 0.2);
    set(4, 0, &center, 1.0);
    set(4, 2, &center, 1.0);
    set(5, 4, &center, 1.0);
    set(6, 8, &boxed, 0.1);
    let bias = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.5, 0.0];
    Conv2d::vgg(FIRST_CHANNELS, NEURONS, weights, bias).expect("static shapes")
}

/// The shape-detector model for `patch × patch` inputs (`patch` divisible by 4).
///
/// Layout: conv(1→10) relu pool conv(10→8) relu pool flatten linear(→2)
/// softmax; the second convolution is the dissection layer. Class 1 is the
/// "lesion" class and rises with corner and staircase evidence.
pub fn shape_model(patch: usize) -> Model {
    assert!(
        patch >= 4 && patch.is_multiple_of(4),
        "patch must be a positive multiple of 4"
    );
    let cells = (patch / 4) * (patch / 4);
    let in_dim = NEURONS * cells;
    let mut head = vec![0.0f32; 2 * in_dim];
    for n in [SQUARE_NEURON, CIRCLE_NEURON] {
        for cell in 0..cells {
            head[in_dim + n * cells + cell] = 0.5;
        }
    }
    let layers = vec![
        Layer::Conv(first_layer()),
        Layer::Relu,
        Layer::max_pool(),
        Layer::Conv(second_layer()),
        Layer::Relu,
        Layer::max_pool(),
        Layer::Flatten,
        Layer::Linear(Linear::new(in_dim, 2, head, vec![0.0, -1.0]).expect("static shapes")),
        Layer::Softmax,
    ];
    Model::new(layers, None).expect("static model is valid")
}

/// Draws a filled axis-aligned square with top-left corner `(x, y)`.
pub fn draw_square(img: &mut GrayImage, x: usize, y: usize, side: usize, value: f32) {
    for yy in y..(y + side).min(img.height) {
        for xx in x..(x + side).min(img.width) {
            img.pixels[yy * img.width + xx] = value;
        }
    }
}

/// Draws a filled digital disc: pixels with `dx² + dy² ≤ r²`.
pub fn draw_disc(img: &mut GrayImage, cx: usize, cy: usize, r: usize, value: f32) {
    let r2 = (r * r) as i64;
    for y in cy.saturating_sub(r)..(cy + r + 1).min(img.height) {
        for x in cx.saturating_sub(r)..(cx + r + 1).min(img.width) {
            let dx = x as i64 - cx as i64;
            let dy = y as i64 - cy as i64;
            if dx * dx + dy * dy <= r2 {
                img.pixels[y * img.width + x] = value;
            }
        }
    }
}

pub fn blank(width: usize, height: usize) -> GrayImage {
    GrayImage::from_fn(width, height, |_, _| 0.0)
}

/// Shape drawn into a synthetic patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square { x: usize, y: usize, side: usize },
    Disc { cx: usize, cy: usize, r: usize },
}

impl Shape {
    pub fn draw(&self, img: &mut GrayImage) {
        match *self {
            Shape::Square { x, y, side } => draw_square(img, x, y, side, 1.0),
            Shape::Disc { cx, cy, r } => draw_disc(img, cx, cy, r, 1.0),
        }
    }

    /// Bounding box `(x, y, width, height)`.
    pub fn bounds(&self) -> (usize, usize, usize, usize) {
        match *self {
            Shape::Square { x, y, side } => (x, y, side, side),
            Shape::Disc { cx, cy, r } => (cx - r, cy - r, 2 * r + 1, 2 * r + 1),
        }
    }
}

pub fn render(width: usize, height: usize, shapes: &[Shape]) -> GrayImage {
    let mut img = blank(width, height);
    for s in shapes {
        s.draw(&mut img);
    }
    img
}

/// Plain backgrounds: uniform gray levels and horizontal ramps.
pub fn background(index: usize, width: usize, height: usize) -> GrayImage {
    let level = 0.05 + 0.85 * ((index * 7) % 20) as f32 / 19.0;
    if index.is_multiple_of(2) {
        GrayImage::from_fn(width, height, |_, _| level)
    } else {
        let span = width.max(2) as f32 - 1.0;
        GrayImage::from_fn(width, height, |x, _| level * x as f32 / span)
    }
}

/// Shapes placed in [`reference_corpus`], keyed by image id.
pub const REFERENCE_SHAPES: [(&str, Shape); 4] = [
    ("square-0", Shape::Square { x: 4, y: 4, side: 10 }),
    ("disc-0", Shape::Disc { cx: 10, cy: 10, r: 6 }),
    ("square-1", Shape::Square { x: 16, y: 6, side: 12 }),
    ("disc-1", Shape::Disc { cx: 20, cy: 14, r: 7 }),
];

/// A deterministic reference corpus of 64 patches of 32×32: mostly shape-free
/// backgrounds with two squares and two discs, so that the shape detectors
/// fire on well under 1% of all positions. Returns `(image_id, image)` pairs.
pub fn reference_corpus() -> Vec<(String, GrayImage)> {
    let mut out = Vec::with_capacity(64);
    let mut shapes = REFERENCE_SHAPES.iter();
    let mut bg = 0;
    for i in 0..64 {
        if i % 16 == 7 {
            let (id, shape) = shapes.next().expect("four shape slots");
            out.push((id.to_string(), render(32, 32, &[*shape])));
        } else {
            out.push((format!("tissue-{bg:02}"), background(bg, 32, 32)));
            bg += 1;
        }
    }
    out
}
