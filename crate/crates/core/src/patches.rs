//! Patch geometry: grid tiling for inference and sliding windows over
//! annotated regions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GrayImage;
use crate::tensor::FeatureTensor;

pub const DEFAULT_PATCH: usize = 512;
pub const DEFAULT_STRIDE: usize = 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PatchError {
    #[error("region does not intersect the {0}x{1} image")]
    RegionOutsideImage(usize, usize),
    #[error("patch size and stride must be positive")]
    ZeroSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Grid,
    SlidingWindow,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub image_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub provenance: Provenance,
}

/// Axis-aligned box `[x, x + width) × [y, y + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Tiles the image, zero-padded on the right and bottom up to a multiple of
/// `patch`, in row-major order.
pub fn grid_patches(image_id: &str, image_w: usize, image_h: usize, patch: usize) -> Vec<PatchRef> {
    if patch == 0 {
        return Vec::new();
    }
    let cols = image_w.div_ceil(patch);
    let rows = image_h.div_ceil(patch);
    let mut out = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            out.push(PatchRef {
                image_id: image_id.to_string(),
                x: c * patch,
                y: r * patch,
                size: patch,
                provenance: Provenance::Grid,
            });
        }
    }
    out
}

/// Window origins along one axis for the clipped span `[lo, hi)`.
fn axis_origins(lo: usize, hi: usize, image_len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if hi - lo >= patch {
        (lo..=hi - patch).step_by(stride).collect()
    } else {
        // too narrow for a full window: emit one, shifted inward if needed
        vec![lo.min(image_len.saturating_sub(patch))]
    }
}

/// Sliding windows of `patch` pixels stepping by `stride` inside `region`
/// (clipped to the image). Along an axis where the region is narrower than a
/// patch a single window is placed at the region start, moved inward so it
/// stays inside the image when possible.
pub fn sliding_window(
    image_id: &str,
    region: Region,
    patch: usize,
    stride: usize,
    image_w: usize,
    image_h: usize,
) -> Result<Vec<PatchRef>, PatchError> {
    if patch == 0 || stride == 0 {
        return Err(PatchError::ZeroSize);
    }
    let x1 = region.x.saturating_add(region.width).min(image_w);
    let y1 = region.y.saturating_add(region.height).min(image_h);
    if region.width == 0 || region.height == 0 || region.x >= x1 || region.y >= y1 {
        return Err(PatchError::RegionOutsideImage(image_w, image_h));
    }
    let xs = axis_origins(region.x, x1, image_w, patch, stride);
    let ys = axis_origins(region.y, y1, image_h, patch, stride);
    Ok(ys
        .iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| PatchRef {
                image_id: image_id.to_string(),
                x,
                y,
                size: patch,
                provenance: Provenance::SlidingWindow,
            })
        })
        .collect())
}

/// Crops a `size × size` patch; pixels past the image edge are 0.
pub fn extract(image: &GrayImage, patch: &PatchRef) -> FeatureTensor {
    let size = patch.size;
    let mut data = vec![0.0f32; size * size];
    let y_end = (patch.y + size).min(image.height);
    let x_end = (patch.x + size).min(image.width);
    if patch.x < image.width {
        for y in patch.y..y_end {
            let src = &image.pixels[y * image.width + patch.x..y * image.width + x_end];
            let dst = (y - patch.y) * size;
            data[dst..dst + src.len()].copy_from_slice(src);
        }
    }
    FeatureTensor::new(1, size, size, data).expect("patch buffer matches size")
}
