//! Bit-packed binary masks, their run-length wire form, and IoU.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("malformed run-length mask: {0}")]
    MalformedRle(String),
}

/// A `width × height` grid of bits, row-major, packed into 64-bit words.
///
/// Bits past `width * height` in the last word are always zero.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("count", &self.count())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            words: vec![0; (width * height).div_ceil(64)],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        let mut mask = Self::new(width, height);
        mask.words.fill(u64::MAX);
        mask.clear_tail();
        mask
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut mask = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }

    /// Filled axis-aligned rectangle `[x0, x0+w) × [y0, y0+h)`, clipped.
    pub fn rect(width: usize, height: usize, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self::from_fn(width, height, |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h)
    }

    /// Builds a mask from one row-major bit per pixel.
    pub fn from_bits(width: usize, height: usize, bits: &[bool]) -> Result<Self, MaskError> {
        if bits.len() != width * height {
            return Err(MaskError::MalformedRle(format!(
                "expected {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        let mut mask = Self::new(width, height);
        for (i, &b) in bits.iter().enumerate() {
            if b {
                mask.words[i / 64] |= 1 << (i % 64);
            }
        }
        Ok(mask)
    }

    pub(crate) fn from_words(width: usize, height: usize, words: Vec<u64>) -> Self {
        debug_assert_eq!(words.len(), (width * height).div_ceil(64));
        let mut mask = Self { width, height, words };
        mask.clear_tail();
        mask
    }

    fn clear_tail(&mut self) {
        let bits = self.width * self.height;
        if !bits.is_multiple_of(64) {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << (bits % 64)) - 1;
            }
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * self.width + x;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        let i = y * self.width + x;
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_blank(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.width != other.width || self.height != other.height {
            return Err(MaskError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// `(|A ∩ B|, |A ∪ B|)` via word-wise popcounts.
    pub fn overlap_counts(&self, other: &BinaryMask) -> Result<(usize, usize), MaskError> {
        self.same_dims(other)?;
        let mut inter = 0u64;
        let mut union = 0u64;
        for (a, b) in self.words.iter().zip(&other.words) {
            inter += (a & b).count_ones() as u64;
            union += (a | b).count_ones() as u64;
        }
        Ok((inter as usize, union as usize))
    }

    /// Row-major run lengths, alternating and starting with a run of zeros
    /// (which may be empty).
    pub fn to_rle(&self) -> RleMask {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for i in 0..self.width * self.height {
            let bit = self.words[i / 64] >> (i % 64) & 1 == 1;
            if bit != current {
                counts.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
        if run > 0 || counts.is_empty() {
            counts.push(run);
        }
        RleMask {
            width: self.width,
            height: self.height,
            counts,
        }
    }

    pub fn from_rle(rle: &RleMask) -> Result<Self, MaskError> {
        if rle.width == 0 || rle.height == 0 {
            return Err(MaskError::MalformedRle("mask has no pixels".into()));
        }
        let total = rle
            .width
            .checked_mul(rle.height)
            .ok_or_else(|| MaskError::MalformedRle("dimensions overflow".into()))?;
        let sum: u64 = rle.counts.iter().map(|&c| c as u64).sum();
        if sum != total as u64 {
            return Err(MaskError::MalformedRle(format!(
                "runs cover {sum} pixels, mask has {total}"
            )));
        }
        let mut mask = Self::new(rle.width, rle.height);
        let mut pos = 0usize;
        for (i, &run) in rle.counts.iter().enumerate() {
            let run = run as usize;
            if i % 2 == 1 {
                for p in pos..pos + run {
                    mask.words[p / 64] |= 1 << (p % 64);
                }
            }
            pos += run;
        }
        Ok(mask)
    }
}

/// Wire form of a [`BinaryMask`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl From<&BinaryMask> for RleMask {
    fn from(mask: &BinaryMask) -> Self {
        mask.to_rle()
    }
}

impl TryFrom<&RleMask> for BinaryMask {
    type Error = MaskError;

    fn try_from(rle: &RleMask) -> Result<Self, Self::Error> {
        BinaryMask::from_rle(rle)
    }
}

/// Intersection over union, `|A ∩ B| / |A ∪ B|`; two empty masks score 0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    let (inter, union) = a.overlap_counts(b)?;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}
