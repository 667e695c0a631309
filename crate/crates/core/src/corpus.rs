//! Grayscale images and the reference corpus manifest.

use std::collections::HashSet;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::FeatureTensor;

/// Name of the optional manifest inside a corpus directory.
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    Empty,
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A single-channel image with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    /// 8-bit samples scaled by 1/255.
    pub fn from_luma8(width: usize, height: usize, samples: &[u8]) -> Self {
        Self {
            width,
            height,
            pixels: samples.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Decodes a PNG. 8-bit data is scaled by 1/255 and 16-bit data by
    /// 1/65535; color images are converted to luma first.
    pub fn decode_png(bytes: &[u8]) -> Result<Self, image::ImageError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        Ok(match img {
            DynamicImage::ImageLuma16(buf) => Self {
                width,
                height,
                pixels: buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
            },
            DynamicImage::ImageLuma8(buf) => Self::from_luma8(width, height, buf.as_raw()),
            other => Self::from_luma8(width, height, other.to_luma8().as_raw()),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode_png(&bytes).map_err(|source| CorpusError::Decode {
            path: path.display().to_string(),
            source,
        })
    }

    /// Encodes as an 8-bit grayscale PNG (values rounded to the nearest level).
    pub fn encode_png8(&self) -> Vec<u8> {
        let samples: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, samples)
            .expect("buffer matches dimensions");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)
            .expect("encoding to memory cannot fail");
        out.into_inner()
    }

    /// Reads only the PNG header.
    pub fn dimensions(path: impl AsRef<Path>) -> Result<(usize, usize), CorpusError> {
        let path = path.as_ref();
        let decode = |source| CorpusError::Decode {
            path: path.display().to_string(),
            source,
        };
        let reader = image::ImageReader::open(path)
            .map_err(|source| CorpusError::Io {
                path: path.display().to_string(),
                source,
            })?
            .with_guessed_format()
            .map_err(|source| CorpusError::Io {
                path: path.display().to_string(),
                source,
            })?;
        let (w, h) = reader.into_dimensions().map_err(decode)?;
        Ok((w as usize, h as usize))
    }

    pub fn to_tensor(&self) -> FeatureTensor {
        FeatureTensor::new(1, self.height, self.width, self.pixels.clone()).expect("pixel buffer matches dimensions")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub image_id: String,
    /// Path relative to the corpus root (or absolute).
    pub path: String,
}

/// Ordered, uniquely-identified set of reference images.
///
/// The order is fixed: it defines the column order of the activation table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCorpus {
    root: PathBuf,
    entries: Vec<CorpusEntry>,
}

impl ReferenceCorpus {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<CorpusEntry>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(CorpusError::DuplicateId(e.image_id.clone()));
            }
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    /// Reads `manifest.tsv` from `dir` if present, otherwise lists the PNG
    /// files in `dir` sorted by name, using the file stem as the image id.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let dir = dir.as_ref();
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.exists() {
            let text = std::fs::read_to_string(&manifest).map_err(|source| CorpusError::Io {
                path: manifest.display().to_string(),
                source,
            })?;
            return Self::new(dir, parse_manifest(&text)?);
        }
        let listing = std::fs::read_dir(dir).map_err(|source| CorpusError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut names: Vec<String> = listing
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
            .collect();
        names.sort();
        let entries = names
            .into_iter()
            .map(|name| CorpusEntry {
                image_id: name[..name.len() - 4].to_string(),
                path: name,
            })
            .collect();
        Self::new(dir, entries)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.image_id == image_id)
    }

    pub fn path_of(&self, index: usize) -> PathBuf {
        self.root.join(&self.entries[index].path)
    }

    pub fn load(&self, index: usize) -> Result<GrayImage, CorpusError> {
        GrayImage::load(self.path_of(index))
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn manifest_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\n", e.image_id, e.path))
            .collect()
    }
}

/// Parses `image_id<TAB>path` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<CorpusEntry>, CorpusError> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((id, path)) = line.split_once('\t') else {
            return Err(CorpusError::Manifest {
                line: i + 1,
                message: "expected image_id<TAB>path".into(),
            });
        };
        if id.is_empty() || path.is_empty() {
            return Err(CorpusError::Manifest {
                line: i + 1,
                message: "empty image id or path".into(),
            });
        }
        entries.push(CorpusEntry {
            image_id: id.to_string(),
            path: path.to_string(),
        });
    }
    Ok(entries)
}
