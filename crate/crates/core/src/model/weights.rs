//! Binary weights format.
//!
//! ```text
//! magic            4 bytes  "NSCW"
//! version          u32      1
//! layer_count      u32
//! dissection_layer u32
//! layer_count × {
//!     tag u8, then
//!     0 conv     in_ch u32, out_ch u32, kernel u32, stride u32, pad u32,
//!                f32 × out_ch·in_ch·kernel², f32 × out_ch
//!     1 relu
//!     2 maxpool  kernel u32, stride u32
//!     3 flatten
//!     4 linear   in_dim u32, out_dim u32, f32 × out_dim·in_dim, f32 × out_dim
//!     5 softmax
//! }
//! ```
//!
//! All integers and floats are little-endian; tensors are row-major with the
//! weights before the biases. Nothing may follow the last layer.

use std::io::{self, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{fingerprint_bytes, Conv2d, InferenceError, Layer, Linear, Model};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NSCW";
pub const WEIGHTS_VERSION: u32 = 1;

const TAG_CONV: u8 = 0;
const TAG_RELU: u8 = 1;
const TAG_MAXPOOL: u8 = 2;
const TAG_FLATTEN: u8 = 3;
const TAG_LINEAR: u8 = 4;
const TAG_SOFTMAX: u8 = 5;

fn eof_as_truncated(err: io::Error) -> InferenceError {
    if err.kind() == io::ErrorKind::UnexpectedEof {
        InferenceError::Truncated
    } else {
        InferenceError::Io(err)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, InferenceError> {
    r.read_u32::<LittleEndian>().map_err(eof_as_truncated)
}

fn read_dim(r: &mut impl Read) -> Result<usize, InferenceError> {
    read_u32(r).map(|v| v as usize)
}

fn read_floats(r: &mut Cursor<&[u8]>, count: usize) -> Result<Vec<f32>, InferenceError> {
    let remaining = r.get_ref().len() as u64 - r.position();
    if (count as u64) * 4 > remaining {
        return Err(InferenceError::Truncated);
    }
    let mut out = vec![0.0f32; count];
    r.read_f32_into::<LittleEndian>(&mut out).map_err(eof_as_truncated)?;
    Ok(out)
}

impl Model {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, InferenceError> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| InferenceError::BadMagic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(InferenceError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != WEIGHTS_VERSION {
            return Err(InferenceError::UnsupportedVersion(version));
        }
        let layer_count = read_dim(&mut r)?;
        let dissection_layer = read_dim(&mut r)?;
        let mut layers = Vec::with_capacity(layer_count.min(1024));
        for _ in 0..layer_count {
            let tag = r.read_u8().map_err(eof_as_truncated)?;
            let layer = match tag {
                TAG_CONV => {
                    let in_ch = read_dim(&mut r)?;
                    let out_ch = read_dim(&mut r)?;
                    let kernel = read_dim(&mut r)?;
                    let stride = read_dim(&mut r)?;
                    let pad = read_dim(&mut r)?;
                    let count = out_ch
                        .checked_mul(in_ch)
                        .and_then(|v| v.checked_mul(kernel))
                        .and_then(|v| v.checked_mul(kernel))
                        .ok_or(InferenceError::Truncated)?;
                    let weights = read_floats(&mut r, count)?;
                    let bias = read_floats(&mut r, out_ch)?;
                    Layer::Conv(Conv2d::new(in_ch, out_ch, kernel, stride, pad, weights, bias)?)
                }
                TAG_RELU => Layer::Relu,
                TAG_MAXPOOL => {
                    let kernel = read_dim(&mut r)?;
                    let stride = read_dim(&mut r)?;
                    Layer::MaxPool { kernel, stride }
                }
                TAG_FLATTEN => Layer::Flatten,
                TAG_LINEAR => {
                    let in_dim = read_dim(&mut r)?;
                    let out_dim = read_dim(&mut r)?;
                    let count = in_dim.checked_mul(out_dim).ok_or(InferenceError::Truncated)?;
                    let weights = read_floats(&mut r, count)?;
                    let bias = read_floats(&mut r, out_dim)?;
                    Layer::Linear(Linear::new(in_dim, out_dim, weights, bias)?)
                }
                TAG_SOFTMAX => Layer::Softmax,
                other => return Err(InferenceError::UnknownLayerTag(other)),
            };
            layers.push(layer);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(InferenceError::ShapeMismatch(format!(
                "{} trailing bytes after the last layer",
                bytes.len() - r.position() as usize
            )));
        }
        let mut model = Model::new(layers, Some(dissection_layer))?;
        model.set_fingerprint(fingerprint_bytes(bytes));
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_u32::<LittleEndian>(WEIGHTS_VERSION)?;
        w.write_u32::<LittleEndian>(self.layers.len() as u32)?;
        w.write_u32::<LittleEndian>(self.spec.dissection_layer as u32)?;
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    w.write_u8(TAG_CONV)?;
                    for dim in [c.in_ch, c.out_ch, c.kernel, c.stride, c.pad] {
                        w.write_u32::<LittleEndian>(dim as u32)?;
                    }
                    write_floats(w, &c.weights)?;
                    write_floats(w, &c.bias)?;
                }
                Layer::Relu => w.write_u8(TAG_RELU)?,
                Layer::MaxPool { kernel, stride } => {
                    w.write_u8(TAG_MAXPOOL)?;
                    w.write_u32::<LittleEndian>(*kernel as u32)?;
                    w.write_u32::<LittleEndian>(*stride as u32)?;
                }
                Layer::Flatten => w.write_u8(TAG_FLATTEN)?,
                Layer::Linear(l) => {
                    w.write_u8(TAG_LINEAR)?;
                    w.write_u32::<LittleEndian>(l.in_dim as u32)?;
                    w.write_u32::<LittleEndian>(l.out_dim as u32)?;
                    write_floats(w, &l.weights)?;
                    write_floats(w, &l.bias)?;
                }
                Layer::Softmax => w.write_u8(TAG_SOFTMAX)?,
            }
        }
        Ok(())
    }
}

fn write_floats(w: &mut impl Write, values: &[f32]) -> io::Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Model, InferenceError> {
    let bytes = std::fs::read(path)?;
    Model::from_bytes(&bytes)
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<(), InferenceError> {
    std::fs::write(path, model.to_bytes())?;
    Ok(())
}
