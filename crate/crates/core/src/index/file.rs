//! Binary index file.
//!
//! ```text
//! magic        4 bytes  "NSCI"
//! version      u32      1
//! fingerprint  32 bytes SHA-256 of the weights file
//! layer        u32
//! neurons      u32      m
//! images       u32      n
//! tau          f64
//! sample_rate  f64
//! seed         u64
//! n × { id_len u32, id utf-8, path_len u32, path utf-8 }
//! table        f32 × m·n  (neuron-major)
//! thresholds   f32 × m
//! ```
//!
//! Little-endian throughout; nothing may follow the thresholds.

use std::io::{self, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ActivationIndex, ActivationTable, IndexConfig, IndexError, QuantileThresholds};
use crate::corpus::CorpusEntry;
use crate::model::Model;

pub const INDEX_MAGIC: &[u8; 4] = b"NSCI";
pub const INDEX_VERSION: u32 = 1;

fn eof_as_truncated(err: io::Error) -> IndexError {
    if err.kind() == io::ErrorKind::UnexpectedEof {
        IndexError::Truncated
    } else {
        IndexError::Io(err)
    }
}

fn remaining(r: &Cursor<&[u8]>) -> u64 {
    r.get_ref().len() as u64 - r.position()
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32, IndexError> {
    r.read_u32::<LittleEndian>().map_err(eof_as_truncated)
}

fn read_string(r: &mut Cursor<&[u8]>) -> Result<String, IndexError> {
    let len = read_u32(r)? as u64;
    if len > remaining(r) {
        return Err(IndexError::Truncated);
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(eof_as_truncated)?;
    String::from_utf8(buf).map_err(|_| IndexError::Malformed("manifest entry is not UTF-8".into()))
}

fn read_floats(r: &mut Cursor<&[u8]>, count: u64) -> Result<Vec<f32>, IndexError> {
    if count.saturating_mul(4) > remaining(r) {
        return Err(IndexError::Truncated);
    }
    let mut out = vec![0.0f32; count as usize];
    r.read_f32_into::<LittleEndian>(&mut out).map_err(eof_as_truncated)?;
    Ok(out)
}

fn write_string(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

impl ActivationIndex {
    pub fn to_bytes(&self) -> Result<Vec<u8>, IndexError> {
        let fingerprint = hex::decode(&self.model_fingerprint)
            .ok()
            .filter(|b| b.len() == 32)
            .ok_or_else(|| IndexError::Malformed("model fingerprint is not a SHA-256 hex digest".into()))?;
        let mut w = Vec::new();
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_VERSION)?;
        w.write_all(&fingerprint)?;
        w.write_u32::<LittleEndian>(self.table.layer as u32)?;
        w.write_u32::<LittleEndian>(self.table.neurons() as u32)?;
        w.write_u32::<LittleEndian>(self.table.images() as u32)?;
        w.write_f64::<LittleEndian>(self.config.tau)?;
        w.write_f64::<LittleEndian>(self.config.sample_rate)?;
        w.write_u64::<LittleEndian>(self.config.seed)?;
        for entry in &self.manifest {
            write_string(&mut w, &entry.image_id)?;
            write_string(&mut w, &entry.path)?;
        }
        for &v in self.table.values().iter().chain(&self.thresholds.values) {
            w.write_f32::<LittleEndian>(v)?;
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| IndexError::BadMagic)?;
        if &magic != INDEX_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != INDEX_VERSION {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let mut fingerprint = [0u8; 32];
        r.read_exact(&mut fingerprint).map_err(eof_as_truncated)?;
        let layer = read_u32(&mut r)? as usize;
        let neurons = read_u32(&mut r)? as u64;
        let images = read_u32(&mut r)? as u64;
        let tau = r.read_f64::<LittleEndian>().map_err(eof_as_truncated)?;
        let sample_rate = r.read_f64::<LittleEndian>().map_err(eof_as_truncated)?;
        let seed = r.read_u64::<LittleEndian>().map_err(eof_as_truncated)?;
        let mut manifest = Vec::new();
        for _ in 0..images {
            let image_id = read_string(&mut r)?;
            let path = read_string(&mut r)?;
            manifest.push(CorpusEntry { image_id, path });
        }
        let values = read_floats(&mut r, neurons * images)?;
        let thresholds = read_floats(&mut r, neurons)?;
        if remaining(&r) != 0 {
            return Err(IndexError::Malformed(format!("{} trailing bytes", remaining(&r))));
        }
        if thresholds.iter().any(|q| !q.is_finite()) {
            return Err(IndexError::NonFinite);
        }
        Ok(ActivationIndex {
            model_fingerprint: hex::encode(fingerprint),
            config: IndexConfig { tau, sample_rate, seed },
            manifest,
            table: ActivationTable::new(layer, neurons as usize, images as usize, values)?,
            thresholds: QuantileThresholds {
                tau,
                values: thresholds,
            },
        })
    }
}

pub fn save_index(index: &ActivationIndex, path: impl AsRef<Path>) -> Result<(), IndexError> {
    std::fs::write(path, index.to_bytes()?)?;
    Ok(())
}

/// Loads an index and checks that it was built from `model`.
pub fn load_index(path: impl AsRef<Path>, model: &Model) -> Result<ActivationIndex, IndexError> {
    let index = ActivationIndex::from_bytes(&std::fs::read(path)?)?;
    index.ensure_model(model)?;
    Ok(index)
}
