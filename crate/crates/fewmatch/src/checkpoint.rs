//! Checkpoint ("M3CK") serialization.
//!
//! Named tensors in a flat little-endian container:
//!
//! ```text
//! magic "M3CK" | version u32 | param count u32
//! per param: name_len u16 | name UTF-8 | rank u8 | dims u32 each | f32 data
//! ```
//!
//! This module only knows the container; which names and shapes make up a
//! model lives with the model itself. Readers reject wrong magic, unknown
//! versions, short records, duplicate or non-UTF-8 names, non-finite values,
//! and trailing bytes. Writes are deterministic in the order given, and
//! accepted values round-trip bit-exactly.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::wire::ByteReader;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"M3CK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named tensor as stored on disk. `dims` is empty for scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// Serializes tensors in the order given.
pub fn write_checkpoint_bytes(tensors: &[RawTensor]) -> Result<Vec<u8>> {
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::Checkpoint("too many tensors for header".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    out.write_u32::<LittleEndian>(count)?;
    let mut seen = BTreeSet::new();
    for t in tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {:?}", t.name)));
        }
        let name_len = u16::try_from(t.name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name {:?} too long", t.name)))?;
        let rank = u8::try_from(t.dims.len())
            .map_err(|_| Error::Checkpoint(format!("tensor {:?} rank too large", t.name)))?;
        if t.data.len() != t.element_count() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {:?}: dims {:?} imply {} elements, have {}",
                t.name,
                t.dims,
                t.element_count(),
                t.data.len()
            )));
        }
        out.write_u16::<LittleEndian>(name_len)?;
        out.extend_from_slice(t.name.as_bytes());
        out.write_u8(rank)?;
        for &d in &t.dims {
            out.write_u32::<LittleEndian>(d)?;
        }
        for &v in &t.data {
            out.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(out)
}

/// Parses a checkpoint from raw bytes, enforcing the format checks above.
pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<Vec<RawTensor>> {
    let mut r = ByteReader::new(bytes);
    let magic = r.bytes(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32_le("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32_le("param count")? as usize;

    let mut tensors = Vec::with_capacity(count.min(1024));
    let mut seen = BTreeSet::new();
    for i in 0..count {
        let what = format!("tensor {i}");
        let name_len = r.u16_le(&what)? as usize;
        let name_bytes = r.bytes(name_len, &what)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
        }
        let rank = r.u8(&what)? as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut elements: usize = 1;
        for _ in 0..rank {
            let d = r.u32_le(&what)?;
            elements = elements
                .checked_mul(d as usize)
                .ok_or_else(|| Error::TruncatedRecord(format!("{what}: size overflows")))?;
            dims.push(d);
        }
        let data = r.f32_vec(elements, &what)?;
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("tensor {name:?}, element {bad}")));
        }
        tensors.push(RawTensor { name, dims, data });
    }
    if !r.is_empty() {
        return Err(Error::TrailingData(r.remaining()));
    }
    Ok(tensors)
}

pub fn save_checkpoint<P: AsRef<Path>>(tensors: &[RawTensor], path: P) -> Result<()> {
    fs::write(path, write_checkpoint_bytes(tensors)?)?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Vec<RawTensor>> {
    read_checkpoint_bytes(&fs::read(path)?)
}
