//! Feature archive ("M3FA") serialization.
//!
//! A flat little-endian container for pre-extracted clip features:
//!
//! ```text
//! magic "M3FA" | version u32 | clip count u32
//! per clip: class_id u32 | clip_id u32 | t,h,w,c u16 | t*h*w*c f32 (t,h,w,c row-major)
//! ```
//!
//! Readers are strict: wrong magic, unknown version, short records, bytes
//! after the last clip, non-finite values, zero dimensions, and shape drift
//! between clips are all rejected with a specific error. Values round-trip
//! bit-exactly (the finite check admits negative zero and denormals).

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::episode::{Dataset, Split, VideoClip};
use crate::error::{Error, Result};
use crate::wire::ByteReader;

pub const ARCHIVE_MAGIC: [u8; 4] = *b"M3FA";
pub const ARCHIVE_VERSION: u32 = 1;

/// Serializes clips in the order given. Fails if a dimension exceeds the
/// u16 header field, the clip count exceeds u32, or a clip is malformed.
pub fn write_archive_bytes(clips: &[VideoClip]) -> Result<Vec<u8>> {
    let count = u32::try_from(clips.len())
        .map_err(|_| Error::ShapeMismatch("too many clips for archive header".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&ARCHIVE_MAGIC);
    out.write_u32::<LittleEndian>(ARCHIVE_VERSION)?;
    out.write_u32::<LittleEndian>(count)?;
    for clip in clips {
        clip.validate()?;
        let dim = |v: usize, name: &str| -> Result<u16> {
            u16::try_from(v).map_err(|_| {
                Error::ShapeMismatch(format!("clip {}: {} = {} exceeds u16", clip.clip_id, name, v))
            })
        };
        out.write_u32::<LittleEndian>(clip.class_id)?;
        out.write_u32::<LittleEndian>(clip.clip_id)?;
        out.write_u16::<LittleEndian>(dim(clip.t, "t")?)?;
        out.write_u16::<LittleEndian>(dim(clip.h, "h")?)?;
        out.write_u16::<LittleEndian>(dim(clip.w, "w")?)?;
        out.write_u16::<LittleEndian>(dim(clip.c, "c")?)?;
        for &v in &clip.data {
            out.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(out)
}

/// Parses an archive from raw bytes, enforcing the format checks above.
pub fn read_archive_bytes(bytes: &[u8]) -> Result<Vec<VideoClip>> {
    let mut r = ByteReader::new(bytes);
    let magic = r.bytes(4, "magic")?;
    if magic != ARCHIVE_MAGIC {
        return Err(Error::BadMagic {
            expected: ARCHIVE_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32_le("version")?;
    if version != ARCHIVE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32_le("clip count")? as usize;

    let mut clips = Vec::with_capacity(count.min(1024));
    let mut shape: Option<(usize, usize, usize, usize)> = None;
    for i in 0..count {
        let what = format!("clip {i}");
        let class_id = r.u32_le(&what)?;
        let clip_id = r.u32_le(&what)?;
        let t = r.u16_le(&what)? as usize;
        let h = r.u16_le(&what)? as usize;
        let w = r.u16_le(&what)? as usize;
        let c = r.u16_le(&what)? as usize;
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::ShapeMismatch(format!(
                "clip {i}: zero dimension in {t}x{h}x{w}x{c}"
            )));
        }
        match shape {
            None => shape = Some((t, h, w, c)),
            Some(s) if s != (t, h, w, c) => {
                return Err(Error::ShapeMismatch(format!(
                    "clip {i}: shape {t}x{h}x{w}x{c} differs from first clip {}x{}x{}x{}",
                    s.0, s.1, s.2, s.3
                )))
            }
            Some(_) => {}
        }
        let data = r.f32_vec(t * h * w * c, &what)?;
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!(
                "clip {i} (clip_id {clip_id}), element {bad}"
            )));
        }
        clips.push(VideoClip { class_id, clip_id, t, h, w, c, data });
    }
    if !r.is_empty() {
        return Err(Error::TrailingData(r.remaining()));
    }
    Ok(clips)
}

/// Writes a dataset's clips to disk as an archive.
pub fn save_feature_archive<P: AsRef<Path>>(dataset: &Dataset, path: P) -> Result<()> {
    let bytes = write_archive_bytes(dataset.clips())?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads an archive from disk into a dataset (base split; the training
/// configuration decides how classes are partitioned).
pub fn load_feature_archive<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    Dataset::new(read_archive_bytes(&bytes)?, Split::Base)
}
