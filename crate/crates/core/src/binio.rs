//! Little-endian helpers shared by the binary file formats.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::descriptor::Descriptor;
use crate::geometry::{Pixel, Pose, Vec3};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {format} version {found} (expected {expected})")]
    Version { format: &'static str, found: u32, expected: u32 },
    #[error("corrupt payload: {0}")]
    Corrupt(String),
}

impl FormatError {
    pub fn corrupt(msg: impl Into<String>) -> Self {
        FormatError::Corrupt(msg.into())
    }
}

pub fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> io::Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(version)
}

pub fn read_header<R: Read>(r: &mut R, magic: &[u8; 4], format: &'static str, version: u32) -> Result<(), FormatError> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if &found != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    let found = r.read_u32::<LittleEndian>()?;
    if found != version {
        return Err(FormatError::Version { format, found, expected: version });
    }
    Ok(())
}

/// Fails unless the reader is exhausted.
pub fn expect_eof<R: Read>(r: &mut R) -> Result<(), FormatError> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(FormatError::corrupt("trailing bytes after payload")),
    }
}

pub fn write_vec3<W: Write>(w: &mut W, v: &Vec3) -> io::Result<()> {
    for c in v.iter() {
        w.write_f64::<LittleEndian>(*c)?;
    }
    Ok(())
}

pub fn read_vec3<R: Read>(r: &mut R) -> io::Result<Vec3> {
    Ok(Vec3::new(
        r.read_f64::<LittleEndian>()?,
        r.read_f64::<LittleEndian>()?,
        r.read_f64::<LittleEndian>()?,
    ))
}

pub fn write_pose<W: Write>(w: &mut W, pose: &Pose) -> io::Result<()> {
    write_vec3(w, pose.translation())?;
    let q = pose.rotation().quaternion();
    for c in [q.i, q.j, q.k, q.w] {
        w.write_f64::<LittleEndian>(c)?;
    }
    Ok(())
}

pub fn read_pose<R: Read>(r: &mut R) -> Result<Pose, FormatError> {
    let t = read_vec3(r)?;
    let mut q = [0.0; 4];
    for c in q.iter_mut() {
        *c = r.read_f64::<LittleEndian>()?;
    }
    Pose::from_components([t.x, t.y, t.z], q).ok_or_else(|| FormatError::corrupt("invalid pose"))
}

pub fn write_pixel<W: Write>(w: &mut W, p: &Pixel) -> io::Result<()> {
    w.write_f64::<LittleEndian>(p.u)?;
    w.write_f64::<LittleEndian>(p.v)
}

pub fn read_pixel<R: Read>(r: &mut R) -> io::Result<Pixel> {
    Ok(Pixel::new(r.read_f64::<LittleEndian>()?, r.read_f64::<LittleEndian>()?))
}

pub fn write_descriptor<W: Write>(w: &mut W, d: &Descriptor) -> io::Result<()> {
    for word in d.words() {
        w.write_u64::<LittleEndian>(*word)?;
    }
    Ok(())
}

pub fn read_descriptor<R: Read>(r: &mut R) -> io::Result<Descriptor> {
    let mut words = [0u64; 4];
    for word in words.iter_mut() {
        *word = r.read_u64::<LittleEndian>()?;
    }
    Ok(Descriptor::from_words(words))
}

/// Reads a collection length and rejects values that cannot fit in the
/// remaining payload (`min_item_bytes` per element).
pub fn read_len<R: Read>(r: &mut R, remaining_hint: Option<u64>, min_item_bytes: u64) -> Result<usize, FormatError> {
    let n = r.read_u64::<LittleEndian>()?;
    if let Some(rem) = remaining_hint {
        if n.saturating_mul(min_item_bytes) > rem {
            return Err(FormatError::corrupt(format!("length {n} exceeds payload")));
        }
    } else if n > (1 << 32) {
        return Err(FormatError::corrupt(format!("implausible length {n}")));
    }
    Ok(n as usize)
}
