//! Surfel map storage, the `SRFL` file format and index-map rendering.

mod render;

pub use render::{associate_keypoints, render_index_map, Association, AssociationReport, SurfelIndexMap, Z_NEAR};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::binio::{self, FormatError};
use crate::geometry::Vec3;

const MAGIC: &[u8; 4] = b"SRFL";
const VERSION: u32 = 1;

/// Dense global surfel index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SurfelId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surfel {
    pub id: SurfelId,
    pub center: Vec3,
    pub normal: Vec3,
    pub radius: f64,
}

/// Plane `n . x + d = 0` supporting a surfel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneCoeff {
    pub n: Vec3,
    pub d: f64,
}

impl PlaneCoeff {
    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        self.n.dot(x) + self.d
    }
}

impl Surfel {
    pub fn plane(&self) -> PlaneCoeff {
        PlaneCoeff {
            n: self.normal,
            d: -self.normal.dot(&self.center),
        }
    }
}

#[derive(Debug, Error)]
pub enum SurfelMapError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("record {record}: {message}")]
    Record { record: usize, message: String },
    #[error("surfel map is empty")]
    Empty,
}

fn record_err(record: usize, message: impl Into<String>) -> SurfelMapError {
    SurfelMapError::Record { record, message: message.into() }
}

/// Immutable set of surfels with contiguous ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfelMap {
    surfels: Vec<Surfel>,
}

impl SurfelMap {
    /// Validates and normalizes `(center, normal, radius)` records; ids follow order.
    pub fn from_records(records: impl IntoIterator<Item = (Vec3, Vec3, f64)>) -> Result<Self, SurfelMapError> {
        let mut surfels = Vec::new();
        for (idx, (center, normal, radius)) in records.into_iter().enumerate() {
            surfels.push(validate(idx, center, normal, radius)?);
        }
        if surfels.is_empty() {
            return Err(SurfelMapError::Empty);
        }
        Ok(Self { surfels })
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn get(&self, id: SurfelId) -> Option<&Surfel> {
        self.surfels.get(id.0 as usize)
    }

    pub fn surfels(&self) -> &[Surfel] {
        &self.surfels
    }

    pub fn plane_coeff(&self, id: SurfelId) -> Option<PlaneCoeff> {
        self.get(id).map(Surfel::plane)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        binio::write_header(w, MAGIC, VERSION)?;
        w.write_u64::<LittleEndian>(self.surfels.len() as u64)?;
        for s in &self.surfels {
            binio::write_vec3(w, &s.center)?;
            binio::write_vec3(w, &s.normal)?;
            w.write_f64::<LittleEndian>(s.radius)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, SurfelMapError> {
        binio::read_header(r, MAGIC, "SRFL", VERSION)?;
        let count = r.read_u64::<LittleEndian>().map_err(FormatError::from)?;
        if count == 0 {
            return Err(SurfelMapError::Empty);
        }
        if count > u32::MAX as u64 {
            return Err(FormatError::corrupt(format!("surfel count {count} too large")).into());
        }
        let mut surfels = Vec::with_capacity((count as usize).min(1 << 20));
        for idx in 0..count as usize {
            let center = binio::read_vec3(r).map_err(|e| record_err(idx, format!("truncated: {e}")))?;
            let normal = binio::read_vec3(r).map_err(|e| record_err(idx, format!("truncated: {e}")))?;
            let radius = r
                .read_f64::<LittleEndian>()
                .map_err(|e| record_err(idx, format!("truncated: {e}")))?;
            surfels.push(validate(idx, center, normal, radius)?);
        }
        binio::expect_eof(r)?;
        Ok(Self { surfels })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SurfelMapError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Parses the plain-text form: `x y z nx ny nz r` per line, or
    /// `id x y z nx ny nz r` with explicit ids (unique, contiguous from 0).
    pub fn parse_text<R: BufRead>(reader: R) -> Result<Self, SurfelMapError> {
        let mut rows: Vec<(Option<u64>, usize, [f64; 7])> = Vec::new();
        let mut explicit: Option<bool> = None;
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let has_id = match fields.len() {
                7 => false,
                8 => true,
                n => return Err(record_err(line_no + 1, format!("expected 7 or 8 fields, found {n}"))),
            };
            if *explicit.get_or_insert(has_id) != has_id {
                return Err(record_err(line_no + 1, "mixed records with and without ids"));
            }
            let (id, rest) = if has_id {
                let id = fields[0]
                    .parse::<u64>()
                    .map_err(|e| record_err(line_no + 1, format!("bad id {:?}: {e}", fields[0])))?;
                (Some(id), &fields[1..])
            } else {
                (None, &fields[..])
            };
            let mut vals = [0.0; 7];
            for (slot, f) in vals.iter_mut().zip(rest) {
                *slot = f
                    .parse::<f64>()
                    .map_err(|e| record_err(line_no + 1, format!("bad number {f:?}: {e}")))?;
            }
            rows.push((id, line_no + 1, vals));
        }
        if rows.is_empty() {
            return Err(SurfelMapError::Empty);
        }
        if explicit == Some(true) {
            rows.sort_by_key(|(id, line, _)| (id.unwrap_or(0), *line));
            for (expected, (id, line, _)) in rows.iter().enumerate() {
                let id = id.unwrap_or(0);
                if id < expected as u64 {
                    return Err(record_err(*line, format!("duplicate surfel id {id}")));
                }
                if id != expected as u64 {
                    return Err(record_err(*line, format!("surfel ids not contiguous: missing {expected}")));
                }
            }
        }
        let mut surfels = Vec::with_capacity(rows.len());
        for (idx, (_, line, v)) in rows.into_iter().enumerate() {
            let mut s = validate(idx, Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]), v[6])
                .map_err(|e| match e {
                    SurfelMapError::Record { message, .. } => record_err(line, message),
                    other => other,
                })?;
            s.id = SurfelId(idx as u32);
            surfels.push(s);
        }
        Ok(Self { surfels })
    }

    /// Loads a surfel map, detecting the binary `SRFL` format by its magic and
    /// falling back to the text format otherwise.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SurfelMapError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.starts_with(MAGIC) {
            Self::read_from(&mut bytes.as_slice())
        } else {
            Self::parse_text(bytes.as_slice())
        }
    }
}

fn validate(idx: usize, center: Vec3, normal: Vec3, radius: f64) -> Result<Surfel, SurfelMapError> {
    if center.iter().any(|c| !c.is_finite()) {
        return Err(record_err(idx, "non-finite center"));
    }
    let norm = normal.norm();
    if !norm.is_finite() || norm < 1e-9 {
        return Err(record_err(idx, "zero or non-finite normal"));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(record_err(idx, format!("radius must be positive, got {radius}")));
    }
    // Renormalize only when off by more than rounding so that saved maps
    // reload bit-exactly.
    let normal = if (norm - 1.0).abs() > 1e-12 { normal / norm } else { normal };
    Ok(Surfel {
        id: SurfelId(idx as u32),
        center,
        normal,
        radius,
    })
}

/// Loads a surfel map from disk (binary or text).
pub fn load_surfel_map(path: impl AsRef<Path>) -> Result<SurfelMap, SurfelMapError> {
    SurfelMap::load(path)
}

pub fn plane_coeff(s: &Surfel) -> PlaneCoeff {
    s.plane()
}

/// Opens a text or binary surfel map through a buffered reader; used by tests
/// and the CLI to read from arbitrary sources.
pub fn read_surfel_map<R: Read>(mut r: R) -> Result<SurfelMap, SurfelMapError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.starts_with(MAGIC) {
        SurfelMap::read_from(&mut bytes.as_slice())
    } else {
        SurfelMap::parse_text(BufReader::new(bytes.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_single_surfel() {
        let map = SurfelMap::parse_text("0 0 0 5 0 0 -1 0.1\n".as_bytes()).unwrap();
        assert_eq!(map.len(), 1);
        let s = map.get(SurfelId(0)).unwrap();
        assert_eq!(s.center, Vec3::new(0.0, 0.0, 5.0));
        assert_eq!(s.normal, Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(s.radius, 0.1);
    }

    #[test]
    fn text_rejects_duplicate_and_gaps() {
        let dup = "0 0 0 5 0 0 -1 0.1\n0 1 0 5 0 0 -1 0.1\n";
        assert!(matches!(SurfelMap::parse_text(dup.as_bytes()), Err(SurfelMapError::Record { .. })));
        let gap = "0 0 0 5 0 0 -1 0.1\n2 1 0 5 0 0 -1 0.1\n";
        assert!(SurfelMap::parse_text(gap.as_bytes()).is_err());
        let unordered = "1 1 0 5 0 0 -1 0.1\n0 0 0 5 0 0 -1 0.1\n";
        let map = SurfelMap::parse_text(unordered.as_bytes()).unwrap();
        assert_eq!(map.get(SurfelId(1)).unwrap().center.x, 1.0);
    }

    #[test]
    fn text_errors_name_the_line() {
        let bad = "0 0 5 0 0 -1 0.1\n0 0 5 0 0 -1 zero\n";
        match SurfelMap::parse_text(bad.as_bytes()) {
            Err(SurfelMapError::Record { record, .. }) => assert_eq!(record, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(SurfelMap::parse_text("# nothing\n".as_bytes()), Err(SurfelMapError::Empty)));
        assert!(SurfelMap::parse_text("0 0 5 0 0 0 0.1\n".as_bytes()).is_err());
        assert!(SurfelMap::parse_text("0 0 5 0 0 1 -0.1\n".as_bytes()).is_err());
    }

    #[test]
    fn normals_renormalized() {
        let map = SurfelMap::parse_text("0 0 5 0 0 -2 0.1\n".as_bytes()).unwrap();
        assert_eq!(map.surfels()[0].normal, Vec3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn binary_rejects_truncation_and_empty() {
        let map = SurfelMap::from_records([(Vec3::new(0.0, 0.0, 5.0), Vec3::z(), 0.1)]).unwrap();
        let mut bytes = Vec::new();
        map.write_to(&mut bytes).unwrap();
        assert!(SurfelMap::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
        let mut empty = Vec::new();
        binio::write_header(&mut empty, MAGIC, VERSION).unwrap();
        empty.write_u64::<LittleEndian>(0).unwrap();
        assert!(matches!(SurfelMap::read_from(&mut empty.as_slice()), Err(SurfelMapError::Empty)));
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(SurfelMap::read_from(&mut wrong.as_slice()).is_err());
    }

    #[test]
    fn plane_coeff_examples() {
        let s = Surfel { id: SurfelId(0), center: Vec3::new(0.0, 0.0, 5.0), normal: Vec3::z(), radius: 0.1 };
        let p = plane_coeff(&s);
        assert_eq!(p.n, Vec3::z());
        assert_eq!(p.d, -5.0);
        let s = Surfel { center: Vec3::zeros(), normal: Vec3::new(0.6, 0.8, 0.0), ..s };
        assert_eq!(plane_coeff(&s).d, 0.0);
    }

    proptest! {
        #[test]
        fn plane_contains_center(c in prop::array::uniform3(-100.0f64..100.0), n in prop::array::uniform3(-1.0f64..1.0)) {
            let n = Vec3::from(n);
            prop_assume!(n.norm() > 1e-3);
            let s = Surfel { id: SurfelId(0), center: Vec3::from(c), normal: n.normalize(), radius: 1.0 };
            let p = s.plane();
            prop_assert!((p.n.dot(&s.center) + p.d).abs() < 1e-12);
        }

        #[test]
        fn binary_round_trip_is_bit_exact(records in prop::collection::vec(
            (prop::array::uniform3(-50.0f64..50.0), prop::array::uniform3(-1.0f64..1.0), 0.001f64..1.0), 1..40)) {
            prop_assume!(records.iter().all(|(_, n, _)| Vec3::from(*n).norm() > 1e-3));
            let map = SurfelMap::from_records(records.iter().map(|(c, n, r)| (Vec3::from(*c), Vec3::from(*n), *r))).unwrap();
            let mut a = Vec::new();
            map.write_to(&mut a).unwrap();
            let back = SurfelMap::read_from(&mut a.as_slice()).unwrap();
            prop_assert_eq!(&back, &map);
            let mut b = Vec::new();
            back.write_to(&mut b).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
