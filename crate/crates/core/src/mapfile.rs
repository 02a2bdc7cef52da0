//! Binary map files.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EVGS"
//! 4       4     version (u32) = 1
//! 8       8     record count (u64)
//! 16      8     next free id (u64)
//! 24      64·n  records: id (u64), then 14 × f32
//!               mean xyz, rot wxyz, log_scale xyz, opacity_logit, color rgb
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Gaussian;
use crate::map::{GaussianId, GaussianMap};
use crate::optim::{params_of, set_params, PARAMS_PER_GAUSSIAN};

pub const MAGIC: &[u8; 4] = b"EVGS";
pub const VERSION: u32 = 1;
const HEADER: usize = 24;
const RECORD: usize = 8 + 4 * PARAMS_PER_GAUSSIAN;

/// Serializes the live Gaussians. Parameters are stored in single precision.
pub fn encode_map(map: &GaussianMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + RECORD * map.live_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(map.live_count() as u64).to_le_bytes());
    out.extend_from_slice(&map.next_id().to_le_bytes());
    for (id, g) in map.iter() {
        out.extend_from_slice(&id.0.to_le_bytes());
        for p in params_of(g) {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    out
}

/// Parses a map file body; `path` only labels errors.
pub fn decode_map(bytes: &[u8], path: &Path) -> Result<GaussianMap> {
    let err = |m: String| Error::format(path, m);
    if bytes.len() < HEADER {
        return Err(err(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(err("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let count = u64_at(8) as usize;
    let next_id = u64_at(16);
    let expected = count
        .checked_mul(RECORD)
        .and_then(|n| n.checked_add(HEADER))
        .ok_or_else(|| err("record count overflows".into()))?;
    if bytes.len() != expected {
        return Err(err(format!("expected {expected} bytes for {count} records, found {}", bytes.len())));
    }
    let mut map = GaussianMap::new();
    for r in 0..count {
        let o = HEADER + r * RECORD;
        let id = GaussianId(u64_at(o));
        let mut p = [0.0f64; PARAMS_PER_GAUSSIAN];
        for (k, v) in p.iter_mut().enumerate() {
            let at = o + 8 + 4 * k;
            *v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as f64;
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(err(format!("record {r} has non-finite parameters")));
        }
        let mut g = Gaussian::isotropic(nalgebra::Vector3::zeros(), 1.0, 0.5, nalgebra::Vector3::zeros());
        set_params(&mut g, &p);
        map.insert_raw(id, g).map_err(|e| err(e.to_string()))?;
    }
    if next_id < map.next_id() {
        return Err(err("next id precedes a stored id".into()));
    }
    map.set_next_id(next_id);
    Ok(map)
}

pub fn save_map(path: &Path, map: &GaussianMap) -> Result<()> {
    std::fs::write(path, encode_map(map)).map_err(|e| Error::io(path, e))
}

pub fn load_map(path: &Path) -> Result<GaussianMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_map(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use crate::optim::RenderSettings;
    use crate::raster::render;
    use nalgebra::{Isometry3, Vector3, Vector4};

    fn sample_map() -> GaussianMap {
        let mut map = GaussianMap::new();
        for i in 0..20 {
            let mut g = Gaussian::isotropic(
                Vector3::new(0.05 * i as f64 - 0.5, 0.03 * i as f64 - 0.3, 1.5 + 0.01 * i as f64),
                0.05 + 0.002 * i as f64,
                0.3 + 0.03 * i as f64,
                Vector3::new(0.1 * (i % 7) as f64, 0.5, 0.9 - 0.04 * i as f64),
            );
            g.rot = Vector4::new(1.0, 0.1 * i as f64, -0.05, 0.2).normalize();
            g.log_scale.x += 0.3;
            map.insert(g);
        }
        let ids: Vec<_> = map.live_ids().into_iter().collect();
        map.tombstone(ids[3]).unwrap();
        map
    }

    #[test]
    fn save_load_render_is_bit_identical() {
        let mut map = sample_map();
        map.round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.evgs");
        save_map(&path, &map).unwrap();
        let back = load_map(&path).unwrap();
        assert!(back.same_content(&map));
        assert_eq!(back.next_id(), map.next_id());
        let intr = Intrinsics {
            fx: 40.0,
            fy: 40.0,
            cx: 19.5,
            cy: 14.5,
            width: 40,
            height: 30,
            near: 0.05,
            far: 10.0,
        };
        let cam = crate::geometry::Camera::from_pose(intr, &Isometry3::identity()).unwrap();
        let opts = RenderSettings::default().options();
        assert_eq!(render(&map, &cam, &opts), render(&back, &cam, &opts));
    }

    #[test]
    fn header_layout() {
        let map = sample_map();
        let bytes = encode_map(&map);
        assert_eq!(&bytes[0..4], b"EVGS");
        assert_eq!(bytes.len(), 24 + 64 * map.live_count());
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 19);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let p = Path::new("x");
        let good = encode_map(&sample_map());
        assert!(matches!(decode_map(&good[..10], p), Err(Error::Format { .. })));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_map(&bad, p).is_err());
        let mut bad = good.clone();
        bad.pop();
        assert!(decode_map(&bad, p).is_err());
        let mut bad = good;
        bad[4] = 9;
        assert!(decode_map(&bad, p).is_err());
    }

    #[test]
    fn empty_map_round_trips() {
        let map = GaussianMap::new();
        let back = decode_map(&encode_map(&map), Path::new("e")).unwrap();
        assert!(back.is_empty());
    }
}
