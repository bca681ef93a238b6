//! Binary map format: `LIGSGMM1`, voxel size f64, count u64, then per
//! component weight f64, mean 4 x f64, upper-triangular covariance
//! 10 x f64, mean RGB 3 x f32, voxel key 3 x i32. Little-endian.
//!
//! Normals are recomputed on load with a canonical sign; the planar flag is
//! inferred from the spatial spectrum.

use std::path::Path;

use nalgebra::{Matrix4, Vector3, Vector4};

use super::{GmmComponent, GmmError, GmmMap};
use crate::spatial::VoxelKey;

pub const GMM_MAGIC: &[u8; 8] = b"LIGSGMM1";
const HEADER_LEN: usize = 8 + 8 + 8;
const RECORD_LEN: usize = 8 + 4 * 8 + 10 * 8 + 3 * 4 + 3 * 4;

fn upper(i: usize) -> (usize, usize) {
    const PAIRS: [(usize, usize); 10] = [
        (0, 0),
        (0, 1),
        (0, 2),
        (0, 3),
        (1, 1),
        (1, 2),
        (1, 3),
        (2, 2),
        (2, 3),
        (3, 3),
    ];
    PAIRS[i]
}

pub fn serialize(map: &GmmMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + map.len() * RECORD_LEN);
    out.extend_from_slice(GMM_MAGIC);
    out.extend_from_slice(&map.voxel_size().to_le_bytes());
    out.extend_from_slice(&(map.len() as u64).to_le_bytes());
    for c in map.components() {
        out.extend_from_slice(&c.weight.to_le_bytes());
        for v in c.mean.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..10 {
            out.extend_from_slice(&c.cov[upper(i)].to_le_bytes());
        }
        for v in c.mean_rgb.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [c.key.ix, c.key.iy, c.key.iz] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
    fn i32(&mut self) -> i32 {
        i32::from_le_bytes(self.take())
    }
}

/// Parses a whole blob; fails without a partial map on any inconsistency.
pub fn deserialize(bytes: &[u8]) -> Result<GmmMap, GmmError> {
    let err = |m: String| GmmError::Format(m);
    if bytes.len() < HEADER_LEN || &bytes[..8] != GMM_MAGIC {
        return Err(err("bad magic or version".into()));
    }
    let mut r = Reader { bytes, pos: 8 };
    let voxel_size = r.f64();
    let count = u64::from_le_bytes(r.take());
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(err(format!("invalid voxel size {voxel_size}")));
    }
    let expected = (count as usize)
        .checked_mul(RECORD_LEN)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| err("component count overflows".into()))?;
    if bytes.len() != expected {
        return Err(err(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut comps = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let weight = r.f64();
        let mean = Vector4::new(r.f64(), r.f64(), r.f64(), r.f64());
        let mut cov = Matrix4::zeros();
        for j in 0..10 {
            let (a, b) = upper(j);
            let v = r.f64();
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
        let rgb = Vector3::new(r.f32(), r.f32(), r.f32());
        let key = VoxelKey::new(r.i32(), r.i32(), r.i32());
        if !(weight > 0.0) {
            return Err(err(format!("component {i} has non-positive weight")));
        }
        let mut c = GmmComponent::new(weight, mean, cov, rgb, voxel_size, false)
            .ok_or_else(|| err(format!("component {i} has a singular spatial covariance")))?;
        c.key = key;
        c.planar = c.spatial.values[0] <= 1e-6 * c.spatial.values[1];
        comps.push(c);
    }
    Ok(GmmMap::from_components(voxel_size, comps))
}

pub fn save(map: &GmmMap, path: &Path) -> Result<(), GmmError> {
    std::fs::write(path, serialize(map)).map_err(|source| GmmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<GmmMap, GmmError> {
    let bytes = std::fs::read(path).map_err(|source| GmmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    deserialize(&bytes)
}
