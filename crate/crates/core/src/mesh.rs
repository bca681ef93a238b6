//! Oriented samples for surface reconstruction, coarse-to-fine floater
//! filtering against LiDAR occupancy and the GMM surface, and point-set
//! reconstruction metrics.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::gmm::GmmMap;
use crate::pointcloud::ply::{self, PlyError, ScalarType};
use crate::pointcloud::{CameraModel, PlyEncoding};
use crate::render::render;
use crate::spatial::{surface_cell_size, SpatialHash, VoxelKey};
use crate::supervision::{query, NeighborEntry, SupervisionParams};
use crate::surfel::Surfel;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("refusing to export an empty sample set")]
    Empty,
    #[error("metrics need non-empty result and reference sets")]
    EmptyMetricInput,
    #[error(transparent)]
    Ply(#[from] PlyError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedSample {
    pub p: Vector3<f64>,
    /// Unit normal.
    pub n: Vector3<f64>,
    pub view: usize,
}

/// Silhouette above which a rendered pixel yields a sample.
pub const SAMPLE_SILHOUETTE: f64 = 0.5;

/// Unprojects every confidently rendered pixel of every view.
pub fn sample_oriented_points(surfels: &[Surfel], cameras: &[CameraModel], sh_degree: usize) -> Vec<OrientedSample> {
    let mut out = Vec::new();
    for (view, cam) in cameras.iter().enumerate() {
        let b = render(surfels, cam, sh_degree);
        let rt = cam.rotation_matrix().transpose();
        let w = cam.width();
        for (i, &s) in b.silhouette.data.iter().enumerate() {
            if s <= SAMPLE_SILHOUETTE {
                continue;
            }
            let n = rt * b.normal.data[i];
            let norm = n.norm();
            if norm < 1e-9 {
                continue;
            }
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            out.push(OrientedSample {
                p: cam.unproject(x, y, b.depth.data[i]),
                n: n / norm,
                view,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub occupancy_voxel: f64,
    pub occupancy_min_points: usize,
    /// Samples farther than this from the GMM surface are dropped, meters.
    pub fine_threshold: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            occupancy_voxel: 0.3,
            occupancy_min_points: 3,
            fine_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMap {
    pub voxel_size: f64,
    pub occupied: BTreeSet<VoxelKey>,
}

impl OccupancyMap {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.occupied.contains(&VoxelKey::of(p, self.voxel_size))
    }
}

/// Voxels holding at least `min_points` points, then dilated by one voxel
/// in all 26 directions.
pub fn build_occupancy(points: &[Vector3<f64>], voxel_size: f64, min_points: usize) -> OccupancyMap {
    assert!(voxel_size > 0.0, "occupancy voxel size must be positive");
    let mut counts = std::collections::BTreeMap::<VoxelKey, usize>::new();
    for p in points {
        *counts.entry(VoxelKey::of(p, voxel_size)).or_default() += 1;
    }
    let mut occupied = BTreeSet::new();
    for (k, &c) in &counts {
        if c >= min_points.max(1) {
            occupied.extend(k.neighborhood());
        }
    }
    OccupancyMap { voxel_size, occupied }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub input: usize,
    pub coarse_removed: usize,
    pub fine_removed: usize,
    pub kept: usize,
}

/// Point-to-plane distance to the neighbouring components with the kernel
/// weights normalized to sum to one; infinite with no neighbours.
pub fn surface_distance(entry: &NeighborEntry, p: &Vector3<f64>) -> f64 {
    let total: f64 = entry.anchors.iter().map(|a| a.weight).sum();
    if entry.anchors.is_empty() || total <= 0.0 {
        return f64::INFINITY;
    }
    entry
        .anchors
        .iter()
        .map(|a| a.weight * (p - a.mean).dot(&a.normal).abs())
        .sum::<f64>()
        / total
}

/// Drops samples in unoccupied voxels, then samples too far from the GMM
/// surface. Kept samples stay in input order.
pub fn filter_samples(
    samples: &[OrientedSample],
    occupancy: &OccupancyMap,
    map: &GmmMap,
    supervision: &SupervisionParams,
    fine_threshold: f64,
) -> (Vec<OrientedSample>, FilterReport) {
    #[derive(Clone, Copy, PartialEq)]
    enum Fate {
        Coarse,
        Fine,
        Kept,
    }
    let fates: Vec<Fate> = samples
        .par_iter()
        .map(|s| {
            if !occupancy.contains(&s.p) {
                Fate::Coarse
            } else if surface_distance(&query(map, &s.p, supervision), &s.p) > fine_threshold {
                Fate::Fine
            } else {
                Fate::Kept
            }
        })
        .collect();
    let mut report = FilterReport {
        input: samples.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for (s, f) in samples.iter().zip(fates) {
        match f {
            Fate::Coarse => report.coarse_removed += 1,
            Fate::Fine => report.fine_removed += 1,
            Fate::Kept => {
                report.kept += 1;
                kept.push(*s);
            }
        }
    }
    (kept, report)
}

const ORIENTED_PROPS: [(&str, ScalarType); 6] = [
    ("x", ScalarType::F32),
    ("y", ScalarType::F32),
    ("z", ScalarType::F32),
    ("nx", ScalarType::F32),
    ("ny", ScalarType::F32),
    ("nz", ScalarType::F32),
];

/// Binary little-endian PLY with `x y z nx ny nz` floats.
pub fn export_oriented_ply(samples: &[OrientedSample], path: &Path) -> Result<(), MeshError> {
    if samples.is_empty() {
        return Err(MeshError::Empty);
    }
    ply::write_vertices(
        path,
        PlyEncoding::BinaryLittleEndian,
        &[],
        &ORIENTED_PROPS,
        samples.len(),
        samples.iter().map(|s| vec![s.p.x, s.p.y, s.p.z, s.n.x, s.n.y, s.n.z]),
    )?;
    Ok(())
}

/// Loads `x y z nx ny nz`; the view id is not stored and reads back as 0.
pub fn load_oriented_ply(path: &Path) -> Result<Vec<OrientedSample>, MeshError> {
    let t = ply::read_vertices(path)?;
    let c = t.require(&["x", "y", "z", "nx", "ny", "nz"])?;
    Ok((0..t.len)
        .map(|i| OrientedSample {
            p: Vector3::new(c[0][i], c[1][i], c[2][i]),
            n: Vector3::new(c[3][i], c[4][i], c[5][i]),
            view: 0,
        })
        .collect())
}

/// Distances in meters; precision, recall and F1 as fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub chamfer_l1: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MeshMetrics {
    pub const CSV_HEADER: &'static str = "accuracy_cm,completeness_cm,chamfer_l1_cm,precision_pct,recall_pct,f1_pct";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.accuracy * 100.0,
            self.completeness * 100.0,
            self.chamfer_l1 * 100.0,
            self.precision * 100.0,
            self.recall * 100.0,
            self.f1 * 100.0
        )
    }
}

/// Metrics threshold used by default, meters.
pub const METRIC_THRESHOLD: f64 = 0.20;

fn nearest_distances(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Vec<f64> {
    let hash = SpatialHash::build(to, surface_cell_size(to, 8));
    from.par_iter()
        .map(|q| hash.nearest(to, q).map_or(f64::INFINITY, |n| n.dist2.sqrt()))
        .collect()
}

pub fn eval_mesh_metrics(
    result: &[Vector3<f64>],
    reference: &[Vector3<f64>],
    threshold: f64,
) -> Result<MeshMetrics, MeshError> {
    if result.is_empty() || reference.is_empty() {
        return Err(MeshError::EmptyMetricInput);
    }
    let forward = nearest_distances(result, reference);
    let backward = nearest_distances(reference, result);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let within = |v: &[f64]| v.iter().filter(|&&d| d < threshold).count() as f64 / v.len() as f64;
    let accuracy = mean(&forward);
    let completeness = mean(&backward);
    let precision = within(&forward);
    let recall = within(&backward);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MeshMetrics {
        accuracy,
        completeness,
        chamfer_l1: 0.5 * (accuracy + completeness),
        precision,
        recall,
        f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(step: f64, n: usize, offset: Vector3<f64>) -> Vec<Vector3<f64>> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                v.push(Vector3::new(i as f64 * step, j as f64 * step, 0.0) + offset);
            }
        }
        v
    }

    #[test]
    fn single_point_occupies_its_neighbourhood() {
        let occ = build_occupancy(&[Vector3::new(0.1, 0.1, 0.1)], 0.3, 1);
        assert_eq!(occ.occupied.len(), 27);
        assert!(build_occupancy(&[], 0.3, 1).occupied.is_empty());
        assert!(build_occupancy(&[Vector3::zeros(); 2], 0.3, 3).occupied.is_empty());
    }

    #[test]
    fn plane_occupies_one_layer_before_dilation() {
        let pts = grid(0.05, 40, Vector3::new(-1.0, -1.0, 0.0));
        let occ = build_occupancy(&pts, 0.5, 1);
        // Dilation adds one layer above and below.
        assert!(occ.occupied.iter().all(|k| (-1..=1).contains(&k.iz)));
        assert!(occ.occupied.iter().any(|k| k.iz == 0));
    }

    #[test]
    fn identical_sets_score_perfectly() {
        let a = grid(0.05, 20, Vector3::zeros());
        let m = eval_mesh_metrics(&a, &a, METRIC_THRESHOLD).unwrap();
        assert_eq!(m.chamfer_l1, 0.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn shifted_plane_has_shift_distance() {
        // Shift perpendicular to the plane so every nearest distance is the shift.
        let a = grid(0.02, 50, Vector3::zeros());
        let b = grid(0.02, 50, Vector3::new(0.0, 0.0, 0.1));
        let m = eval_mesh_metrics(&b, &a, METRIC_THRESHOLD).unwrap();
        assert!((m.accuracy - 0.1).abs() < 1e-9 && (m.completeness - 0.1).abs() < 1e-9);
        assert_eq!(m.f1, 1.0);
        assert!(eval_mesh_metrics(&[], &a, 0.2).is_err());
    }

    #[test]
    fn oriented_ply_round_trip() {
        let samples: Vec<OrientedSample> = (0..3)
            .map(|i| OrientedSample {
                p: Vector3::new(i as f64 * 0.5, 1.25, -2.0),
                n: Vector3::new(0.0, 0.0, 1.0),
                view: 0,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ply");
        export_oriented_ply(&samples, &path).unwrap();
        assert_eq!(load_oriented_ply(&path).unwrap(), samples);
        let header = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&header[..200.min(header.len())]);
        assert!(text.contains("element vertex 3") && text.contains("property float nx"));
        assert!(matches!(export_oriented_ply(&[], &path), Err(MeshError::Empty)));
    }
}
