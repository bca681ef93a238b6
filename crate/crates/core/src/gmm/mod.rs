//! Plane-constrained 4D (position + gray) Gaussian mixture map, built
//! incrementally from colorized frames over a voxel hash.

mod component;
pub mod em;
mod format;
mod map;
pub mod meanshift;
mod plane;
mod ransac;

use std::collections::BTreeMap;

use nalgebra::{Matrix4, SVector, Vector3, Vector4};
use thiserror::Error;

use crate::pointcloud::ColorizedPoint;
use crate::spatial::VoxelKey;

pub use component::GmmComponent;
pub use em::{EmParams, Gaussian};
pub use format::{deserialize, load, save, serialize, GMM_MAGIC};
pub use map::{GmmMap, IntegrationReport};
pub use plane::PlaneFrame;
pub use ransac::{extract_planes, PlaneFit, RansacParams};

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("the map is frozen")]
    Frozen,
    #[error("GMM format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmParams {
    pub voxel_size: f64,
    pub ransac: RansacParams,
    /// Mean-shift spatial bandwidth as a fraction of the voxel size.
    pub bandwidth_spatial_frac: f64,
    pub bandwidth_gray: f64,
    /// Modes explaining fewer points than this are dropped.
    pub min_mode_support: usize,
    pub em_tol: f64,
    pub max_em_iters: usize,
    /// Covariance eigenvalue floor (m^2 for spatial axes).
    pub eps_cov: f64,
    /// Log-likelihood below which a point counts as poorly explained.
    pub rho: f64,
    pub seed: u64,
}

impl Default for GmmParams {
    fn default() -> Self {
        Self {
            voxel_size: 1.0,
            ransac: RansacParams::default(),
            bandwidth_spatial_frac: 0.15,
            bandwidth_gray: 0.15,
            min_mode_support: 8,
            em_tol: 1e-6,
            max_em_iters: 100,
            eps_cov: 1e-8,
            rho: -6.0,
            seed: 0,
        }
    }
}

impl GmmParams {
    pub fn fit_params(&self) -> FitParams {
        let h = self.bandwidth_spatial_frac * self.voxel_size;
        FitParams {
            bandwidth_spatial: h,
            bandwidth_gray: self.bandwidth_gray,
            min_mode_support: self.min_mode_support,
            em: EmParams {
                tol: self.em_tol,
                max_iters: self.max_em_iters,
                floor: self.eps_cov,
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitParams {
    pub bandwidth_spatial: f64,
    pub bandwidth_gray: f64,
    pub min_mode_support: usize,
    pub em: EmParams,
}

impl Default for FitParams {
    fn default() -> Self {
        GmmParams::default().fit_params()
    }
}

/// Groups point indices by voxel, in ascending key order.
pub fn voxelize(points: &[ColorizedPoint], voxel_size: f64) -> BTreeMap<VoxelKey, Vec<usize>> {
    assert!(voxel_size > 0.0, "voxel size must be positive");
    let mut out: BTreeMap<VoxelKey, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        out.entry(VoxelKey::of(&p.p, voxel_size)).or_default().push(i);
    }
    out
}

/// Plane-frame mixture: every component lives in `(u, v, w, g)` with the
/// `w` row and column of its covariance identically zero.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub components: Vec<Gaussian<4>>,
    /// EM log-likelihood per iteration, non-decreasing.
    pub ll_trace: Vec<f64>,
    pub(crate) reduced: Vec<Gaussian<3>>,
}

fn embed(g: &Gaussian<3>) -> Gaussian<4> {
    const MAP: [usize; 3] = [0, 1, 3];
    let mut mean = Vector4::zeros();
    let mut cov = Matrix4::zeros();
    for a in 0..3 {
        mean[MAP[a]] = g.mean[a];
        for b in 0..3 {
            cov[(MAP[a], MAP[b])] = g.cov[(a, b)];
        }
    }
    Gaussian {
        weight: g.weight,
        mean,
        cov,
    }
}

/// Fits a mixture to plane-frame points `(u, v, 0, g)`; the third
/// coordinate is ignored. The component count comes from mean shift over
/// `(u, v, g)`, then EM refines. Empty input gives an empty fit.
pub fn fit_local_gmm(points: &[Vector4<f64>], params: &FitParams) -> LocalFit {
    let data: Vec<Vector3<f64>> = points.iter().map(|z| Vector3::new(z[0], z[1], z[3])).collect();
    let bw = Vector3::new(params.bandwidth_spatial, params.bandwidth_spatial, params.bandwidth_gray);
    let fit = fit_mixture(&data, &bw, params);
    LocalFit {
        components: fit.components.iter().map(embed).collect(),
        ll_trace: fit.ll_trace,
        reduced: fit.components,
    }
}

/// Unconstrained 4D fit over `(x, y, z, g)` for points on no plane.
pub fn fit_free_gmm(points: &[Vector4<f64>], params: &FitParams) -> em::EmFit<4> {
    let h = params.bandwidth_spatial;
    let bw = Vector4::new(h, h, h, params.bandwidth_gray);
    fit_mixture(points, &bw, params)
}

fn fit_mixture<const D: usize>(data: &[SVector<f64, D>], bw: &SVector<f64, D>, params: &FitParams) -> em::EmFit<D> {
    let modes = meanshift::mean_shift(data, bw, params.min_mode_support);
    let init = em::init_from_labels(data, &modes.labels, modes.centers.len(), params.em.floor);
    em::fit(data, init, &params.em)
}

/// Plane-frame component to world frame: `mu = [mean, 0] + H mu'` and
/// `Sigma = H Sigma' H^T` with `H = blockdiag(R, 1)`.
pub fn to_world(local: &Gaussian<4>, frame: &PlaneFrame) -> Gaussian<4> {
    let mut h = Matrix4::identity();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(&frame.rotation);
    let offset = Vector4::new(frame.mean.x, frame.mean.y, frame.mean.z, 0.0);
    Gaussian {
        weight: local.weight,
        mean: offset + h * local.mean,
        cov: h * local.cov * h.transpose(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    #[test]
    fn voxel_keys_follow_floor() {
        let pts = [
            ColorizedPoint::new(Vector3::new(0.1, 0.1, 0.1), Vector3::zeros()),
            ColorizedPoint::new(Vector3::new(-0.1, 0.0, 0.0), Vector3::zeros()),
        ];
        let v = voxelize(&pts, 1.0);
        assert_eq!(v[&VoxelKey::new(0, 0, 0)], vec![0]);
        assert_eq!(v[&VoxelKey::new(-1, 0, 0)], vec![1]);
    }

    #[test]
    fn to_world_translation_only() {
        let frame = PlaneFrame {
            mean: Vector3::new(1.0, 0.0, 0.0),
            rotation: Matrix3::identity(),
            eigenvalues: [0.0, 1.0, 1.0],
        };
        let g = Gaussian {
            weight: 0.3,
            mean: Vector4::new(0.2, 0.0, 0.0, 0.5),
            cov: Matrix4::from_diagonal(&Vector4::new(0.01, 0.02, 0.0, 0.03)),
        };
        let w = to_world(&g, &frame);
        assert_eq!(w.mean, Vector4::new(1.2, 0.0, 0.0, 0.5));
        assert_eq!(w.cov, g.cov);
        assert_eq!(w.weight, 0.3);
        assert_eq!(to_world(&g, &PlaneFrame::identity()), g);
    }
}
