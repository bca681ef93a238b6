use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::geometry::SortedEigen3;
use crate::spatial::VoxelKey;

/// A world-frame mixture component with its cached spatial geometry.
#[derive(Debug, Clone)]
pub struct GmmComponent {
    pub weight: f64,
    /// `(x, y, z, g)`.
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
    pub mean_rgb: Vector3<f32>,
    /// Voxel of the spatial mean.
    pub key: VoxelKey,
    /// Born from a plane fit (as opposed to the free 4D fallback).
    pub planar: bool,
    /// Eigen-decomposition of the spatial block, ascending.
    pub spatial: SortedEigen3,
    /// Unit normal: the smallest-spread spatial axis.
    pub normal: Vector3<f64>,
    pp_inv: Matrix3<f64>,
    log_norm: f64,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl GmmComponent {
    /// `None` if the spatial covariance is not positive definite.
    pub fn new(
        weight: f64,
        mean: Vector4<f64>,
        cov: Matrix4<f64>,
        mean_rgb: Vector3<f32>,
        voxel_size: f64,
        planar: bool,
    ) -> Option<Self> {
        let pp: Matrix3<f64> = cov.fixed_view::<3, 3>(0, 0).into();
        let chol = pp.cholesky()?;
        let l = chol.l();
        let log_det = 2.0 * (0..3).map(|i| l[(i, i)].ln()).sum::<f64>();
        let spatial = SortedEigen3::new(&pp);
        let position = Vector3::new(mean.x, mean.y, mean.z);
        Some(Self {
            weight,
            mean,
            cov,
            mean_rgb,
            key: VoxelKey::of(&position, voxel_size),
            planar,
            spatial,
            normal: canonical_sign(spatial.vector(0)),
            pp_inv: chol.inverse(),
            log_norm: -0.5 * (3.0 * LN_2PI + log_det),
        })
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.mean.x, self.mean.y, self.mean.z)
    }

    pub fn cov_pp(&self) -> Matrix3<f64> {
        self.cov.fixed_view::<3, 3>(0, 0).into()
    }

    /// Log of the spatial marginal density at `p` (weight not included).
    pub fn log_density(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.position();
        self.log_norm - 0.5 * d.dot(&(self.pp_inv * d))
    }

    /// Points `normal` toward `viewpoint`.
    pub fn orient_toward(&mut self, viewpoint: &Vector3<f64>) {
        if self.normal.dot(&(viewpoint - self.position())) < 0.0 {
            self.normal = -self.normal;
        }
    }
}

/// Sign convention for normals with no viewpoint: largest-magnitude
/// coordinate positive.
pub(crate) fn canonical_sign(n: Vector3<f64>) -> Vector3<f64> {
    let i = n.iamax();
    if n[i] < 0.0 {
        -n
    } else {
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_density_at_mean() {
        let c = GmmComponent::new(1.0, Vector4::zeros(), Matrix4::identity(), Vector3::zeros(), 1.0, false).unwrap();
        assert!((c.log_density(&Vector3::zeros()) + 1.5 * LN_2PI).abs() < 1e-12);
        assert!((c.log_density(&Vector3::new(0.0, 10.0, 0.0)) - (-1.5 * LN_2PI - 50.0)).abs() < 1e-12);
    }

    #[test]
    fn singular_spatial_block_rejected() {
        let cov = Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 0.0, 1.0));
        assert!(GmmComponent::new(1.0, Vector4::zeros(), cov, Vector3::zeros(), 1.0, true).is_none());
    }
}
