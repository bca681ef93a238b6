use nalgebra::{Matrix3, Vector3};

use crate::geometry::{mean_and_covariance, SortedEigen3};

/// Local frame of a planar point set: origin at the mean, columns of
/// `rotation` are `[v2 v1 v0]` (largest to smallest spread), so the local
/// third axis is the plane normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFrame {
    pub mean: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    /// Ascending covariance eigenvalues `[a0, a1, a2]`.
    pub eigenvalues: [f64; 3],
}

impl PlaneFrame {
    /// PCA frame of `points`; `None` if they span fewer than two dimensions.
    pub fn fit<'a, I>(points: I) -> Option<Self>
    where
        I: IntoIterator<Item = &'a Vector3<f64>> + Clone,
    {
        let (mean, cov, n) = mean_and_covariance(points)?;
        if n < 3 {
            return None;
        }
        let eig = SortedEigen3::new(&cov);
        let scale = eig.values[2].max(f64::MIN_POSITIVE);
        if eig.values[1] <= 1e-12 * scale || eig.values[2] <= 0.0 {
            return None;
        }
        Some(Self::from_eigen(mean, &eig))
    }

    pub fn from_eigen(mean: Vector3<f64>, eig: &SortedEigen3) -> Self {
        let mut rotation = Matrix3::from_columns(&[eig.vector(2), eig.vector(1), eig.vector(0)]);
        if rotation.determinant() < 0.0 {
            let c = -rotation.column(2);
            rotation.set_column(2, &c);
        }
        Self {
            mean,
            rotation,
            eigenvalues: eig.values.map(|v| v.max(0.0)),
        }
    }

    pub fn identity() -> Self {
        Self {
            mean: Vector3::zeros(),
            rotation: Matrix3::identity(),
            eigenvalues: [0.0; 3],
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.rotation.column(2).into()
    }

    /// `(u, v, w)` coordinates of a world point.
    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.mean)
    }

    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal().dot(&(p - self.mean)).abs()
    }
}
