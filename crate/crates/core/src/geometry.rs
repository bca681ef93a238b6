//! Small linear-algebra helpers shared across modules.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Rec. 601 luma of an RGB triple in `[0, 1]`.
#[inline]
pub fn luma(rgb: &Vector3<f64>) -> f64 {
    GRAY_WEIGHTS[0] * rgb.x + GRAY_WEIGHTS[1] * rgb.y + GRAY_WEIGHTS[2] * rgb.z
}

/// Eigen-decomposition of a symmetric 3x3 matrix with eigenvalues sorted
/// ascending and a right-handed eigenvector basis (column `i` pairs with
/// `values[i]`).
#[derive(Debug, Clone, Copy)]
pub struct SortedEigen3 {
    pub values: [f64; 3],
    pub vectors: Matrix3<f64>,
}

impl SortedEigen3 {
    pub fn new(m: &Matrix3<f64>) -> Self {
        let sym = (m + m.transpose()) * 0.5;
        // Diagonal input is already decomposed; the iterative solver would perturb it by an ulp.
        let diagonal = (0..3).all(|r| (0..3).all(|c| r == c || sym[(r, c)] == 0.0));
        let (eigenvalues, eigenvectors) = if diagonal {
            (sym.diagonal(), Matrix3::identity())
        } else {
            let eig = SymmetricEigen::new(sym);
            (eig.eigenvalues, eig.eigenvectors)
        };
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eigenvalues[a].total_cmp(&eigenvalues[b]));
        let values = order.map(|i| eigenvalues[i]);
        let mut vectors = Matrix3::from_columns(&order.map(|i| {
            let v: Vector3<f64> = eigenvectors.column(i).into();
            v.normalize()
        }));
        if vectors.determinant() < 0.0 {
            let c0 = -vectors.column(0);
            vectors.set_column(0, &c0);
        }
        Self { values, vectors }
    }

    pub fn vector(&self, i: usize) -> Vector3<f64> {
        self.vectors.column(i).into()
    }
}

/// Mean and covariance (population, divided by n) of a point set.
pub fn mean_and_covariance<'a, I>(points: I) -> Option<(Vector3<f64>, Matrix3<f64>, usize)>
where
    I: IntoIterator<Item = &'a Vector3<f64>> + Clone,
{
    let mut n = 0usize;
    let mut sum = Vector3::zeros();
    for p in points.clone() {
        sum += p;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let mean = sum / n as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    Some((mean, cov / n as f64, n))
}

/// Unit vector orthogonal to `v`.
pub fn any_orthogonal(v: &Vector3<f64>) -> Vector3<f64> {
    let a = if v.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    v.cross(&a).normalize()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_endpoints() {
        assert!((luma(&Vector3::new(1.0, 1.0, 1.0)) - 1.0).abs() < 1e-15);
        assert_eq!(luma(&Vector3::zeros()), 0.0);
        assert!((luma(&Vector3::new(1.0, 0.0, 0.0)) - 0.299).abs() < 1e-15);
    }

    #[test]
    fn sorted_eigen_diagonal() {
        let e = SortedEigen3::new(&Matrix3::from_diagonal(&Vector3::new(0.04, 1e-8, 0.01)));
        assert_eq!(e.values, [1e-8, 0.01, 0.04]);
        assert!((e.vector(0).y.abs() - 1.0).abs() < 1e-12);
        assert!((e.vector(2).x.abs() - 1.0).abs() < 1e-12);
        assert!((e.vectors.determinant() - 1.0).abs() < 1e-12);
    }
}
