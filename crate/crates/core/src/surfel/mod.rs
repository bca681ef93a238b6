//! 2D Gaussian surfels: an oriented elliptical disk with a Gaussian falloff,
//! opacity and spherical-harmonic colour.

mod checkpoint;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};

use crate::gmm::{GmmComponent, GmmMap};
use crate::pointcloud::CameraModel;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

/// Smallest allowed radius, meters.
pub const R_MIN: f64 = 1e-6;
/// Tangent-plane cutoff `u^2 + v^2 <= CUTOFF_SQ` (three sigma).
pub const CUTOFF_SQ: f64 = 9.0;
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
/// Opacities are kept inside `(0, 1)` so their logits stay finite.
pub const OPACITY_EPS: f64 = 1e-4;

/// One surfel in world coordinates.
///
/// `tu` and `tv` are used as given (no renormalization), so the normal is
/// `tu x tv` and perturbations of either are meaningful for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surfel {
    pub p: Vector3<f64>,
    pub tu: Vector3<f64>,
    pub tv: Vector3<f64>,
    pub ru: f64,
    pub rv: f64,
    pub opacity: f64,
    /// Degree-1 layout: DC, then the `y`, `z`, `x` bands.
    pub sh: [Vector3<f64>; 4],
}

impl Surfel {
    pub fn normal(&self) -> Vector3<f64> {
        self.tu.cross(&self.tv)
    }

    /// World point at tangent coordinates `u`.
    pub fn point(&self, u: &Vector2<f64>) -> Vector3<f64> {
        self.p + self.tu * (self.ru * u.x) + self.tv * (self.rv * u.y)
    }

    /// Colour seen along `view_dir` (unit, from the camera toward the
    /// surfel). Negative channels clamp to zero.
    pub fn color(&self, degree: usize, view_dir: &Vector3<f64>) -> Vector3<f64> {
        sh_color(&self.sh, degree, view_dir).map(|c| c.max(0.0))
    }
}

pub fn eval_gaussian(u: &Vector2<f64>) -> f64 {
    (-0.5 * u.norm_squared()).exp()
}

/// Unclamped SH colour.
pub fn sh_color(sh: &[Vector3<f64>; 4], degree: usize, d: &Vector3<f64>) -> Vector3<f64> {
    let mut c = sh[0] * SH_C0 + Vector3::repeat(0.5);
    if degree >= 1 {
        c += sh[1] * (-SH_C1 * d.y) + sh[2] * (SH_C1 * d.z) + sh[3] * (-SH_C1 * d.x);
    }
    c
}

/// SH DC coefficient reproducing `rgb` at degree 0.
pub fn rgb_to_sh0(rgb: &Vector3<f64>) -> Vector3<f64> {
    (rgb - Vector3::repeat(0.5)) / SH_C0
}

/// Ray hit on a surfel plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub u: f64,
    pub v: f64,
    /// Camera-frame z of the intersection.
    pub depth: f64,
}

/// Intersects the ray through pixel `(x, y)` with the surfel's plane.
/// Misses when the ray is parallel to the plane or the hit is behind the
/// camera. No cutoff is applied.
pub fn ray_intersect(s: &Surfel, camera: &CameraModel, x: f64, y: f64) -> Option<Hit> {
    let r = camera.rotation_matrix();
    let pc = r * s.p + camera.translation;
    let (tu, tv) = (r * s.tu, r * s.tv);
    let n = tu.cross(&tv);
    let d = camera.ray(x, y);
    let b = n.dot(&d);
    if b.abs() < 1e-9 {
        return None;
    }
    let depth = n.dot(&pc) / b;
    if depth <= 0.0 {
        return None;
    }
    let rel = d * depth - pc;
    Some(Hit {
        u: rel.dot(&tu) / s.ru,
        v: rel.dot(&tv) / s.rv,
        depth,
    })
}

/// Gradient of a scalar with respect to every surfel attribute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfelGrad {
    pub p: Vector3<f64>,
    pub tu: Vector3<f64>,
    pub tv: Vector3<f64>,
    pub ru: f64,
    pub rv: f64,
    pub opacity: f64,
    pub sh: [Vector3<f64>; 4],
}

impl Default for SurfelGrad {
    fn default() -> Self {
        Self {
            p: Vector3::zeros(),
            tu: Vector3::zeros(),
            tv: Vector3::zeros(),
            ru: 0.0,
            rv: 0.0,
            opacity: 0.0,
            sh: [Vector3::zeros(); 4],
        }
    }
}

impl std::ops::AddAssign<&SurfelGrad> for SurfelGrad {
    fn add_assign(&mut self, o: &SurfelGrad) {
        self.p += o.p;
        self.tu += o.tu;
        self.tv += o.tv;
        self.ru += o.ru;
        self.rv += o.rv;
        self.opacity += o.opacity;
        for i in 0..4 {
            self.sh[i] += o.sh[i];
        }
    }
}

impl SurfelGrad {
    pub fn scale(&mut self, k: f64) {
        self.p *= k;
        self.tu *= k;
        self.tv *= k;
        self.ru *= k;
        self.rv *= k;
        self.opacity *= k;
        for c in &mut self.sh {
            *c *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.tu.iter()).chain(self.tv.iter()).all(|v| v.is_finite())
            && self.ru.is_finite()
            && self.rv.is_finite()
            && self.opacity.is_finite()
            && self.sh.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(o: f64) -> f64 {
    let o = o.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (o / (1.0 - o)).ln()
}

/// Surfels as parallel arrays in the optimizer's parameterization:
/// rotation quaternions whose matrix columns are `[tu tv n]`, log radii,
/// opacity logits and SH coefficients, plus screen-gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct SurfelSet {
    pub sh_degree: usize,
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Quaternion<f64>>,
    /// `(ln ru, ln rv)`.
    pub log_radii: Vec<Vector2<f64>>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<[Vector3<f64>; 4]>,
    /// Sum of per-view screen-space position gradient norms.
    pub grad_accum: Vec<f64>,
    /// Number of views the surfel contributed to since the last reset.
    pub grad_count: Vec<u32>,
}

impl SurfelSet {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Appends a surfel; the tangent frame is orthonormalized (keeping
    /// the `tu` direction) and radii are floored at `R_MIN`.
    pub fn push(&mut self, s: &Surfel) {
        let tu = s.tu.normalize();
        let n = tu.cross(&s.tv).normalize();
        let tv = n.cross(&tu);
        let rot = UnitQuaternion::from_matrix(&Matrix3::from_columns(&[tu, tv, n]));
        self.positions.push(s.p);
        self.rotations.push(rot.into_inner());
        self.log_radii.push(Vector2::new(s.ru.max(R_MIN).ln(), s.rv.max(R_MIN).ln()));
        self.opacity_logits.push(logit(s.opacity));
        let mut sh = s.sh;
        if self.sh_degree == 0 {
            sh[1..].fill(Vector3::zeros());
        }
        self.sh.push(sh);
        self.grad_accum.push(0.0);
        self.grad_count.push(0);
    }

    pub fn from_surfels(surfels: &[Surfel], sh_degree: usize) -> Self {
        let mut set = Self::new(sh_degree);
        for s in surfels {
            set.push(s);
        }
        set
    }

    pub fn frame(&self, i: usize) -> Matrix3<f64> {
        UnitQuaternion::from_quaternion(self.rotations[i]).to_rotation_matrix().into_inner()
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn radii(&self, i: usize) -> Vector2<f64> {
        self.log_radii[i].map(f64::exp)
    }

    pub fn get(&self, i: usize) -> Surfel {
        let m = self.frame(i);
        let r = self.radii(i);
        Surfel {
            p: self.positions[i],
            tu: m.column(0).into(),
            tv: m.column(1).into(),
            ru: r.x,
            rv: r.y,
            opacity: self.opacity(i),
            sh: self.sh[i],
        }
    }

    pub fn to_surfels(&self) -> Vec<Surfel> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Keeps the surfels whose flag is true, in order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        fn filter<T: Clone>(v: &mut Vec<T>, keep: &[bool]) {
            let mut i = 0;
            v.retain(|_| {
                i += 1;
                keep[i - 1]
            });
        }
        filter(&mut self.positions, keep);
        filter(&mut self.rotations, keep);
        filter(&mut self.log_radii, keep);
        filter(&mut self.opacity_logits, keep);
        filter(&mut self.sh, keep);
        filter(&mut self.grad_accum, keep);
        filter(&mut self.grad_count, keep);
    }

    /// Re-establishes the invariants after an optimizer step: unit
    /// quaternions, radii floored at `R_MIN` and ordered `ru >= rv`
    /// (swapping axes by a quarter turn about the normal when needed).
    pub fn normalize(&mut self) {
        let quarter = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let floor = R_MIN.ln();
        for i in 0..self.len() {
            let mut q = UnitQuaternion::from_quaternion(self.rotations[i]);
            let lr = &mut self.log_radii[i];
            lr.x = lr.x.max(floor);
            lr.y = lr.y.max(floor);
            if lr.x < lr.y {
                // New tu = old tv, new tv = -old tu; the normal is unchanged.
                q *= quarter;
                *lr = Vector2::new(lr.y, lr.x);
            }
            self.rotations[i] = q.into_inner();
        }
    }

    pub fn reset_grad_stats(&mut self) {
        self.grad_accum.fill(0.0);
        self.grad_count.fill(0);
    }
}

/// Opacity of a surfel initialized from a component of weight `weight`.
pub fn initial_opacity(weight: f64) -> f64 {
    0.6 + 0.4 * weight
}

/// Centre at the spatial mean, tangent axes along the two largest spatial
/// eigenvectors, one-sigma radii, and DC colour from the component's RGB.
pub fn surfel_from_component(c: &GmmComponent) -> Surfel {
    let n = c.normal;
    let tu = c.spatial.vector(2);
    let tv = n.cross(&tu);
    let mut sh = [Vector3::zeros(); 4];
    sh[0] = rgb_to_sh0(&c.mean_rgb.map(f64::from));
    Surfel {
        p: c.position(),
        tu,
        tv,
        ru: c.spatial.values[2].max(0.0).sqrt().max(R_MIN),
        rv: c.spatial.values[1].max(0.0).sqrt().max(R_MIN),
        opacity: initial_opacity(c.weight),
        sh,
    }
}

/// One surfel per map component.
pub fn init_from_gmm(map: &GmmMap, sh_degree: usize) -> SurfelSet {
    let mut set = SurfelSet::new(sh_degree);
    for c in map.components() {
        set.push(&surfel_from_component(c));
    }
    set
}

/// Baseline initialization from a random subset of colorized points:
/// isotropic disks facing +z with radius equal to the mean distance to the
/// three nearest subset neighbours, opacity 0.1 and the point colour.
pub fn init_from_points<R: rand::Rng>(
    points: &[crate::pointcloud::ColorizedPoint],
    count: usize,
    sh_degree: usize,
    rng: &mut R,
) -> SurfelSet {
    let picked = rand::seq::index::sample(rng, points.len(), count.min(points.len())).into_vec();
    let subset: Vec<Vector3<f64>> = picked.iter().map(|&i| points[i].p).collect();
    let mut set = SurfelSet::new(sh_degree);
    if subset.is_empty() {
        return set;
    }
    let hash = crate::spatial::SpatialHash::build(&subset, crate::spatial::surface_cell_size(&subset, 4));
    for (j, &i) in picked.iter().enumerate() {
        let nb = hash.knn(&subset, &subset[j], 4, None);
        let dists: Vec<f64> = nb.iter().filter(|n| n.index as usize != j).map(|n| n.dist2.sqrt()).collect();
        let r = if dists.is_empty() {
            0.01
        } else {
            dists.iter().sum::<f64>() / dists.len() as f64
        };
        let mut sh = [Vector3::zeros(); 4];
        sh[0] = rgb_to_sh0(&points[i].rgb);
        set.push(&Surfel {
            p: subset[j],
            tu: Vector3::x(),
            tv: Vector3::y(),
            ru: r.max(R_MIN),
            rv: r.max(R_MIN),
            opacity: 0.1,
            sh,
        });
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Intrinsics;

    fn frontal(z: f64) -> Surfel {
        Surfel {
            p: Vector3::new(0.0, 0.0, z),
            tu: Vector3::x(),
            tv: -Vector3::y(),
            ru: 0.5,
            rv: 0.25,
            opacity: 1.0,
            sh: [Vector3::zeros(); 4],
        }
    }

    fn camera() -> CameraModel {
        CameraModel::new(
            Intrinsics { fx: 100.0, fy: 100.0, cx: 32.0, cy: 32.0, width: 64, height: 64 },
            UnitQuaternion::identity(),
            Vector3::zeros(),
        )
    }

    #[test]
    fn gaussian_values() {
        assert_eq!(eval_gaussian(&Vector2::zeros()), 1.0);
        assert!((eval_gaussian(&Vector2::new(1.0, 0.0)) - (-0.5f64).exp()).abs() < 1e-15);
        let s = frontal(2.0);
        assert_eq!(s.point(&Vector2::new(1.0, 0.0)) - s.p, s.tu * s.ru);
        assert_eq!(s.normal(), -Vector3::z());
    }

    #[test]
    fn frontal_hit_and_parallel_miss() {
        let s = frontal(5.0);
        let hit = ray_intersect(&s, &camera(), 32.0, 32.0).unwrap();
        assert_eq!((hit.u, hit.v, hit.depth), (0.0, 0.0, 5.0));
        // Similar triangles: pixel offset 10 at f = 100 and depth 5 is 0.5 m.
        let off = ray_intersect(&s, &camera(), 42.0, 22.0).unwrap();
        assert!((off.u - 0.5 / 0.5).abs() < 1e-12);
        assert!((off.v - 0.5 / 0.25).abs() < 1e-12);
        let edge_on = Surfel { tu: Vector3::x(), tv: Vector3::z(), ..s };
        assert!(ray_intersect(&edge_on, &camera(), 32.0, 32.0).is_none());
        let behind = frontal(-1.0);
        assert!(ray_intersect(&behind, &camera(), 32.0, 32.0).is_none());
    }

    #[test]
    fn set_round_trip_and_axis_swap() {
        let s = frontal(3.0);
        let mut set = SurfelSet::from_surfels(&[s], 0);
        let back = set.get(0);
        assert!((back.tu - s.tu).norm() < 1e-12);
        assert!((back.tv - s.tv).norm() < 1e-12);
        assert!((back.ru - 0.5).abs() < 1e-12);
        set.log_radii[0] = Vector2::new(0.1f64.ln(), 0.3f64.ln());
        set.normalize();
        let swapped = set.get(0);
        assert!((swapped.ru - 0.3).abs() < 1e-12 && (swapped.rv - 0.1).abs() < 1e-12);
        assert!((swapped.tu - s.tv).norm() < 1e-12);
        assert!((swapped.normal() - s.normal()).norm() < 1e-12);
    }

    #[test]
    fn dc_colour_round_trip() {
        let rgb = Vector3::new(0.2, 0.5, 0.9);
        let mut sh = [Vector3::zeros(); 4];
        sh[0] = rgb_to_sh0(&rgb);
        assert!((sh_color(&sh, 0, &Vector3::z()) - rgb).norm() < 1e-15);
    }
}
