//! Analytic test scenes: textured rectangles, a camera ring, a sampled
//! LiDAR cloud, ray-traced ground-truth images and reference surfaces.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::pointcloud::camera::{read_cameras, read_intrinsics, write_cameras, write_intrinsics};
use crate::pointcloud::images::{load_mask_png, load_rgb_png, save_mask_png, save_rgb_png, ImageError};
use crate::pointcloud::ply::PlyError;
use crate::pointcloud::{load_ply_positions, save_ply_positions, CameraEntry, CameraError, CameraModel, Intrinsics, PlyEncoding};
use crate::raster::{Mask, Raster, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checker {
    /// Cell edge length, meters.
    pub period: f64,
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
}

impl Checker {
    pub fn gray(period: f64, a: f64, b: f64) -> Self {
        Self {
            period,
            a: Vector3::repeat(a),
            b: Vector3::repeat(b),
        }
    }

    /// Colour at face coordinates `(s, t)` in meters.
    pub fn at(&self, s: f64, t: f64) -> Vector3<f64> {
        let parity = ((s / self.period).floor() + (t / self.period).floor()).rem_euclid(2.0);
        if parity < 0.5 {
            self.a
        } else {
            self.b
        }
    }
}

/// A textured rectangle `origin + s * edge_u + t * edge_v`, `s, t in [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Face {
    pub origin: Vector3<f64>,
    pub edge_u: Vector3<f64>,
    pub edge_v: Vector3<f64>,
    pub texture: Checker,
}

impl Face {
    pub fn normal(&self) -> Vector3<f64> {
        self.edge_u.cross(&self.edge_v).normalize()
    }

    pub fn area(&self) -> f64 {
        self.edge_u.cross(&self.edge_v).norm()
    }

    fn point(&self, s: f64, t: f64) -> Vector3<f64> {
        self.origin + self.edge_u * s + self.edge_v * t
    }

    /// Ray parameter and colour of the hit, if any.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let n = self.edge_u.cross(&self.edge_v);
        let denom = n.dot(d);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.origin - o)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let rel = o + d * t - self.origin;
        let (lu, lv) = (self.edge_u.norm(), self.edge_v.norm());
        let s = rel.dot(&self.edge_u) / (lu * lu);
        let r = rel.dot(&self.edge_v) / (lv * lv);
        if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&r) {
            return None;
        }
        Some((t, self.texture.at(s * lu, r * lv)))
    }

    /// Distance from `p` to the rectangle.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let rel = p - self.origin;
        let (lu, lv) = (self.edge_u.norm(), self.edge_v.norm());
        let s = (rel.dot(&self.edge_u) / (lu * lu)).clamp(0.0, 1.0);
        let r = (rel.dot(&self.edge_v) / (lv * lv)).clamp(0.0, 1.0);
        (p - self.point(s, r)).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub center: Vector3<f64>,
    pub target: Vector3<f64>,
    pub fov_deg: f64,
    pub width: usize,
    pub image_height: usize,
}

impl CameraRing {
    pub fn cameras(&self) -> Vec<CameraModel> {
        let k = Intrinsics::from_fov(self.width, self.image_height, self.fov_deg);
        (0..self.count)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / self.count as f64;
                let eye = self.center + Vector3::new(self.radius * a.cos(), self.radius * a.sin(), self.height);
                CameraModel::look_at(k, &eye, &self.target, &Vector3::z())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub faces: Vec<Face>,
    pub ring: CameraRing,
    /// LiDAR points per square meter.
    pub lidar_density: f64,
    /// Gaussian noise along the face normal, meters.
    pub noise_sigma: f64,
    /// Grid spacing of the reference surface samples, meters.
    pub reference_spacing: f64,
    /// Subpixel grid per axis for anti-aliased ground-truth images.
    pub supersample: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// A closed 4 x 4 x 2.4 m room with gray checker walls, one reddish
    /// wall, and eight cameras looking across it. About 50k LiDAR points.
    pub fn room(image_size: usize) -> Self {
        let (x0, x1, y0, y1, z0, z1) = (-2.0, 2.0, -2.0, 2.0, 0.0, 2.4);
        let gray = Checker::gray(0.8, 0.35, 0.65);
        let accent = Checker {
            period: 0.8,
            a: Vector3::new(0.7, 0.4, 0.3),
            b: Vector3::new(0.4, 0.25, 0.2),
        };
        let v = Vector3::new;
        let faces = vec![
            Face { origin: v(x0, y0, z0), edge_u: v(x1 - x0, 0.0, 0.0), edge_v: v(0.0, y1 - y0, 0.0), texture: gray },
            Face { origin: v(x0, y0, z1), edge_u: v(0.0, y1 - y0, 0.0), edge_v: v(x1 - x0, 0.0, 0.0), texture: gray },
            Face { origin: v(x0, y0, z0), edge_u: v(0.0, 0.0, z1 - z0), edge_v: v(x1 - x0, 0.0, 0.0), texture: gray },
            Face { origin: v(x0, y1, z0), edge_u: v(x1 - x0, 0.0, 0.0), edge_v: v(0.0, 0.0, z1 - z0), texture: gray },
            Face { origin: v(x0, y0, z0), edge_u: v(0.0, y1 - y0, 0.0), edge_v: v(0.0, 0.0, z1 - z0), texture: gray },
            Face { origin: v(x1, y0, z0), edge_u: v(0.0, 0.0, z1 - z0), edge_v: v(0.0, y1 - y0, 0.0), texture: accent },
        ];
        Self {
            faces,
            ring: CameraRing {
                count: 8,
                radius: 1.0,
                height: 1.2,
                center: Vector3::zeros(),
                target: v(0.0, 0.0, 1.2),
                fov_deg: 90.0,
                width: image_size,
                image_height: image_size,
            },
            lidar_density: 710.0,
            noise_sigma: 0.0,
            reference_spacing: 0.02,
            supersample: 3,
            seed: 0,
        }
    }

    /// Floor and two walls meeting in a corner, seen from outside: the
    /// upper part of every view is sky.
    pub fn corner(image_size: usize) -> Self {
        let gray = Checker::gray(0.8, 0.35, 0.65);
        let v = Vector3::new;
        let faces = vec![
            Face { origin: v(0.0, 0.0, 0.0), edge_u: v(3.0, 0.0, 0.0), edge_v: v(0.0, 3.0, 0.0), texture: gray },
            Face { origin: v(0.0, 0.0, 0.0), edge_u: v(0.0, 0.0, 2.0), edge_v: v(3.0, 0.0, 0.0), texture: gray },
            Face { origin: v(0.0, 0.0, 0.0), edge_u: v(0.0, 3.0, 0.0), edge_v: v(0.0, 0.0, 2.0), texture: gray },
        ];
        Self {
            faces,
            ring: CameraRing {
                count: 4,
                radius: 1.0,
                height: 1.5,
                center: v(3.5, 3.5, 0.0),
                target: v(0.5, 0.5, 1.0),
                fov_deg: 70.0,
                width: image_size,
                image_height: image_size,
            },
            lidar_density: 400.0,
            noise_sigma: 0.0,
            reference_spacing: 0.02,
            supersample: 3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lidar_density > 0.0) || !(self.reference_spacing > 0.0) {
            return Err("scene densities must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return Err("noise sigma must be non-negative".into());
        }
        if self.supersample == 0 || self.ring.count == 0 || self.ring.width == 0 || self.ring.image_height == 0 {
            return Err("camera ring and supersampling must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub faces: Vec<Face>,
    pub cloud: Vec<Vector3<f64>>,
    pub cameras: Vec<CameraModel>,
    pub images: Vec<RgbImage>,
    /// `true` where the pixel ray hits nothing.
    pub sky: Vec<Mask>,
    /// Dense samples of the true surfaces.
    pub reference: Vec<Vector3<f64>>,
}

impl Scene {
    /// Distance from `p` to the nearest face.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        self.faces.iter().map(|f| f.distance(p)).fold(f64::INFINITY, f64::min)
    }
}

/// Nearest face hit along a ray.
pub fn trace(faces: &[Face], o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    faces
        .iter()
        .filter_map(|f| f.intersect(o, d))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

fn render_view(faces: &[Face], camera: &CameraModel, supersample: usize) -> (RgbImage, Mask) {
    let (w, h) = (camera.width(), camera.height());
    let o = camera.center();
    let rt = camera.rotation_matrix().transpose();
    let ss = supersample as f64;
    let mut img = RgbImage::black(w, h);
    let mut sky = Raster::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let centre = rt * camera.ray(x as f64, y as f64);
            sky.data[y * w + x] = trace(faces, &o, &centre).is_none();
            let mut acc = Vector3::zeros();
            for j in 0..supersample {
                for i in 0..supersample {
                    let sx = x as f64 + (i as f64 + 0.5) / ss - 0.5;
                    let sy = y as f64 + (j as f64 + 0.5) / ss - 0.5;
                    let d = rt * camera.ray(sx, sy);
                    if let Some((_, c)) = trace(faces, &o, &d) {
                        acc += c;
                    }
                }
            }
            img.data[y * w + x] = acc / (ss * ss);
        }
    }
    (img, sky)
}

fn sample_cloud(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let mut cloud = Vec::new();
    for f in &spec.faces {
        let n = (spec.lidar_density * f.area()).round() as usize;
        let normal = f.normal();
        for _ in 0..n {
            let p = f.point(rng.gen(), rng.gen());
            let e = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            cloud.push(p + normal * e);
        }
    }
    cloud
}

fn reference_samples(faces: &[Face], spacing: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for f in faces {
        let nu = (f.edge_u.norm() / spacing).ceil().max(1.0) as usize;
        let nv = (f.edge_v.norm() / spacing).ceil().max(1.0) as usize;
        for i in 0..=nu {
            for j in 0..=nv {
                out.push(f.point(i as f64 / nu as f64, j as f64 / nv as f64));
            }
        }
    }
    out
}

pub fn generate(spec: &SceneSpec) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cloud = sample_cloud(spec, &mut rng);
    let cameras = spec.ring.cameras();
    let (images, sky): (Vec<_>, Vec<_>) = cameras
        .par_iter()
        .map(|c| render_view(&spec.faces, c, spec.supersample))
        .unzip();
    Scene {
        faces: spec.faces.clone(),
        cloud,
        cameras,
        images,
        sky,
        reference: reference_samples(&spec.faces, spec.reference_spacing),
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// On-disk dataset layout shared by the pipeline stages.
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub root: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn cloud(&self) -> PathBuf {
        self.root.join("cloud.ply")
    }
    pub fn intrinsics(&self) -> PathBuf {
        self.root.join("intrinsics.txt")
    }
    pub fn cameras(&self) -> PathBuf {
        self.root.join("cameras.txt")
    }
    pub fn image(&self, name: &str) -> PathBuf {
        self.root.join("images").join(name)
    }
    /// Nonzero pixels are sky.
    pub fn sky(&self, name: &str) -> PathBuf {
        self.root.join("sky").join(name)
    }
    pub fn reference(&self) -> PathBuf {
        self.root.join("reference.ply")
    }
}

pub fn view_name(i: usize) -> String {
    format!("view_{i:03}.png")
}

pub fn write_dataset(scene: &Scene, paths: &DatasetPaths) -> Result<(), DatasetError> {
    for dir in [paths.root.clone(), paths.root.join("images"), paths.root.join("sky")] {
        std::fs::create_dir_all(&dir).map_err(|source| DatasetError::Io { path: dir.clone(), source })?;
    }
    save_ply_positions(&scene.cloud, &paths.cloud(), PlyEncoding::BinaryLittleEndian)?;
    save_ply_positions(&scene.reference, &paths.reference(), PlyEncoding::BinaryLittleEndian)?;
    if let Some(c) = scene.cameras.first() {
        write_intrinsics(&paths.intrinsics(), &c.intrinsics)?;
    }
    let entries: Vec<CameraEntry> = scene
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| CameraEntry {
            image_name: view_name(i),
            camera: c.clone(),
        })
        .collect();
    write_cameras(&paths.cameras(), &entries)?;
    for (i, (img, sky)) in scene.images.iter().zip(&scene.sky).enumerate() {
        save_rgb_png(img, &paths.image(&view_name(i)))?;
        save_mask_png(sky, &paths.sky(&view_name(i)))?;
    }
    Ok(())
}

/// Views of a dataset: cameras with their images and sky masks. A missing
/// sky mask means no sky.
#[derive(Debug, Clone)]
pub struct Views {
    pub names: Vec<String>,
    pub cameras: Vec<CameraModel>,
    pub images: Vec<RgbImage>,
    pub sky: Vec<Mask>,
}

pub fn load_views(paths: &DatasetPaths) -> Result<Views, DatasetError> {
    let k = read_intrinsics(&paths.intrinsics())?;
    let entries = read_cameras(&paths.cameras(), &k)?;
    let mut views = Views {
        names: Vec::new(),
        cameras: Vec::new(),
        images: Vec::new(),
        sky: Vec::new(),
    };
    for e in entries {
        let img = load_rgb_png(&paths.image(&e.image_name))?;
        let sky_path = paths.sky(&e.image_name);
        let sky = if sky_path.exists() {
            load_mask_png(&sky_path)?
        } else {
            Raster::filled(img.width, img.height, false)
        };
        views.names.push(e.image_name);
        views.cameras.push(e.camera);
        views.images.push(img);
        views.sky.push(sky);
    }
    Ok(views)
}

pub fn load_cloud(path: &Path) -> Result<Vec<Vector3<f64>>, DatasetError> {
    Ok(load_ply_positions(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn room_cloud_lies_on_faces() {
        let scene = generate(&SceneSpec::room(32));
        assert!((45_000..55_000).contains(&scene.cloud.len()));
        for p in scene.cloud.iter().step_by(37) {
            assert!(scene.surface_distance(p) < 1e-12);
        }
        assert!(scene.sky.iter().all(|m| m.data.iter().all(|&s| !s)));
    }

    #[test]
    fn checker_pixels_take_the_two_levels() {
        let mut spec = SceneSpec::room(48);
        spec.supersample = 1;
        let scene = generate(&spec);
        let c = &scene.cameras[0];
        let rt = c.rotation_matrix().transpose();
        for y in 0..48 {
            for x in 0..48 {
                let d = rt * c.ray(x as f64, y as f64);
                let (_, col) = trace(&scene.faces, &c.center(), &d).unwrap();
                assert_eq!(*scene.images[0].get(x, y), col);
            }
        }
        let gray = scene.images[1].data.iter().filter(|v| v.x == v.y && v.y == v.z);
        assert!(gray.clone().all(|v| v.x == 0.35 || v.x == 0.65));
    }

    #[test]
    fn corner_has_sky() {
        let scene = generate(&SceneSpec::corner(32));
        for m in &scene.sky {
            let n = m.data.iter().filter(|&&s| s).count();
            assert!(n > 0 && n < m.len());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::corner(16);
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn dataset_round_trip() {
        let scene = generate(&SceneSpec::corner(16));
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::new(dir.path());
        write_dataset(&scene, &paths).unwrap();
        let views = load_views(&paths).unwrap();
        assert_eq!(views.cameras.len(), 4);
        assert_eq!(views.sky, scene.sky);
        assert_eq!(load_cloud(&paths.cloud()).unwrap().len(), scene.cloud.len());
    }
}
