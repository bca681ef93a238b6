//! CPU surfel renderer: exact per-pixel ray/surfel intersection, front-to-
//! back alpha compositing of colour, depth, normal and silhouette, image
//! losses, and the analytic backward pass.

mod backward;
mod loss;
pub mod ssim;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::pointcloud::CameraModel;
use crate::raster::{GrayImage, Raster, RgbImage};
use crate::surfel::{sh_color, Surfel, CUTOFF_SQ};

pub use backward::{render_backward, PixelAdjoints, RenderGradients};
pub use loss::{image_losses, total_loss, ImageLosses, ImageTargets, LossWeights};

pub const TILE: usize = 16;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this.
pub const T_MIN: f64 = 1e-4;
/// Depth and normal are divided by the silhouette above this value.
pub const NORMALIZE_MIN: f64 = 1e-4;
/// Intersections closer than this camera-frame depth are ignored.
pub const NEAR: f64 = 0.01;
const PARALLEL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contributor {
    pub surfel: u32,
    pub alpha: f64,
}

/// Rendered rasters plus the per-pixel contributor lists the backward
/// pass replays.
#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub color: RgbImage,
    /// Alpha-weighted mean intersection depth; 0 where nothing renders.
    pub depth: GrayImage,
    /// Alpha-weighted camera-frame normal facing the viewer.
    pub normal: RgbImage,
    pub silhouette: GrayImage,
    pub(crate) offsets: Vec<usize>,
    pub contributors: Vec<Contributor>,
    /// Pixels each surfel contributed to.
    pub pixel_counts: Vec<u32>,
}

impl RenderBuffers {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Front-to-back contributors of pixel `index` (row-major).
    pub fn contributors(&self, index: usize) -> &[Contributor] {
        &self.contributors[self.offsets[index]..self.offsets[index + 1]]
    }

    /// Surfels contributing to at least one pixel, ascending.
    pub fn visible(&self) -> Vec<usize> {
        self.pixel_counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// A surfel transformed into one camera's frame.
#[derive(Debug, Clone)]
pub(crate) struct ViewSurfel {
    pub pc: Vector3<f64>,
    pub tu: Vector3<f64>,
    pub tv: Vector3<f64>,
    pub n: Vector3<f64>,
    /// `tu / ru` and `tv / rv`.
    pub tu_s: Vector3<f64>,
    pub tv_s: Vector3<f64>,
    /// `n . pc`.
    pub a: f64,
    pub ru: f64,
    pub rv: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    /// Channels not clamped at zero.
    pub color_live: [bool; 3],
    /// Unit direction from the camera centre to the surfel centre (world).
    pub view_dir: Vector3<f64>,
    pub view_dist: f64,
    /// Inclusive pixel rectangle `[x0, x1] x [y0, y1]`.
    pub bbox: Option<[usize; 4]>,
}

pub(crate) struct ViewHit {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub b: f64,
}

impl ViewSurfel {
    #[inline]
    pub fn intersect(&self, d: Vector3<f64>) -> Option<ViewHit> {
        let b = self.n.dot(&d);
        if b.abs() < PARALLEL_EPS {
            return None;
        }
        let depth = self.a / b;
        if depth <= NEAR {
            return None;
        }
        let rel = d * depth - self.pc;
        Some(ViewHit {
            u: rel.dot(&self.tu_s),
            v: rel.dot(&self.tv_s),
            depth,
            b,
        })
    }

    #[inline]
    fn covers(&self, x: usize, y: usize) -> bool {
        matches!(self.bbox, Some([x0, x1, y0, y1]) if x >= x0 && x <= x1 && y >= y0 && y <= y1)
    }
}

pub(crate) fn prepare(surfels: &[Surfel], camera: &CameraModel, sh_degree: usize) -> Vec<ViewSurfel> {
    let r: Matrix3<f64> = camera.rotation_matrix();
    let center = camera.center();
    let (w, h) = (camera.width(), camera.height());
    surfels
        .par_iter()
        .map(|s| {
            let pc = r * s.p + camera.translation;
            let tu = r * s.tu;
            let tv = r * s.tv;
            let n = tu.cross(&tv);
            let offset = s.p - center;
            let view_dist = offset.norm();
            let view_dir = if view_dist > 0.0 { offset / view_dist } else { Vector3::z() };
            let raw = sh_color(&s.sh, sh_degree, &view_dir);
            let bbox = screen_bbox(camera, &pc, &(tu * (3.0 * s.ru)), &(tv * (3.0 * s.rv)), w, h);
            ViewSurfel {
                pc,
                tu,
                tv,
                n,
                tu_s: tu / s.ru,
                tv_s: tv / s.rv,
                a: n.dot(&pc),
                ru: s.ru,
                rv: s.rv,
                opacity: s.opacity,
                color: raw.map(|c| c.max(0.0)),
                color_live: [raw.x > 0.0, raw.y > 0.0, raw.z > 0.0],
                view_dir,
                view_dist,
                bbox,
            }
        })
        .collect()
}

/// Pixel rectangle containing every pixel whose ray can hit the
/// three-sigma ellipse at a depth beyond `NEAR`.
fn screen_bbox(
    camera: &CameraModel,
    pc: &Vector3<f64>,
    eu: &Vector3<f64>,
    ev: &Vector3<f64>,
    w: usize,
    h: usize,
) -> Option<[usize; 4]> {
    let corners = [pc + eu + ev, pc + eu - ev, pc - eu - ev, pc - eu + ev];
    let in_front = corners.iter().filter(|c| c.z > NEAR).count();
    let (lo, hi) = match in_front {
        0 => return None,
        4 => ellipse_bounds(camera, pc, eu, ev)?,
        _ => clipped_bounds(camera, &corners),
    };
    let x0 = lo[0].ceil().max(0.0);
    let y0 = lo[1].ceil().max(0.0);
    let x1 = hi[0].floor().min(w as f64 - 1.0);
    let y1 = hi[1].floor().min(h as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some([x0 as usize, x1 as usize, y0 as usize, y1 as usize])
}

/// Exact pixel bounds of the projected ellipse `pc + cos(t) eu + sin(t) ev`,
/// from the tangent lines of its image conic. Requires the ellipse to lie in
/// front of the camera.
fn ellipse_bounds(
    camera: &CameraModel,
    pc: &Vector3<f64>,
    eu: &Vector3<f64>,
    ev: &Vector3<f64>,
) -> Option<([f64; 2], [f64; 2])> {
    let k = &camera.intrinsics;
    let km = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
    // Homography from (cos, sin, 1) to homogeneous pixels.
    let t = km * Matrix3::from_columns(&[*eu, *ev, *pc]);
    let f = |a: usize, b: usize| {
        t[(a, 0)] * t[(b, 0)] + t[(a, 1)] * t[(b, 1)] - t[(a, 2)] * t[(b, 2)]
    };
    let ww = f(2, 2);
    if ww >= 0.0 {
        return None;
    }
    let mut lo = [0.0; 2];
    let mut hi = [0.0; 2];
    for axis in 0..2 {
        let c = f(axis, 2) / ww;
        let disc = c * c - f(axis, axis) / ww;
        let half = disc.max(0.0).sqrt();
        lo[axis] = c - half;
        hi[axis] = c + half;
    }
    Some((lo, hi))
}

/// Bounds of the three-sigma rectangle clipped to `z >= NEAR`.
fn clipped_bounds(camera: &CameraModel, corners: &[Vector3<f64>; 4]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut add = |p: &Vector3<f64>| {
        let q = camera.project(p);
        lo = [lo[0].min(q.x), lo[1].min(q.y)];
        hi = [hi[0].max(q.x), hi[1].max(q.y)];
    };
    for i in 0..4 {
        let a = &corners[i];
        let b = &corners[(i + 1) % 4];
        if a.z >= NEAR {
            add(a);
        }
        if (a.z - NEAR) * (b.z - NEAR) < 0.0 {
            let t = (NEAR - a.z) / (b.z - a.z);
            add(&(a + (b - a) * t));
        }
    }
    (lo, hi)
}

pub(crate) struct Tiles {
    pub nx: usize,
    /// Candidate surfel ids per tile, ascending.
    pub lists: Vec<Vec<u32>>,
}

impl Tiles {
    pub fn build(view: &[ViewSurfel], w: usize, h: usize) -> Self {
        let nx = w.div_ceil(TILE);
        let ny = h.div_ceil(TILE);
        let mut lists = vec![Vec::new(); nx * ny];
        for (i, s) in view.iter().enumerate() {
            if let Some([x0, x1, y0, y1]) = s.bbox {
                for ty in y0 / TILE..=y1 / TILE {
                    for tx in x0 / TILE..=x1 / TILE {
                        lists[ty * nx + tx].push(i as u32);
                    }
                }
            }
        }
        Self { nx, lists }
    }

    /// Pixel indices (row-major) of tile `t`.
    pub fn pixels(&self, t: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (t % self.nx, t / self.nx);
        let xs = tx * TILE..((tx + 1) * TILE).min(w);
        let ys = ty * TILE..((ty + 1) * TILE).min(h);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }
}

struct TileOut {
    /// Per pixel of the tile, in `Tiles::pixels` order.
    pixels: Vec<(usize, PixelValue)>,
    counts: Vec<u32>,
    contributors: Vec<Contributor>,
}

struct PixelValue {
    color: Vector3<f64>,
    depth: f64,
    normal: Vector3<f64>,
    silhouette: f64,
}

/// Renders `surfels` from `camera`. Background is black.
pub fn render(surfels: &[Surfel], camera: &CameraModel, sh_degree: usize) -> RenderBuffers {
    let (w, h) = (camera.width(), camera.height());
    let view = prepare(surfels, camera, sh_degree);
    let tiles = Tiles::build(&view, w, h);
    let per_tile: Vec<TileOut> = (0..tiles.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &tiles.lists[t];
            let mut out = TileOut {
                pixels: Vec::with_capacity(TILE * TILE),
                counts: Vec::with_capacity(TILE * TILE),
                contributors: Vec::new(),
            };
            let mut hits: Vec<(f64, u32, f64, f64)> = Vec::new();
            for (x, y) in tiles.pixels(t, w, h) {
                hits.clear();
                let d = camera.ray(x as f64, y as f64);
                for &id in list {
                    let s = &view[id as usize];
                    if !s.covers(x, y) {
                        continue;
                    }
                    let Some(hit) = s.intersect(d) else { continue };
                    let q = hit.u * hit.u + hit.v * hit.v;
                    if q > CUTOFF_SQ {
                        continue;
                    }
                    let alpha = s.opacity * (-0.5 * q).exp();
                    if alpha < ALPHA_MIN {
                        continue;
                    }
                    hits.push((hit.depth, id, alpha, -hit.b.signum()));
                }
                hits.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let before = out.contributors.len();
                let value = composite(&hits, &view, &mut out.contributors);
                out.counts.push((out.contributors.len() - before) as u32);
                out.pixels.push((y * w + x, value));
            }
            out
        })
        .collect();

    let mut color = RgbImage::black(w, h);
    let mut depth = Raster::filled(w, h, 0.0);
    let mut normal = RgbImage::black(w, h);
    let mut silhouette = Raster::filled(w, h, 0.0);
    let mut pixel_counts = vec![0u32; surfels.len()];
    let mut span = vec![(0usize, 0usize, 0u32); w * h];
    for (t, out) in per_tile.iter().enumerate() {
        let mut start = 0usize;
        for ((index, v), &c) in out.pixels.iter().zip(&out.counts) {
            color.data[*index] = v.color;
            depth.data[*index] = v.depth;
            normal.data[*index] = v.normal;
            silhouette.data[*index] = v.silhouette;
            span[*index] = (t, start, c);
            start += c as usize;
        }
        for c in &out.contributors {
            pixel_counts[c.surfel as usize] += 1;
        }
    }
    let mut offsets = Vec::with_capacity(w * h + 1);
    offsets.push(0);
    let total: usize = per_tile.iter().map(|o| o.contributors.len()).sum();
    let mut contributors = Vec::with_capacity(total);
    for &(t, start, c) in &span {
        contributors.extend_from_slice(&per_tile[t].contributors[start..start + c as usize]);
        offsets.push(contributors.len());
    }
    RenderBuffers {
        color,
        depth,
        normal,
        silhouette,
        offsets,
        contributors,
        pixel_counts,
    }
}

fn composite(hits: &[(f64, u32, f64, f64)], view: &[ViewSurfel], out: &mut Vec<Contributor>) -> PixelValue {
    let mut t = 1.0;
    let mut color = Vector3::zeros();
    let mut depth = 0.0;
    let mut normal = Vector3::zeros();
    for &(s, id, alpha, flip) in hits {
        let w = alpha * t;
        let vs = &view[id as usize];
        color += vs.color * w;
        depth += s * w;
        normal += vs.n * (flip * w);
        out.push(Contributor { surfel: id, alpha });
        t *= 1.0 - alpha;
        if t < T_MIN {
            break;
        }
    }
    let silhouette = 1.0 - t;
    let (depth, normal) = if silhouette > NORMALIZE_MIN {
        (depth / silhouette, normal / silhouette)
    } else {
        (0.0, Vector3::zeros())
    };
    PixelValue {
        color,
        depth,
        normal,
        silhouette,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Intrinsics;
    use crate::surfel::rgb_to_sh0;
    use nalgebra::UnitQuaternion;

    pub(crate) fn test_camera() -> CameraModel {
        CameraModel::new(
            Intrinsics { fx: 40.0, fy: 40.0, cx: 15.0, cy: 15.0, width: 31, height: 31 },
            UnitQuaternion::identity(),
            Vector3::zeros(),
        )
    }

    fn frontal(z: f64, opacity: f64, rgb: Vector3<f64>) -> Surfel {
        let mut sh = [Vector3::zeros(); 4];
        sh[0] = rgb_to_sh0(&rgb);
        Surfel {
            p: Vector3::new(0.0, 0.0, z),
            tu: Vector3::x(),
            tv: Vector3::y(),
            ru: 0.2,
            rv: 0.2,
            opacity,
            sh,
        }
    }

    #[test]
    fn empty_scene_is_black() {
        let b = render(&[], &test_camera(), 0);
        assert!(b.silhouette.data.iter().all(|&s| s == 0.0));
        assert!(b.color.data.iter().all(|c| *c == Vector3::zeros()));
    }

    #[test]
    fn stacked_pair_composites_exactly() {
        let c1 = Vector3::new(1.0, 0.2, 0.0);
        let c2 = Vector3::new(0.0, 0.4, 1.0);
        let surfels = [frontal(3.0, 0.5, c2), frontal(2.0, 0.5, c1)];
        let b = render(&surfels, &test_camera(), 0);
        let i = b.color.index(15, 15);
        assert!((b.color.data[i] - (c1 * 0.5 + c2 * 0.25)).norm() < 1e-12);
        assert!((b.silhouette.data[i] - 0.75).abs() < 1e-12);
        assert!((b.depth.data[i] - (2.0 * 0.5 + 3.0 * 0.25) / 0.75).abs() < 1e-12);
        // Viewer-facing normal.
        assert!((b.normal.data[i] - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert_eq!(b.contributors(i)[0].surfel, 1);
    }

    #[test]
    fn opaque_surfel_hides_the_rest() {
        let c = Vector3::new(0.3, 0.6, 0.9);
        let surfels = [frontal(2.0, 1.0, c), frontal(3.0, 1.0, Vector3::zeros())];
        let b = render(&surfels, &test_camera(), 0);
        let i = b.color.index(15, 15);
        assert!((b.color.data[i] - c).norm() < 1e-12);
        assert_eq!(b.silhouette.data[i], 1.0);
        assert_eq!(b.depth.data[i], 2.0);
        assert_eq!(b.contributors(i).len(), 1);
    }

    #[test]
    fn input_order_does_not_matter() {
        let a = frontal(2.0, 0.5, Vector3::new(1.0, 0.0, 0.0));
        // Distinct depths: exact ties fall back to index order.
        let mut b = frontal(2.3, 0.7, Vector3::new(0.0, 1.0, 0.0));
        b.p.x = 0.05;
        let r1 = render(&[a, b], &test_camera(), 0);
        let r2 = render(&[b, a], &test_camera(), 0);
        for (x, y) in r1.color.data.iter().zip(&r2.color.data) {
            assert!((x - y).norm() < 1e-15);
        }
    }
}
