//! Reverse-mode pass through compositing and ray/surfel intersection.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::{prepare, RenderBuffers, Tiles, ViewSurfel, NORMALIZE_MIN};
use crate::pointcloud::CameraModel;
use crate::surfel::{Surfel, SurfelGrad, SH_C0, SH_C1};

/// Loss gradients with respect to each rendered pixel value.
#[derive(Debug, Clone)]
pub struct PixelAdjoints {
    pub color: Vec<Vector3<f64>>,
    pub silhouette: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<Vector3<f64>>,
}

impl PixelAdjoints {
    pub fn zeros(len: usize) -> Self {
        Self {
            color: vec![Vector3::zeros(); len],
            silhouette: vec![0.0; len],
            depth: vec![0.0; len],
            normal: vec![Vector3::zeros(); len],
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderGradients {
    /// Gradient per surfel in world coordinates.
    pub surfels: Vec<SurfelGrad>,
    /// Norm of the position gradient in normalized device coordinates.
    pub screen: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct CamGrad {
    pc: Vector3<f64>,
    tu: Vector3<f64>,
    tv: Vector3<f64>,
    ru: f64,
    rv: f64,
    opacity: f64,
    color: Vector3<f64>,
}

impl CamGrad {
    fn add(&mut self, o: &CamGrad) {
        self.pc += o.pc;
        self.tu += o.tu;
        self.tv += o.tv;
        self.ru += o.ru;
        self.rv += o.rv;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

struct Replay {
    id: u32,
    alpha: f64,
    u: f64,
    v: f64,
    depth: f64,
    b: f64,
    d: Vector3<f64>,
    flip: f64,
}

/// Backpropagates pixel adjoints of one view to the surfels. `buffers`
/// must come from `render` with the same surfels, camera and degree.
pub fn render_backward(
    surfels: &[Surfel],
    camera: &CameraModel,
    sh_degree: usize,
    buffers: &RenderBuffers,
    adjoints: &PixelAdjoints,
) -> RenderGradients {
    let (w, h) = (camera.width(), camera.height());
    let view = prepare(surfels, camera, sh_degree);
    let tiles = Tiles::build(&view, w, h);
    let per_tile: Vec<Vec<CamGrad>> = (0..tiles.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &tiles.lists[t];
            let mut acc = vec![CamGrad::default(); list.len()];
            let mut replay = Vec::new();
            for (x, y) in tiles.pixels(t, w, h) {
                let idx = y * w + x;
                let contributors = buffers.contributors(idx);
                if contributors.is_empty() {
                    continue;
                }
                let d = camera.ray(x as f64, y as f64);
                replay.clear();
                for c in contributors {
                    let s = &view[c.surfel as usize];
                    let hit = s.intersect(d).expect("contributor must intersect");
                    replay.push(Replay {
                        id: c.surfel,
                        alpha: c.alpha,
                        u: hit.u,
                        v: hit.v,
                        depth: hit.depth,
                        b: hit.b,
                        d,
                        flip: -hit.b.signum(),
                    });
                }
                pixel_backward(idx, &replay, &view, buffers, adjoints, |id, g| {
                    let k = list.binary_search(&id).expect("contributor in tile list");
                    acc[k].add(g);
                });
            }
            acc
        })
        .collect();

    let mut cam = vec![CamGrad::default(); surfels.len()];
    for (t, acc) in per_tile.iter().enumerate() {
        for (k, g) in acc.iter().enumerate() {
            cam[tiles.lists[t][k] as usize].add(g);
        }
    }
    to_world(surfels, camera, sh_degree, &view, &cam)
}

fn pixel_backward(
    idx: usize,
    hits: &[Replay],
    view: &[ViewSurfel],
    buffers: &RenderBuffers,
    adj: &PixelAdjoints,
    mut emit: impl FnMut(u32, &CamGrad),
) {
    let a = buffers.silhouette.data[idx];
    let g_color = adj.color[idx];
    let (g_depth, g_normal, g_alpha) = if a > NORMALIZE_MIN {
        let gd = adj.depth[idx] / a;
        let gn = adj.normal[idx] / a;
        let corr = (adj.depth[idx] * buffers.depth.data[idx]
            + adj.normal[idx].dot(&buffers.normal.data[idx]))
            / a;
        (gd, gn, adj.silhouette[idx] - corr)
    } else {
        (0.0, Vector3::zeros(), adj.silhouette[idx])
    };

    let mut trans = Vec::with_capacity(hits.len());
    let mut t = 1.0;
    for hit in hits {
        trans.push(t);
        t *= 1.0 - hit.alpha;
    }

    // Weighted feature sum of everything behind the current entry.
    let mut rest = 0.0;
    for (i, hit) in hits.iter().enumerate().rev() {
        let s = &view[hit.id as usize];
        let n_view = s.n * hit.flip;
        let gf = g_color.dot(&s.color) + g_alpha + g_depth * hit.depth + g_normal.dot(&n_view);
        let d_alpha = trans[i] * (gf - rest);
        rest = hit.alpha * gf + (1.0 - hit.alpha) * rest;
        let weight = hit.alpha * trans[i];

        let mut g = CamGrad {
            color: g_color * weight,
            ..Default::default()
        };
        let fall = hit.alpha / s.opacity;
        g.opacity = d_alpha * fall;
        let gu = -d_alpha * hit.alpha * hit.u;
        let gv = -d_alpha * hit.alpha * hit.v;
        let gs = g_depth * weight;
        let gn = g_normal * (weight * hit.flip);
        intersection_backward(s, hit, gu, gv, gs, gn, &mut g);
        emit(hit.id, &g);
    }
}

/// Chains `(du, dv, d depth, d normal)` through the ray/plane hit.
fn intersection_backward(
    s: &ViewSurfel,
    hit: &Replay,
    gu: f64,
    gv: f64,
    gs: f64,
    gn_direct: Vector3<f64>,
    g: &mut CamGrad,
) {
    let rel = hit.d * hit.depth - s.pc;
    let g_rel = s.tu * (gu / s.ru) + s.tv * (gv / s.rv);
    let g_depth = gs + g_rel.dot(&hit.d);
    g.pc += -g_rel + s.n * (g_depth / hit.b);
    let g_n = gn_direct - rel * (g_depth / hit.b);
    g.tu += rel * (gu / s.ru) + s.tv.cross(&g_n);
    g.tv += rel * (gv / s.rv) + g_n.cross(&s.tu);
    g.ru += -gu * hit.u / s.ru;
    g.rv += -gv * hit.v / s.rv;
}

fn to_world(
    surfels: &[Surfel],
    camera: &CameraModel,
    sh_degree: usize,
    view: &[ViewSurfel],
    cam: &[CamGrad],
) -> RenderGradients {
    let rt = camera.rotation_matrix().transpose();
    let k = &camera.intrinsics;
    let (sx, sy) = (k.width as f64 / (2.0 * k.fx), k.height as f64 / (2.0 * k.fy));
    let (grads, screen) = cam
        .iter()
        .zip(view)
        .zip(surfels)
        .map(|((c, vs), s)| {
            let live = Vector3::new(
                if vs.color_live[0] { c.color.x } else { 0.0 },
                if vs.color_live[1] { c.color.y } else { 0.0 },
                if vs.color_live[2] { c.color.z } else { 0.0 },
            );
            let mut g = SurfelGrad {
                p: rt * c.pc,
                tu: rt * c.tu,
                tv: rt * c.tv,
                ru: c.ru,
                rv: c.rv,
                opacity: c.opacity,
                ..Default::default()
            };
            g.sh[0] = live * SH_C0;
            if sh_degree >= 1 {
                let d = vs.view_dir;
                g.sh[1] = live * (-SH_C1 * d.y);
                g.sh[2] = live * (SH_C1 * d.z);
                g.sh[3] = live * (-SH_C1 * d.x);
                let g_dir = Vector3::new(
                    -live.dot(&s.sh[3]),
                    -live.dot(&s.sh[1]),
                    live.dot(&s.sh[2]),
                ) * SH_C1;
                if vs.view_dist > 0.0 {
                    g.p += (g_dir - d * d.dot(&g_dir)) / vs.view_dist;
                }
            }
            let z = vs.pc.z.abs();
            let screen = (c.pc.x * z * sx).hypot(c.pc.y * z * sy);
            (g, screen)
        })
        .unzip();
    RenderGradients {
        surfels: grads,
        screen,
    }
}
