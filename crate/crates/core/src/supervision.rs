//! Geometric supervision of surfels by the GMM map: point-to-plane
//! distances to nearby components, shape control points at the surfel
//! rims, and blended component normals.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::gmm::GmmMap;
use crate::spatial::Neighbor;
use crate::surfel::{Surfel, SurfelGrad};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisionParams {
    /// Components per surfel.
    pub k: usize,
    /// Distance kernel width, meters.
    pub sigma: f64,
    /// Control point offset in radii.
    pub alpha: f64,
    /// Radius above which a rim control point is supervised, meters.
    pub phi: f64,
    /// Neighbour search radius, meters; `None` searches the whole map.
    pub max_radius: Option<f64>,
}

impl Default for SupervisionParams {
    fn default() -> Self {
        Self {
            k: 4,
            sigma: 0.1,
            alpha: 0.5,
            phi: 0.05,
            max_radius: Some(2.0),
        }
    }
}

/// One neighbouring component as seen by a surfel, with its kernel weight
/// fixed at query time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub component: u32,
    pub mean: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborEntry {
    pub anchors: Vec<Anchor>,
    /// Fewer than `k` components were found.
    pub partial: bool,
}

impl NeighborEntry {
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Exact `k` nearest components by spatial mean.
pub fn knn_components(map: &GmmMap, p: &Vector3<f64>, k: usize, max_radius: Option<f64>) -> Vec<Neighbor> {
    map.knn(p, k, max_radius)
}

pub fn kernel_weight(p_center: &Vector3<f64>, mean: &Vector3<f64>, sigma: f64) -> f64 {
    (-(p_center - mean).norm_squared() / (2.0 * sigma * sigma)).exp()
}

/// Neighbours of a surfel centred at `p`, weights anchored at `p`.
pub fn query(map: &GmmMap, p: &Vector3<f64>, params: &SupervisionParams) -> NeighborEntry {
    let found = knn_components(map, p, params.k, params.max_radius);
    let anchors = found
        .iter()
        .map(|nb| {
            let c = &map.components()[nb.index as usize];
            let mean = c.position();
            Anchor {
                component: nb.index,
                mean,
                normal: c.normal,
                weight: kernel_weight(p, &mean, params.sigma),
            }
        })
        .collect();
    NeighborEntry {
        anchors,
        partial: found.len() < params.k,
    }
}

pub fn query_all(map: &GmmMap, surfels: &[Surfel], params: &SupervisionParams) -> Vec<NeighborEntry> {
    surfels.par_iter().map(|s| query(map, &s.p, params)).collect()
}

/// Weighted absolute point-to-plane distance of `p` to the anchors.
pub fn weighted_distance(entry: &NeighborEntry, p: &Vector3<f64>) -> f64 {
    entry
        .anchors
        .iter()
        .map(|a| a.weight * (p - a.mean).dot(&a.normal).abs())
        .sum()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of `weighted_distance` with respect to `p`.
pub fn weighted_distance_grad(entry: &NeighborEntry, p: &Vector3<f64>) -> Vector3<f64> {
    entry
        .anchors
        .iter()
        .map(|a| a.normal * (a.weight * sign((p - a.mean).dot(&a.normal))))
        .sum()
}

/// Normalized weighted normal with every component normal flipped into the
/// hemisphere of `n`; `None` when the weighted sum nearly cancels.
pub fn blended_normal(entry: &NeighborEntry, n: &Vector3<f64>) -> Option<Vector3<f64>> {
    let sum: Vector3<f64> = entry
        .anchors
        .iter()
        .map(|a| {
            let nu = if a.normal.dot(n) < 0.0 { -a.normal } else { a.normal };
            nu * a.weight
        })
        .sum();
    let norm = sum.norm();
    (norm >= 1e-12).then(|| sum / norm)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GmmLossBreakdown {
    pub dis: f64,
    pub control: f64,
    pub normal: f64,
    /// Surfels averaged over.
    pub visible: usize,
    /// Visible surfels with no neighbouring components.
    pub unsupported: usize,
}

impl GmmLossBreakdown {
    pub fn total(&self) -> f64 {
        self.dis + self.control + self.normal
    }
}

/// Which rim control points are supervised for these radii.
pub fn control_branch(ru: f64, rv: f64, phi: f64) -> (bool, bool) {
    if rv >= phi {
        (true, true)
    } else if ru >= phi {
        (true, false)
    } else {
        (false, false)
    }
}

struct PerSurfel {
    dis: f64,
    control: f64,
    normal: f64,
    grad: SurfelGrad,
}

fn surfel_terms(s: &Surfel, entry: &NeighborEntry, params: &SupervisionParams, want_grad: bool) -> PerSurfel {
    let mut grad = SurfelGrad::default();
    let dis = weighted_distance(entry, &s.p);
    if want_grad {
        grad.p += weighted_distance_grad(entry, &s.p);
    }

    let (use_u, use_v) = control_branch(s.ru, s.rv, params.phi);
    let mut control = 0.0;
    let a = params.alpha;
    if use_u {
        let c = s.p + s.tu * (a * s.ru);
        control += weighted_distance(entry, &c);
        if want_grad {
            let g = weighted_distance_grad(entry, &c);
            grad.p += g;
            grad.tu += g * (a * s.ru);
            grad.ru += a * g.dot(&s.tu);
        }
    }
    if use_v {
        let c = s.p + s.tv * (a * s.rv);
        control += weighted_distance(entry, &c);
        if want_grad {
            let g = weighted_distance_grad(entry, &c);
            grad.p += g;
            grad.tv += g * (a * s.rv);
            grad.rv += a * g.dot(&s.tv);
        }
    }

    let n = s.normal();
    let mut normal = 0.0;
    if let Some(nb) = blended_normal(entry, &n) {
        let diff = n - nb;
        let dot = 1.0 - n.dot(&nb);
        normal = diff.abs().sum() + dot.abs();
        if want_grad {
            let gn = diff.map(sign) - nb * sign(dot);
            grad.tu += s.tv.cross(&gn);
            grad.tv += gn.cross(&s.tu);
        }
    }
    PerSurfel {
        dis,
        control,
        normal,
        grad,
    }
}

/// Losses averaged over the `visible` surfels.
pub fn gmm_losses(
    surfels: &[Surfel],
    queries: &[NeighborEntry],
    visible: &[usize],
    params: &SupervisionParams,
) -> GmmLossBreakdown {
    gmm_loss_gradients_impl(surfels, queries, visible, params, false).0
}

/// Losses and their gradients (dense, zero for invisible surfels). Kernel
/// weights, neighbour sets, normal flips and control branches are held
/// fixed; `sign(0) = 0` at the absolute-value kinks.
pub fn gmm_loss_gradients(
    surfels: &[Surfel],
    queries: &[NeighborEntry],
    visible: &[usize],
    params: &SupervisionParams,
) -> (GmmLossBreakdown, Vec<SurfelGrad>) {
    gmm_loss_gradients_impl(surfels, queries, visible, params, true)
}

fn gmm_loss_gradients_impl(
    surfels: &[Surfel],
    queries: &[NeighborEntry],
    visible: &[usize],
    params: &SupervisionParams,
    want_grad: bool,
) -> (GmmLossBreakdown, Vec<SurfelGrad>) {
    assert_eq!(surfels.len(), queries.len());
    let mut out = GmmLossBreakdown {
        visible: visible.len(),
        ..Default::default()
    };
    let mut grads = if want_grad {
        vec![SurfelGrad::default(); surfels.len()]
    } else {
        Vec::new()
    };
    if visible.is_empty() {
        return (out, grads);
    }
    let inv_g = 1.0 / visible.len() as f64;
    let terms: Vec<Option<PerSurfel>> = visible
        .par_iter()
        .map(|&i| {
            let entry = &queries[i];
            (!entry.is_empty()).then(|| surfel_terms(&surfels[i], entry, params, want_grad))
        })
        .collect();
    for (&i, t) in visible.iter().zip(terms) {
        let Some(mut t) = t else {
            out.unsupported += 1;
            continue;
        };
        out.dis += t.dis * inv_g;
        out.control += t.control * inv_g;
        out.normal += t.normal * inv_g;
        if want_grad {
            t.grad.scale(inv_g);
            grads[i] += &t.grad;
        }
    }
    (out, grads)
}
