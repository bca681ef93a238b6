use std::collections::HashMap;

use nalgebra::{Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::em::{log_sum_exp, posterior, Gaussian};
use super::{
    extract_planes, fit_free_gmm, fit_local_gmm, to_world, voxelize, GmmComponent, GmmError, GmmParams,
};
use crate::pointcloud::FrameCloud;
use crate::spatial::{Neighbor, SpatialHash, VoxelKey};

/// Outcome of feeding one frame to the map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationReport {
    pub frame_id: usize,
    pub input_points: usize,
    /// Points in voxels with no components yet.
    pub new_voxel_points: usize,
    /// Points in modeled voxels whose log-likelihood fell below the threshold.
    pub low_likelihood_points: usize,
    /// Effective points absorbed into new components.
    pub consumed: usize,
    /// Effective points on no plane and in too small a residual set.
    pub skipped: usize,
    pub new_components: usize,
}

impl IntegrationReport {
    pub fn effective(&self) -> usize {
        self.new_voxel_points + self.low_likelihood_points
    }
}

/// Append-only component arena indexed by the voxel of each spatial mean.
#[derive(Debug, Clone)]
pub struct GmmMap {
    voxel_size: f64,
    components: Vec<GmmComponent>,
    means: Vec<Vector3<f64>>,
    index: SpatialHash,
    /// Points absorbed per source voxel so far; scales new weights.
    voxel_totals: HashMap<VoxelKey, f64>,
    frames: usize,
    frozen: bool,
}

struct NewComponent {
    gaussian: Gaussian<4>,
    rgb: Vector3<f64>,
    planar: bool,
    local_points: usize,
}

struct VoxelFit {
    key: VoxelKey,
    components: Vec<NewComponent>,
    consumed: usize,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn voxel_seed(seed: u64, frame_id: usize, key: &VoxelKey) -> u64 {
    let mut h = splitmix(seed ^ splitmix(frame_id as u64));
    for c in [key.ix, key.iy, key.iz] {
        h = splitmix(h ^ (c as u32 as u64));
    }
    h
}

fn weighted_rgb(rgbs: &[Vector3<f64>], weights: &[f64]) -> Vector3<f64> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Vector3::zeros();
    }
    rgbs.iter().zip(weights).map(|(c, w)| c * *w).sum::<Vector3<f64>>() / total
}

fn fit_voxel(frame: &FrameCloud, key: VoxelKey, bucket: &[usize], params: &GmmParams) -> VoxelFit {
    let fp = params.fit_params();
    let positions: Vec<Vector3<f64>> = frame.points.iter().map(|p| p.p).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(voxel_seed(params.seed, frame.frame_id, &key));
    let (planes, residual) = extract_planes(&positions, bucket, &params.ransac, &mut rng);
    let mut components = Vec::new();
    let mut consumed = 0;

    for plane in &planes {
        let local: Vec<Vector4<f64>> = plane
            .inliers
            .iter()
            .map(|&i| {
                let uvw = plane.frame.to_local(&positions[i]);
                Vector4::new(uvw.x, uvw.y, 0.0, frame.points[i].g)
            })
            .collect();
        let fit = fit_local_gmm(&local, &fp);
        let rgbs: Vec<Vector3<f64>> = plane.inliers.iter().map(|&i| frame.points[i].rgb).collect();
        let post: Vec<Vec<f64>> = local
            .iter()
            .map(|z| posterior(&fit.reduced, &Vector3::new(z[0], z[1], z[3])))
            .collect();
        for (c, g) in fit.components.iter().enumerate() {
            let w: Vec<f64> = post.iter().map(|p| p[c]).collect();
            components.push(NewComponent {
                gaussian: to_world(g, &plane.frame),
                rgb: weighted_rgb(&rgbs, &w),
                planar: true,
                local_points: plane.inliers.len(),
            });
        }
        consumed += plane.inliers.len();
    }

    if residual.len() >= params.ransac.min_inliers {
        let data: Vec<Vector4<f64>> = residual
            .iter()
            .map(|&i| {
                let p = &frame.points[i];
                Vector4::new(p.p.x, p.p.y, p.p.z, p.g)
            })
            .collect();
        let fit = fit_free_gmm(&data, &fp);
        let rgbs: Vec<Vector3<f64>> = residual.iter().map(|&i| frame.points[i].rgb).collect();
        let post: Vec<Vec<f64>> = data.iter().map(|z| posterior(&fit.components, z)).collect();
        for (c, g) in fit.components.iter().enumerate() {
            let w: Vec<f64> = post.iter().map(|p| p[c]).collect();
            components.push(NewComponent {
                gaussian: *g,
                rgb: weighted_rgb(&rgbs, &w),
                planar: false,
                local_points: residual.len(),
            });
        }
        consumed += residual.len();
    }
    VoxelFit {
        key,
        components,
        consumed,
    }
}

impl GmmMap {
    pub fn new(voxel_size: f64) -> Self {
        assert!(voxel_size > 0.0, "voxel size must be positive");
        Self {
            voxel_size,
            components: Vec::new(),
            means: Vec::new(),
            index: SpatialHash::new(voxel_size),
            voxel_totals: HashMap::new(),
            frames: 0,
            frozen: false,
        }
    }

    /// Rebuilds a map from stored components, keyed by their stored voxel.
    pub fn from_components(voxel_size: f64, components: Vec<GmmComponent>) -> Self {
        let mut map = Self::new(voxel_size);
        for c in components {
            map.push(c);
        }
        map
    }

    fn push(&mut self, c: GmmComponent) {
        let id = self.components.len() as u32;
        self.index.insert(c.key, id);
        self.means.push(c.position());
        self.components.push(c);
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn frames_integrated(&self) -> usize {
        self.frames
    }

    /// Occupied voxel keys, ascending.
    pub fn keys(&self) -> Vec<VoxelKey> {
        self.index.sorted_keys()
    }

    /// Component indices stored under `key`.
    pub fn voxel(&self, key: &VoxelKey) -> &[u32] {
        self.index.cell(key)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Spatial log-likelihood of `p` under the components in its voxel and
    /// the 26 neighbours, weights renormalized over that neighbourhood.
    /// Negative infinity where the neighbourhood is empty.
    pub fn log_likelihood(&self, p: &Vector3<f64>) -> f64 {
        let key = VoxelKey::of(p, self.voxel_size);
        let mut terms = Vec::new();
        let mut weight_sum = 0.0;
        for k in key.neighborhood() {
            for &i in self.index.cell(&k) {
                let c = &self.components[i as usize];
                terms.push(c.weight.ln() + c.log_density(p));
                weight_sum += c.weight;
            }
        }
        if terms.is_empty() {
            return f64::NEG_INFINITY;
        }
        log_sum_exp(&terms) - weight_sum.ln()
    }

    /// Splits `frame` into points in unmodeled voxels and points in modeled
    /// voxels with log-likelihood below `rho`.
    pub fn effective_points(&self, frame: &FrameCloud, rho: f64) -> (Vec<usize>, Vec<usize>) {
        let class: Vec<u8> = frame
            .points
            .par_iter()
            .map(|pt| {
                if !self.index.contains_key(&VoxelKey::of(&pt.p, self.voxel_size)) {
                    1
                } else if self.log_likelihood(&pt.p) < rho {
                    2
                } else {
                    0
                }
            })
            .collect();
        let pick = |c: u8| class.iter().enumerate().filter(|(_, &k)| k == c).map(|(i, _)| i).collect();
        (pick(1), pick(2))
    }

    /// Fits the frame's effective points and appends the new components.
    pub fn integrate_frame(&mut self, frame: &FrameCloud, params: &GmmParams) -> Result<IntegrationReport, GmmError> {
        if self.frozen {
            return Err(GmmError::Frozen);
        }
        let (f_new, f_low) = self.effective_points(frame, params.rho);
        let mut effective: Vec<usize> = f_new.iter().chain(&f_low).copied().collect();
        effective.sort_unstable();
        let sub = FrameCloud {
            frame_id: frame.frame_id,
            points: effective.iter().map(|&i| frame.points[i]).collect(),
            camera: frame.camera.clone(),
            no_visible_points: frame.no_visible_points,
        };
        let buckets: Vec<(VoxelKey, Vec<usize>)> = voxelize(&sub.points, self.voxel_size).into_iter().collect();
        let fits: Vec<VoxelFit> = buckets
            .par_iter()
            .map(|(key, bucket)| fit_voxel(&sub, *key, bucket, params))
            .collect();

        let viewpoint = frame.camera.center();
        let mut report = IntegrationReport {
            frame_id: frame.frame_id,
            input_points: frame.points.len(),
            new_voxel_points: f_new.len(),
            low_likelihood_points: f_low.len(),
            ..Default::default()
        };
        for fit in fits {
            report.consumed += fit.consumed;
            if fit.consumed == 0 {
                continue;
            }
            let total = self.voxel_totals.entry(fit.key).or_insert(0.0);
            *total += fit.consumed as f64;
            let total = *total;
            for nc in fit.components {
                let mut cov = nc.gaussian.cov;
                for a in 0..3 {
                    cov[(a, a)] += params.eps_cov;
                }
                let weight = nc.gaussian.weight * nc.local_points as f64 / total;
                let rgb = nc.rgb.map(|v| v as f32);
                let Some(mut c) =
                    GmmComponent::new(weight, nc.gaussian.mean, cov, rgb, self.voxel_size, nc.planar)
                else {
                    log::warn!("frame {}: dropped a non-positive-definite component", frame.frame_id);
                    continue;
                };
                if !(c.weight > 0.0) {
                    continue;
                }
                c.orient_toward(&viewpoint);
                self.push(c);
                report.new_components += 1;
            }
        }
        report.skipped = report.effective() - report.consumed;
        self.frames += 1;
        Ok(report)
    }

    /// The `k` components with nearest spatial means, optionally within
    /// `max_radius`, sorted by (distance, index).
    pub fn knn(&self, p: &Vector3<f64>, k: usize, max_radius: Option<f64>) -> Vec<Neighbor> {
        self.index.knn(&self.means, p, k, max_radius)
    }

    /// Spatial means of all components, by index.
    pub fn means(&self) -> &[Vector3<f64>] {
        &self.means
    }
}
