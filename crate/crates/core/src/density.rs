//! Geometry-aware densification and pruning: image-gradient growth and
//! opacity pruning scores both modulated by the distance to the GMM surface.

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::surfel::SurfelSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityParams {
    /// Blend between the image gradient and the surface-proximity term.
    pub growth_weight: f64,
    pub scale_weight: f64,
    pub prune_weight: f64,
    /// Distance falloff, meters.
    pub tau: f64,
    pub growth_threshold: f64,
    pub prune_threshold: f64,
    /// Surfels whose larger radius exceeds this are split, others cloned.
    pub split_size: f64,
    pub interval: usize,
    pub start_iter: usize,
    pub stop_iter: usize,
}

impl Default for DensityParams {
    fn default() -> Self {
        Self {
            growth_weight: 0.4,
            scale_weight: 0.0002,
            prune_weight: 0.003,
            tau: 0.01,
            growth_threshold: 0.0002,
            prune_threshold: 0.005,
            split_size: 0.05,
            interval: 100,
            start_iter: 500,
            stop_iter: 15000,
        }
    }
}

/// Divisor applied to both radii of split children.
pub const SPLIT_RADIUS_DIVISOR: f64 = 1.6;

impl DensityParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.growth_weight) {
            return Err(format!("growth weight {} outside [0, 1]", self.growth_weight));
        }
        if !(self.tau > 0.0) {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        if self.interval == 0 {
            return Err("density interval must be at least 1".into());
        }
        Ok(())
    }

    /// Whether density control runs after `iteration` (1-based).
    pub fn is_scheduled(&self, iteration: usize) -> bool {
        iteration >= self.start_iter && iteration <= self.stop_iter && iteration % self.interval == 0
    }

    fn proximity(&self, d: f64) -> f64 {
        (-d * d / (2.0 * self.tau * self.tau)).exp()
    }
}

/// `(1 - w) * grad + w * scale * exp(-d^2 / 2 tau^2)`.
pub fn growth_score(mean_grad: f64, d: f64, params: &DensityParams) -> f64 {
    (1.0 - params.growth_weight) * mean_grad
        + params.growth_weight * params.scale_weight * params.proximity(d)
}

/// `opacity - w * (1 - exp(-d^2 / 2 tau^2))`.
pub fn prune_score(opacity: f64, d: f64, params: &DensityParams) -> f64 {
    opacity - params.prune_weight * (1.0 - params.proximity(d))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensityReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones, splits and prunes in place. `distances[i]` is the surfel's
/// distance to the GMM surface (`f64::INFINITY` when no component is near).
///
/// Pruning takes precedence over growth. Survivors keep their order, then
/// clones, then split children are appended. Returns the report and, for
/// every surfel of the new set, the index of the surfel it came from.
pub fn apply_density_control<R: Rng>(
    set: &mut SurfelSet,
    distances: &[f64],
    params: &DensityParams,
    rng: &mut R,
) -> (DensityReport, Vec<usize>) {
    let n = set.len();
    assert_eq!(distances.len(), n);
    let mut report = DensityReport::default();
    let mut keep = vec![true; n];
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    for i in 0..n {
        let d = distances[i];
        if prune_score(set.opacity(i), d, params) < params.prune_threshold {
            keep[i] = false;
            report.pruned += 1;
            continue;
        }
        let mean_grad = if set.grad_count[i] > 0 {
            set.grad_accum[i] / set.grad_count[i] as f64
        } else {
            0.0
        };
        if growth_score(mean_grad, d, params) > params.growth_threshold {
            let r = set.radii(i);
            if r.x.max(r.y) > params.split_size {
                splits.push(i);
                keep[i] = false;
                report.split += 1;
            } else {
                clones.push(i);
                report.cloned += 1;
            }
        }
    }

    let mut children = Vec::with_capacity(2 * splits.len());
    for &i in &splits {
        let s = set.get(i);
        for _ in 0..2 {
            let z: Vector2<f64> = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            let mut c = s;
            c.p = s.point(&z);
            c.ru /= SPLIT_RADIUS_DIVISOR;
            c.rv /= SPLIT_RADIUS_DIVISOR;
            children.push((i, c));
        }
    }

    let mut lineage: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    let clone_data: Vec<_> = clones.iter().map(|&i| (i, set.get(i))).collect();
    set.retain_mask(&keep);
    for (i, s) in clone_data.iter().chain(&children) {
        set.push(s);
        lineage.push(*i);
    }
    set.reset_grad_stats();
    (report, lineage)
}
