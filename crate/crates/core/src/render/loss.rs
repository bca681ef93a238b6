//! Photometric, sky, depth and normal image losses with pixel adjoints.

use nalgebra::Vector3;

use super::ssim::ssim_with_grad;
use super::{PixelAdjoints, RenderBuffers};
use crate::raster::{GrayImage, Mask, Raster, RgbImage};

/// Weight of the L1 term inside the photometric loss; D-SSIM gets the rest.
pub const L1_WEIGHT: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub gmm: f64,
    pub depth: f64,
    pub normal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gmm: 1.0,
            depth: 0.1,
            normal: 0.1,
        }
    }
}

/// Ground truth for one view.
#[derive(Debug, Clone, Copy)]
pub struct ImageTargets<'a> {
    pub rgb: &'a RgbImage,
    /// `true` marks sky.
    pub sky: &'a Mask,
    pub depth: &'a GrayImage,
    pub depth_mask: &'a Mask,
    pub normal: &'a RgbImage,
    pub normal_mask: &'a Mask,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ImageLosses {
    pub photometric: f64,
    pub sky: f64,
    pub depth: f64,
    pub normal: f64,
    /// Terms whose pixel set was empty, in field order; those terms are 0.
    pub empty: [bool; 4],
}

/// `gmm_loss + L_p + L_sky + w.depth * L_d + w.normal * L_n`.
pub fn total_loss(image: &ImageLosses, gmm_loss: f64, weights: &LossWeights) -> f64 {
    weights.gmm * gmm_loss
        + image.photometric
        + image.sky
        + weights.depth * image.depth
        + weights.normal * image.normal
}

/// Evaluates the image losses and, when `weights` is given, the adjoint of
/// `L_p + L_sky + w.depth * L_d + w.normal * L_n` with respect to every
/// rendered pixel.
pub fn image_losses(
    buffers: &RenderBuffers,
    targets: &ImageTargets<'_>,
    weights: Option<&LossWeights>,
) -> (ImageLosses, Option<PixelAdjoints>) {
    let n = buffers.color.len();
    assert!(
        targets.rgb.same_shape(&buffers.color)
            && targets.sky.same_shape(&buffers.color)
            && targets.depth.same_shape(&buffers.color)
            && targets.depth_mask.same_shape(&buffers.color)
            && targets.normal.same_shape(&buffers.color)
            && targets.normal_mask.same_shape(&buffers.color),
        "image_losses: raster size mismatch"
    );
    let mut out = ImageLosses::default();
    let mut adj = weights.map(|_| PixelAdjoints::zeros(n));

    let ground: Mask = Raster::from_vec(
        targets.sky.width,
        targets.sky.height,
        targets.sky.data.iter().map(|s| !s).collect(),
    );
    let gt: RgbImage = Raster::from_vec(
        targets.rgb.width,
        targets.rgb.height,
        targets
            .rgb
            .data
            .iter()
            .zip(&targets.sky.data)
            .map(|(c, &s)| if s { Vector3::zeros() } else { *c })
            .collect(),
    );

    let n_ground = ground.data.iter().filter(|&&g| g).count();
    if n_ground == 0 {
        out.empty[0] = true;
    } else {
        let inv = 1.0 / (3 * n_ground) as f64;
        let mut l1 = 0.0;
        for i in (0..n).filter(|&i| ground.data[i]) {
            let diff = buffers.color.data[i] - gt.data[i];
            l1 += diff.abs().sum();
            if let Some(a) = adj.as_mut() {
                a.color[i] += diff.map(f64::signum) * (L1_WEIGHT * inv);
            }
        }
        let (s, g) = ssim_with_grad(&buffers.color, &gt, Some(&ground));
        out.photometric = L1_WEIGHT * l1 * inv + (1.0 - L1_WEIGHT) * (1.0 - s) / 2.0;
        if let Some(a) = adj.as_mut() {
            for (ac, gs) in a.color.iter_mut().zip(&g) {
                *ac -= gs * ((1.0 - L1_WEIGHT) / 2.0);
            }
        }
    }

    let n_sky = n - n_ground;
    if n_sky == 0 {
        out.empty[1] = true;
    } else {
        let inv = 1.0 / n_sky as f64;
        for i in (0..n).filter(|&i| targets.sky.data[i]) {
            out.sky += buffers.silhouette.data[i] * inv;
            if let Some(a) = adj.as_mut() {
                a.silhouette[i] += inv;
            }
        }
    }

    let n_depth = targets.depth_mask.data.iter().filter(|&&m| m).count();
    if n_depth == 0 {
        out.empty[2] = true;
    } else {
        let inv = 1.0 / n_depth as f64;
        let lambda = weights.map_or(0.0, |w| w.depth);
        for i in (0..n).filter(|&i| targets.depth_mask.data[i]) {
            let diff = buffers.depth.data[i] - targets.depth.data[i];
            out.depth += diff.abs() * inv;
            if let Some(a) = adj.as_mut() {
                a.depth[i] += diff.signum() * inv * lambda;
            }
        }
    }

    let n_normal = targets.normal_mask.data.iter().filter(|&&m| m).count();
    if n_normal == 0 {
        out.empty[3] = true;
    } else {
        let inv = 1.0 / n_normal as f64;
        let lambda = weights.map_or(0.0, |w| w.normal);
        for i in (0..n).filter(|&i| targets.normal_mask.data[i]) {
            let gt_n = targets.normal.data[i];
            out.normal += (1.0 - buffers.normal.data[i].dot(&gt_n)) * inv;
            if let Some(a) = adj.as_mut() {
                a.normal[i] -= gt_n * (inv * lambda);
            }
        }
    }
    (out, adj)
}
