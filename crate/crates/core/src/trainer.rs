//! Optimization loop: one training view per step, image and GMM losses,
//! Adam updates in the surfel parameterization, and scheduled density
//! control. Also novel-view evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Quaternion, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::density::{apply_density_control, DensityParams, DensityReport};
use crate::gmm::GmmMap;
use crate::pointcloud::{CameraModel, LidarSupervision};
use crate::raster::{Mask, Raster, RgbImage};
use crate::render::ssim::ssim;
use crate::render::{image_losses, render, render_backward, total_loss, ImageLosses, ImageTargets, LossWeights};
use crate::supervision::{gmm_loss_gradients, query_all, weighted_distance, GmmLossBreakdown, NeighborEntry, SupervisionParams};
use crate::surfel::{save_checkpoint, CheckpointError, Surfel, SurfelGrad, SurfelSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub opacity: f64,
    pub radii: f64,
    pub rotation: f64,
    pub sh: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            opacity: 5e-2,
            radii: 5e-3,
            rotation: 1e-3,
            sh: 2.5e-3,
        }
    }
}

impl LearningRates {
    /// Log-linear position decay from `position_init` to `position_final`.
    pub fn position_at(&self, iteration: usize, total: usize) -> f64 {
        let t = (iteration as f64 / total.max(1) as f64).clamp(0.0, 1.0);
        (self.position_init.ln() * (1.0 - t) + self.position_final.ln() * t).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub loss: LossWeights,
    pub supervision: SupervisionParams,
    pub density: DensityParams,
    pub density_enabled: bool,
    pub sh_degree: usize,
    /// Neighbour queries are recomputed every this many iterations.
    pub refresh_every: usize,
    pub seed: u64,
    /// Every `test_stride`-th view is held out; 0 keeps all views for training.
    pub test_stride: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            lr: LearningRates::default(),
            loss: LossWeights::default(),
            supervision: SupervisionParams::default(),
            density: DensityParams::default(),
            density_enabled: true,
            sh_degree: 1,
            refresh_every: 100,
            seed: 0,
            test_stride: 8,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        let lr = &self.lr;
        let rates = [lr.position_init, lr.position_final, lr.opacity, lr.radii, lr.rotation, lr.sh];
        if rates.iter().any(|r| !(*r > 0.0)) {
            return Err("learning rates must be positive".into());
        }
        let w = &self.loss;
        if [w.gmm, w.depth, w.normal].iter().any(|x| !(*x >= 0.0)) {
            return Err("loss weights must be non-negative".into());
        }
        if self.sh_degree > 1 {
            return Err(format!("sh degree {} unsupported (max 1)", self.sh_degree));
        }
        if self.refresh_every == 0 {
            return Err("refresh interval must be at least 1".into());
        }
        self.density.validate()
    }
}

/// One view with everything the losses need.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: CameraModel,
    pub image: RgbImage,
    /// `true` marks sky.
    pub sky: Mask,
    pub lidar: LidarSupervision,
}

impl TrainView {
    fn targets(&self) -> ImageTargets<'_> {
        ImageTargets {
            rgb: &self.image,
            sky: &self.sky,
            depth: &self.lidar.depth,
            depth_mask: &self.lidar.depth_mask,
            normal: &self.lidar.normal,
            normal_mask: &self.lidar.normal_mask,
        }
    }
}

/// `(train, test)` view indices; test views are those with `i % stride == 0`.
pub fn split_indices(n: usize, stride: usize) -> (Vec<usize>, Vec<usize>) {
    if stride == 0 {
        return ((0..n).collect(), Vec::new());
    }
    (0..n).partition(|i| i % stride != 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub image: ImageLosses,
    pub gmm: GmmLossBreakdown,
    pub total: f64,
    pub count: usize,
    pub millis: f64,
    pub density: Option<DensityReport>,
}

impl TrainLogRecord {
    pub const CSV_HEADER: &'static str =
        "iteration,l_p,l_sky,l_d,l_n,l_dis,l_control,l_normal,total,count,ms_per_iter,cloned,split,pruned";

    pub fn csv_row(&self) -> String {
        let d = self.density.unwrap_or_default();
        format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{:.3},{},{},{}",
            self.iteration,
            self.image.photometric,
            self.image.sky,
            self.image.depth,
            self.image.normal,
            self.gmm.dis,
            self.gmm.control,
            self.gmm.normal,
            self.total,
            self.count,
            self.millis,
            d.cloned,
            d.split,
            d.pruned
        )
    }
}

pub fn write_log_csv(records: &[TrainLogRecord], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", TrainLogRecord::CSV_HEADER)?;
    for r in records {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training views")]
    NoTrainingViews,
    #[error("non-finite loss or gradient at iteration {iteration}")]
    NonFinite {
        iteration: usize,
        /// State after the last iteration with a finite loss.
        last_good: Box<SurfelSet>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub surfels: SurfelSet,
    pub log: Vec<TrainLogRecord>,
}

/// Optimizer parameters per surfel: position (3), quaternion (4), log radii
/// (2), opacity logit (1), SH (12).
const NPARAM: usize = 22;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

struct Adam {
    m: Vec<[f64; NPARAM]>,
    v: Vec<[f64; NPARAM]>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![[0.0; NPARAM]; n],
            v: vec![[0.0; NPARAM]; n],
            step: 0,
        }
    }

    /// Survivors keep their moments; new surfels start from zero.
    fn remap(&mut self, lineage: &[usize], survivors: usize) {
        let pick = |src: &Vec<[f64; NPARAM]>| -> Vec<[f64; NPARAM]> {
            lineage
                .iter()
                .enumerate()
                .map(|(j, &i)| if j < survivors { src[i] } else { [0.0; NPARAM] })
                .collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }

    fn update(&mut self, set: &mut SurfelSet, grads: &[[f64; NPARAM]], lr: &[f64; NPARAM]) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let mut x = pack(set, i);
            for k in 0..NPARAM {
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = BETA1 * *m + (1.0 - BETA1) * g[k];
                *v = BETA2 * *v + (1.0 - BETA2) * g[k] * g[k];
                x[k] -= lr[k] * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
            unpack(set, i, &x);
        }
    }
}

fn pack(set: &SurfelSet, i: usize) -> [f64; NPARAM] {
    let mut x = [0.0; NPARAM];
    x[0..3].copy_from_slice(set.positions[i].as_slice());
    let q = &set.rotations[i];
    x[3..7].copy_from_slice(&[q.w, q.i, q.j, q.k]);
    x[7..9].copy_from_slice(set.log_radii[i].as_slice());
    x[9] = set.opacity_logits[i];
    for b in 0..4 {
        x[10 + 3 * b..13 + 3 * b].copy_from_slice(set.sh[i][b].as_slice());
    }
    x
}

fn unpack(set: &mut SurfelSet, i: usize, x: &[f64; NPARAM]) {
    set.positions[i] = Vector3::new(x[0], x[1], x[2]);
    set.rotations[i] = Quaternion::new(x[3], x[4], x[5], x[6]);
    set.log_radii[i] = nalgebra::Vector2::new(x[7], x[8]);
    set.opacity_logits[i] = x[9];
    for b in 0..4 {
        set.sh[i][b] = Vector3::new(x[10 + 3 * b], x[11 + 3 * b], x[12 + 3 * b]);
    }
}

fn learning_rates(lr: &LearningRates, iteration: usize, total: usize, sh_degree: usize) -> [f64; NPARAM] {
    let mut out = [0.0; NPARAM];
    out[0..3].fill(lr.position_at(iteration, total));
    out[3..7].fill(lr.rotation);
    out[7..9].fill(lr.radii);
    out[9] = lr.opacity;
    out[10..13].fill(lr.sh);
    if sh_degree >= 1 {
        out[13..22].fill(lr.sh);
    }
    out
}

/// Chains a world-frame surfel gradient into the optimizer parameters.
pub fn parameter_gradient(set: &SurfelSet, i: usize, g: &SurfelGrad) -> [f64; NPARAM] {
    let s: Surfel = set.get(i);
    let mut out = [0.0; NPARAM];
    out[0..3].copy_from_slice(g.p.as_slice());
    // Rotating the frame by a small angle `w` changes the loss by `w . torque`.
    let torque = s.tu.cross(&g.tu) + s.tv.cross(&g.tv);
    let q = set.rotations[i] / set.rotations[i].norm();
    let dq = Quaternion::from_imag(torque) * q * 2.0;
    out[3..7].copy_from_slice(&[dq.w, dq.i, dq.j, dq.k]);
    out[7] = g.ru * s.ru;
    out[8] = g.rv * s.rv;
    out[9] = g.opacity * s.opacity * (1.0 - s.opacity);
    for b in 0..4 {
        out[10 + 3 * b..13 + 3 * b].copy_from_slice(g.sh[b].as_slice());
    }
    out
}

/// Distance of every surfel to the GMM surface; infinite without neighbours.
pub fn surface_distances(surfels: &[Surfel], queries: &[NeighborEntry]) -> Vec<f64> {
    surfels
        .iter()
        .zip(queries)
        .map(|(s, q)| if q.is_empty() { f64::INFINITY } else { weighted_distance(q, &s.p) })
        .collect()
}

/// Loss and gradient of one view, shared by training and gradient tests.
pub struct StepResult {
    pub image: ImageLosses,
    pub gmm: GmmLossBreakdown,
    pub total: f64,
    pub grads: Vec<SurfelGrad>,
    pub screen: Vec<f64>,
    pub contributed: Vec<bool>,
}

pub fn loss_and_gradients(
    surfels: &[Surfel],
    queries: &[NeighborEntry],
    view: &TrainView,
    config: &TrainConfig,
) -> StepResult {
    let buffers = render(surfels, &view.camera, config.sh_degree);
    let (image, adj) = image_losses(&buffers, &view.targets(), Some(&config.loss));
    let rg = render_backward(surfels, &view.camera, config.sh_degree, &buffers, &adj.expect("adjoints requested"));
    let mut grads = rg.surfels;
    let mut gmm = GmmLossBreakdown::default();
    if config.loss.gmm > 0.0 {
        let (b, g) = gmm_loss_gradients(surfels, queries, &buffers.visible(), &config.supervision);
        for (a, mut x) in grads.iter_mut().zip(g) {
            x.scale(config.loss.gmm);
            *a += &x;
        }
        gmm = b;
    }
    StepResult {
        total: total_loss(&image, gmm.total(), &config.loss),
        image,
        gmm,
        grads,
        screen: rg.screen,
        contributed: buffers.pixel_counts.iter().map(|&c| c > 0).collect(),
    }
}

/// Runs `config.iterations` steps. Checkpoints go to `checkpoint_dir` when
/// given; a non-finite loss also writes `last_good.ply` there.
pub fn train(
    initial: SurfelSet,
    map: &GmmMap,
    views: &[TrainView],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate().map_err(TrainError::Config)?;
    let (train_idx, _) = split_indices(views.len(), config.test_stride);
    if config.iterations > 0 && train_idx.is_empty() {
        return Err(TrainError::NoTrainingViews);
    }
    let mut set = initial;
    set.sh_degree = config.sh_degree;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(set.len());
    let mut log = Vec::with_capacity(config.iterations);
    let mut order: Vec<usize> = Vec::new();
    let mut queries = query_all(map, &set.to_surfels(), &config.supervision);

    for iteration in 1..=config.iterations {
        let started = Instant::now();
        if order.is_empty() {
            order = train_idx.clone();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let view = &views[order.pop().expect("non-empty order")];
        if iteration > 1 && (iteration - 1) % config.refresh_every == 0 {
            queries = query_all(map, &set.to_surfels(), &config.supervision);
        }
        let surfels = set.to_surfels();
        let step = loss_and_gradients(&surfels, &queries, view, config);
        let param_grads: Vec<[f64; NPARAM]> = step
            .grads
            .iter()
            .enumerate()
            .map(|(i, g)| parameter_gradient(&set, i, g))
            .collect();
        if !step.total.is_finite() || param_grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            if let Some(dir) = checkpoint_dir {
                save_checkpoint(&set, iteration - 1, &dir.join("last_good.ply"))?;
            }
            return Err(TrainError::NonFinite {
                iteration,
                last_good: Box::new(set),
            });
        }
        for (i, &c) in step.contributed.iter().enumerate() {
            if c {
                set.grad_accum[i] += step.screen[i];
                set.grad_count[i] += 1;
            }
        }
        let lr = learning_rates(&config.lr, iteration, config.iterations, config.sh_degree);
        adam.update(&mut set, &param_grads, &lr);
        set.normalize();

        let mut density = None;
        if config.density_enabled && config.density.is_scheduled(iteration) {
            let now = set.to_surfels();
            queries = query_all(map, &now, &config.supervision);
            let d = surface_distances(&now, &queries);
            let (report, lineage) = apply_density_control(&mut set, &d, &config.density, &mut rng);
            let survivors = lineage.len() - report.cloned - 2 * report.split;
            adam.remap(&lineage, survivors);
            queries = query_all(map, &set.to_surfels(), &config.supervision);
            density = Some(report);
        }

        log.push(TrainLogRecord {
            iteration,
            image: step.image,
            gmm: step.gmm,
            total: step.total,
            count: set.len(),
            millis: started.elapsed().as_secs_f64() * 1e3,
            density,
        });
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && iteration % config.checkpoint_every == 0 {
                save_checkpoint(&set, iteration, &checkpoint_path(dir, iteration))?;
            }
        }
        if iteration % 100 == 0 {
            log::info!("iteration {iteration}: loss {:.5}, {} surfels", step.total, set.len());
        }
    }
    Ok(TrainOutcome { surfels: set, log })
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("surfels_{iteration:06}.ply"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error)]
#[error("no views to evaluate")]
pub struct EmptySplit;

/// PSNR and SSIM of one rendered image against ground truth, over non-sky
/// pixels with ground-truth sky zeroed.
pub fn image_metrics(rendered: &RgbImage, gt: &RgbImage, sky: &Mask) -> ViewMetrics {
    let ground: Mask = Raster::from_vec(sky.width, sky.height, sky.data.iter().map(|s| !s).collect());
    let gt0: RgbImage = Raster::from_vec(
        gt.width,
        gt.height,
        gt.data.iter().zip(&sky.data).map(|(c, &s)| if s { Vector3::zeros() } else { *c }).collect(),
    );
    let n = ground.data.iter().filter(|&&g| g).count();
    let mse = if n == 0 {
        0.0
    } else {
        rendered
            .data
            .iter()
            .zip(&gt0.data)
            .zip(&ground.data)
            .filter(|(_, &g)| g)
            .map(|((a, b), _)| (a - b).norm_squared())
            .sum::<f64>()
            / (3 * n) as f64
    };
    let psnr = if mse > 0.0 { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) } else { PSNR_CAP };
    ViewMetrics {
        psnr,
        ssim: ssim(rendered, &gt0, Some(&ground)),
    }
}

/// Mean PSNR and SSIM over the selected views.
pub fn evaluate_views(
    surfels: &[Surfel],
    sh_degree: usize,
    views: &[TrainView],
    indices: &[usize],
) -> Result<ViewMetrics, EmptySplit> {
    if indices.is_empty() {
        return Err(EmptySplit);
    }
    let mut acc = ViewMetrics { psnr: 0.0, ssim: 0.0 };
    for &i in indices {
        let v = &views[i];
        let b = render(surfels, &v.camera, sh_degree);
        let m = image_metrics(&b.color, &v.image, &v.sky);
        acc.psnr += m.psnr;
        acc.ssim += m.ssim;
    }
    let k = indices.len() as f64;
    Ok(ViewMetrics {
        psnr: acc.psnr / k,
        ssim: acc.ssim / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_of_eighty_views() {
        let (train, test) = split_indices(80, 8);
        assert_eq!((train.len(), test.len()), (70, 10));
        assert!(test.iter().all(|i| i % 8 == 0));
    }

    #[test]
    fn psnr_endpoints() {
        let sky = Raster::filled(4, 4, false);
        let gray = RgbImage::from_vec(4, 4, vec![Vector3::repeat(0.5); 16]);
        let black = RgbImage::black(4, 4);
        let m = image_metrics(&black, &gray, &sky);
        assert!((m.psnr - 10.0 * 4f64.log10()).abs() < 1e-12);
        let same = image_metrics(&gray, &gray, &sky);
        assert_eq!(same.psnr, PSNR_CAP);
        assert!((same.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn position_rate_decays_log_linearly() {
        let lr = LearningRates::default();
        assert!((lr.position_at(0, 100) - 1.6e-4).abs() < 1e-18);
        assert!((lr.position_at(100, 100) - 1.6e-6).abs() < 1e-18);
        assert!((lr.position_at(50, 100) - 1.6e-5).abs() < 1e-17);
    }

    #[test]
    fn rotation_gradient_matches_finite_differences() {
        let s = Surfel {
            p: Vector3::zeros(),
            tu: Vector3::new(1.0, 0.2, 0.0).normalize(),
            tv: Vector3::new(-0.2, 1.0, 0.3),
            ru: 0.3,
            rv: 0.2,
            opacity: 0.7,
            sh: [Vector3::zeros(); 4],
        };
        let set = SurfelSet::from_surfels(&[s], 0);
        let a = Vector3::new(0.3, -0.7, 0.2);
        let b = Vector3::new(-0.1, 0.4, 0.9);
        // f = a . tu + b . tv
        let g = SurfelGrad { tu: a, tv: b, ..Default::default() };
        let pg = parameter_gradient(&set, 0, &g);
        let f = |q: Quaternion<f64>| {
            let mut t = set.clone();
            t.rotations[0] = q;
            let s = t.get(0);
            a.dot(&s.tu) + b.dot(&s.tv)
        };
        let q0 = set.rotations[0];
        let h = 1e-6;
        for k in 0..4 {
            let mut e = [0.0; 4];
            e[k] = h;
            let d = Quaternion::new(e[0], e[1], e[2], e[3]);
            let fd = (f(q0 + d) - f(q0 - d)) / (2.0 * h);
            assert!((fd - pg[3 + k]).abs() < 1e-6, "{k}: {fd} vs {}", pg[3 + k]);
        }
    }
}
