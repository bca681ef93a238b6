//! End-to-end run on the synthetic room: prints timing and quality.
//!
//! `cargo run --release -p gmm-surfels --example room -- [iterations] [image_size]`

use std::time::Instant;

use gmm_surfels::gmm::GmmParams;
use gmm_surfels::mesh::{build_occupancy, eval_mesh_metrics, filter_samples, sample_oriented_points, FilterParams, METRIC_THRESHOLD};
use gmm_surfels::pipeline::{build_map, colorize, make_views};
use gmm_surfels::pointcloud::colorize::NORMAL_NEIGHBORS;
use gmm_surfels::pointcloud::ColorizeParams;
use gmm_surfels::scene::{generate, SceneSpec};
use gmm_surfels::surfel::init_from_gmm;
use gmm_surfels::trainer::{evaluate_views, split_indices, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iterations: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let size: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(192);
    let t0 = Instant::now();
    let scene = generate(&SceneSpec::room(size));
    let frames = colorize(&scene.cloud, &scene.cameras, &scene.images, &ColorizeParams::default()).unwrap();
    let (map, _) = build_map(&frames, &GmmParams::default()).unwrap();
    let views = make_views(&frames, &scene.images, &scene.sky, NORMAL_NEIGHBORS);
    let init = init_from_gmm(&map, 1);
    println!("prep {:.1}s, {} components", t0.elapsed().as_secs_f64(), map.len());

    let config = TrainConfig {
        iterations,
        density: gmm_surfels::density::DensityParams {
            stop_iter: iterations / 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let (train_idx, test_idx) = split_indices(views.len(), config.test_stride);
    let before = evaluate_views(&init.to_surfels(), 1, &views, &train_idx).unwrap();
    let t1 = Instant::now();
    let out = train(init, &map, &views, &config, None).unwrap();
    let secs = t1.elapsed().as_secs_f64();
    let surfels = out.surfels.to_surfels();
    let tr = evaluate_views(&surfels, 1, &views, &train_idx).unwrap();
    let te = evaluate_views(&surfels, 1, &views, &test_idx).unwrap();
    println!(
        "train {secs:.1}s ({:.1} ms/it), {} surfels; PSNR train {:.2} -> {:.2}, test {:.2}",
        secs * 1e3 / iterations.max(1) as f64,
        surfels.len(),
        before.psnr,
        tr.psnr,
        te.psnr
    );
    let cams: Vec<_> = train_idx.iter().map(|&i| views[i].camera.clone()).collect();
    let samples = sample_oriented_points(&surfels, &cams, 1);
    let fp = FilterParams::default();
    let occ = build_occupancy(&scene.cloud, fp.occupancy_voxel, fp.occupancy_min_points);
    let (kept, report) = filter_samples(&samples, &occ, &map, &config.supervision, fp.fine_threshold);
    let pts: Vec<_> = kept.iter().map(|s| s.p).collect();
    let m = eval_mesh_metrics(&pts, &scene.reference, METRIC_THRESHOLD).unwrap();
    println!("filter {report:?}");
    println!(
        "acc {:.2} cm, comp {:.2} cm, chamfer {:.2} cm, F1 {:.2}%",
        m.accuracy * 100.0,
        m.completeness * 100.0,
        m.chamfer_l1 * 100.0,
        m.f1 * 100.0
    );
}
