//! One function per subcommand. Each stage reads and writes only files
//! under the dataset and output directories.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gmm_surfels::config::{ConfigError, InitMode, PipelineConfig};
use gmm_surfels::gmm::{self, GmmError, GmmMap};
use gmm_surfels::mesh::{
    build_occupancy, eval_mesh_metrics, export_oriented_ply, filter_samples, load_oriented_ply,
    sample_oriented_points, MeshError, MeshMetrics,
};
use gmm_surfels::pipeline::{build_map, make_views};
use gmm_surfels::pointcloud::images::{normal_to_rgb, save_depth, save_rgb_png, ImageError};
use gmm_surfels::pointcloud::{colorize_frames, load_ply, save_ply, ColorizeError, ColorizedPoint, FrameCloud, PlyEncoding, PlyError};
use gmm_surfels::render::render;
use gmm_surfels::scene::{generate, load_cloud, load_views, write_dataset, DatasetError, DatasetPaths, Views};
use gmm_surfels::surfel::{init_from_gmm, init_from_points, load_checkpoint, save_checkpoint, CheckpointError, SurfelSet};
use gmm_surfels::trainer::{image_metrics, split_indices, train, write_log_csv, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("missing input file: {}", .0.display())]
    MissingInput(PathBuf),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Colorize(#[from] ColorizeError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, StageError>;

/// Fixed file names under the output directory.
pub struct OutPaths {
    pub root: PathBuf,
}

impl OutPaths {
    pub fn colorized(&self, view: &str) -> PathBuf {
        self.root.join("colorized").join(stem(view) + ".ply")
    }
    pub fn map(&self) -> PathBuf {
        self.root.join("map.gmm")
    }
    pub fn init(&self) -> PathBuf {
        self.root.join("init.ply")
    }
    pub fn surfels(&self) -> PathBuf {
        self.root.join("surfels.ply")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn render_dir(&self) -> PathBuf {
        self.root.join("render")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples.ply")
    }
    pub fn filter_report(&self) -> PathBuf {
        self.root.join("filter_report.csv")
    }
    pub fn mesh_metrics(&self) -> PathBuf {
        self.root.join("mesh_metrics.csv")
    }
    pub fn nvs_metrics(&self) -> PathBuf {
        self.root.join("nvs_metrics.csv")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }
}

fn stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map_or_else(|| name.to_string(), |s| s.to_string_lossy().into_owned())
}

fn need(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(StageError::MissingInput(path.to_path_buf()))
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| StageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| StageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn dataset(c: &PipelineConfig) -> DatasetPaths {
    DatasetPaths::new(&c.data_dir)
}

fn out(c: &PipelineConfig) -> OutPaths {
    OutPaths { root: c.out_dir.clone() }
}

fn views(c: &PipelineConfig) -> Result<Views> {
    let d = dataset(c);
    need(&d.intrinsics())?;
    need(&d.cameras())?;
    Ok(load_views(&d)?)
}

fn load_map(c: &PipelineConfig) -> Result<GmmMap> {
    Ok(gmm::load(need(&out(c).map())?)?)
}

fn load_surfels(path: &Path) -> Result<SurfelSet> {
    Ok(load_checkpoint(need(path)?)?.surfels)
}

fn load_frames(c: &PipelineConfig, v: &Views) -> Result<Vec<FrameCloud>> {
    let o = out(c);
    v.names
        .iter()
        .zip(&v.cameras)
        .enumerate()
        .map(|(frame_id, (name, camera))| {
            let points = load_ply(need(&o.colorized(name))?)?;
            Ok(FrameCloud {
                frame_id,
                no_visible_points: points.is_empty(),
                points,
                camera: camera.clone(),
            })
        })
        .collect()
}

pub fn gen_scene(c: &PipelineConfig) -> Result<()> {
    let spec = c.scene_spec();
    spec.validate().map_err(StageError::Invalid)?;
    let scene = generate(&spec);
    write_dataset(&scene, &dataset(c))?;
    log::info!(
        "scene: {} points, {} views, {} reference samples -> {}",
        scene.cloud.len(),
        scene.cameras.len(),
        scene.reference.len(),
        c.data_dir.display()
    );
    Ok(())
}

pub fn colorize(c: &PipelineConfig) -> Result<()> {
    let v = views(c)?;
    let cloud = load_cloud(need(&dataset(c).cloud())?)?;
    let frames = colorize_frames(&cloud, &v.cameras, &v.images, &c.colorize)?;
    let o = out(c);
    mkdir(&o.root.join("colorized"))?;
    for (f, name) in frames.iter().zip(&v.names) {
        save_ply(&f.points, &o.colorized(name), PlyEncoding::BinaryLittleEndian)?;
        log::info!("{name}: {} visible points", f.points.len());
    }
    Ok(())
}

pub fn gmm_build(c: &PipelineConfig) -> Result<()> {
    let v = views(c)?;
    let frames = load_frames(c, &v)?;
    let (map, _) = build_map(&frames, &c.gmm_params())?;
    mkdir(&c.out_dir)?;
    gmm::save(&map, &out(c).map())?;
    log::info!("map: {} components", map.len());
    Ok(())
}

pub fn init_surfels(c: &PipelineConfig) -> Result<()> {
    let map = load_map(c)?;
    let deg = c.train.sh_degree;
    let set = match c.init_mode {
        InitMode::Gmm => init_from_gmm(&map, deg),
        InitMode::Random => {
            let v = views(c)?;
            let mut seen = BTreeSet::new();
            let points: Vec<ColorizedPoint> = load_frames(c, &v)?
                .into_iter()
                .flat_map(|f| f.points)
                .filter(|p| seen.insert([p.p.x.to_bits(), p.p.y.to_bits(), p.p.z.to_bits()]))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
            init_from_points(&points, c.init_count.unwrap_or(map.len()), deg, &mut rng)
        }
    };
    save_checkpoint(&set, 0, &out(c).init())?;
    log::info!("initialized {} surfels ({})", set.len(), c.init_mode);
    Ok(())
}

pub fn train_stage(c: &PipelineConfig) -> Result<()> {
    let o = out(c);
    let init = load_surfels(&o.init())?;
    let map = load_map(c)?;
    let v = views(c)?;
    let frames = load_frames(c, &v)?;
    let train_views = make_views(&frames, &v.images, &v.sky, c.normal_neighbors);
    let config = c.train_config();
    let ckpt = (config.checkpoint_every > 0).then(|| o.checkpoints());
    if let Some(dir) = &ckpt {
        mkdir(dir)?;
    }
    let outcome = train(init, &map, &train_views, &config, ckpt.as_deref())?;
    save_checkpoint(&outcome.surfels, config.iterations, &o.surfels())?;
    write_log_csv(&outcome.log, &o.train_log()).map_err(|source| StageError::Io {
        path: o.train_log(),
        source,
    })?;
    log::info!("trained {} iterations, {} surfels", config.iterations, outcome.surfels.len());
    Ok(())
}

pub fn render_stage(c: &PipelineConfig) -> Result<()> {
    let o = out(c);
    let set = load_surfels(&o.surfels())?;
    let v = views(c)?;
    let surfels = set.to_surfels();
    let dir = o.render_dir();
    mkdir(&dir)?;
    for (name, cam) in v.names.iter().zip(&v.cameras) {
        let b = render(&surfels, cam, set.sh_degree);
        let s = stem(name);
        save_rgb_png(&b.color, &dir.join(format!("{s}.png")))?;
        save_rgb_png(&normal_to_rgb(&b.normal), &dir.join(format!("{s}_normal.png")))?;
        save_depth(&b.depth, &dir.join(format!("{s}_depth.bin")))?;
    }
    log::info!("rendered {} views -> {}", v.names.len(), dir.display());
    Ok(())
}

pub fn filter_stage(c: &PipelineConfig) -> Result<()> {
    let o = out(c);
    let set = load_surfels(&o.surfels())?;
    let map = load_map(c)?;
    let v = views(c)?;
    let cloud = load_cloud(need(&dataset(c).cloud())?)?;
    let (train_idx, _) = split_indices(v.cameras.len(), c.train.test_stride);
    let cams: Vec<_> = train_idx.iter().map(|&i| v.cameras[i].clone()).collect();
    let samples = sample_oriented_points(&set.to_surfels(), &cams, set.sh_degree);
    let f = &c.filter;
    let occ = build_occupancy(&cloud, f.occupancy_voxel, f.occupancy_min_points);
    let (kept, r) = filter_samples(&samples, &occ, &map, &c.train.supervision, f.fine_threshold);
    export_oriented_ply(&kept, &o.samples())?;
    write_text(
        &o.filter_report(),
        &format!(
            "input,coarse_removed,fine_removed,kept\n{},{},{},{}\n",
            r.input, r.coarse_removed, r.fine_removed, r.kept
        ),
    )?;
    log::info!(
        "filter: {} samples, {} coarse removed, {} fine removed, {} kept",
        r.input,
        r.coarse_removed,
        r.fine_removed,
        r.kept
    );
    Ok(())
}

pub fn eval_mesh(c: &PipelineConfig) -> Result<MeshMetrics> {
    let o = out(c);
    let samples = load_oriented_ply(need(&o.samples())?)?;
    let reference = load_cloud(need(&dataset(c).reference())?)?;
    let pts: Vec<_> = samples.iter().map(|s| s.p).collect();
    let m = eval_mesh_metrics(&pts, &reference, c.metric_threshold)?;
    write_text(&o.mesh_metrics(), &format!("{}\n{}\n", MeshMetrics::CSV_HEADER, m.csv_row()))?;
    log::info!(
        "accuracy {:.2} cm, completeness {:.2} cm, chamfer {:.2} cm, F1 {:.2}%",
        m.accuracy * 100.0,
        m.completeness * 100.0,
        m.chamfer_l1 * 100.0,
        m.f1 * 100.0
    );
    Ok(m)
}

pub fn eval_nvs(c: &PipelineConfig) -> Result<()> {
    let o = out(c);
    let set = load_surfels(&o.surfels())?;
    let v = views(c)?;
    let surfels = set.to_surfels();
    let (train_idx, test_idx) = split_indices(v.cameras.len(), c.train.test_stride);
    let mut csv = String::from("split,views,psnr,ssim\n");
    let mut any = false;
    for (split, idx) in [("train", &train_idx), ("test", &test_idx)] {
        if idx.is_empty() {
            log::warn!("{split} split is empty");
            continue;
        }
        any = true;
        let (mut psnr, mut ssim) = (0.0, 0.0);
        for &i in idx.iter() {
            let b = render(&surfels, &v.cameras[i], set.sh_degree);
            let m = image_metrics(&b.color, &v.images[i], &v.sky[i]);
            psnr += m.psnr;
            ssim += m.ssim;
        }
        let k = idx.len() as f64;
        let _ = writeln!(csv, "{split},{},{:.4},{:.6}", idx.len(), psnr / k, ssim / k);
        log::info!("{split}: PSNR {:.2} dB, SSIM {:.4} over {} views", psnr / k, ssim / k, idx.len());
    }
    if !any {
        return Err(StageError::Invalid("no views to evaluate".into()));
    }
    write_text(&o.nvs_metrics(), &csv)
}

/// All stages in order. The scene is generated only when the dataset
/// directory has no camera file yet.
pub fn pipeline(c: &PipelineConfig) -> Result<()> {
    if !dataset(c).cameras().exists() {
        gen_scene(c)?;
    }
    mkdir(&c.out_dir)?;
    write_text(&out(c).config(), &c.to_text())?;
    colorize(c)?;
    gmm_build(c)?;
    init_surfels(c)?;
    train_stage(c)?;
    render_stage(c)?;
    filter_stage(c)?;
    eval_mesh(c)?;
    eval_nvs(c)
}
