use std::path::Path;
use std::process::{Command, Output};

use gmm_surfels::geometry::SortedEigen3;

const SMALL: &[&str] = &[
    "--set",
    "scene.image_size=40",
    "--set",
    "scene.lidar_density=150",
    "--set",
    "train.iterations=30",
    "--set",
    "density.start_iter=10",
    "--set",
    "density.interval=10",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gmm-surfels"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let data = dir.join("data");
    let out = dir.join("out");
    bin()
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .args(SMALL)
        .args(args)
        .output()
        .expect("spawn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_key_in_file_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "lambda_gmm = 1.0\nlamda_GMM = 0.5\n").unwrap();
    let o = bin().arg("--config").arg(&cfg).arg("show-config").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda_GMM"));
}

#[test]
fn unknown_override_exits_2() {
    let o = bin().args(["--set", "train.iters=5", "show-config"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.iters"));
}

#[test]
fn missing_input_exits_3_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gmm-build"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("intrinsics.txt"), "{}", stderr(&o));

    let cfg = dir.path().join("absent.txt");
    let o = bin().arg("--config").arg(&cfg).arg("show-config").output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("absent.txt"));
}

#[test]
fn seed_override_and_defaults_show_up_in_config() {
    let o = bin().args(["--seed", "17", "show-config"]).output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("seed = 17\n"));
    assert!(text.contains("lambda_gmm = 1\n"));
    assert!(text.contains("density.omega_pruning = 0.003\n"));
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "gen-scene",
        "colorize",
        "gmm-build",
        "init-surfels",
        "train",
        "render",
        "filter-samples",
        "eval-mesh",
        "eval-nvs",
        "pipeline",
    ] {
        let o = bin().args([sub, "--help"]).output().unwrap();
        assert!(o.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn gmm_build_writes_plane_constrained_map() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["gen-scene", "colorize", "gmm-build"] {
        let o = run(dir.path(), &[stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let map = gmm_surfels::gmm::load(&dir.path().join("out/map.gmm")).unwrap();
    assert!(!map.is_empty());
    let eps = gmm_surfels::gmm::GmmParams::default().eps_cov;
    let planar: Vec<_> = map.components().iter().filter(|c| c.planar).collect();
    assert!(!planar.is_empty());
    for c in planar {
        let e = SortedEigen3::new(&c.cov_pp());
        assert!(e.values[0] <= eps + 1e-12, "{}", e.values[0]);
    }
}

#[test]
fn pipeline_is_deterministic_and_stages_restart() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(d.path(), &["--threads", "1", "pipeline"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join("out").join(f)).unwrap();
    assert_eq!(read(&a, "mesh_metrics.csv"), read(&b, "mesh_metrics.csv"));
    assert_eq!(read(&a, "nvs_metrics.csv"), read(&b, "nvs_metrics.csv"));

    // Thread count does not change the result.
    std::fs::remove_dir_all(b.path().join("out")).unwrap();
    let o = run(b.path(), &["--threads", "2", "pipeline"]);
    assert!(o.status.success());
    assert_eq!(read(&a, "mesh_metrics.csv"), read(&b, "mesh_metrics.csv"));

    // Re-running a late stage from its on-disk inputs gives the same file.
    std::fs::remove_file(a.path().join("out/mesh_metrics.csv")).unwrap();
    let o = run(a.path(), &["eval-mesh"]);
    assert!(o.status.success());
    assert_eq!(read(&a, "mesh_metrics.csv"), read(&b, "mesh_metrics.csv"));

    let header = String::from_utf8(read(&a, "train_log.csv")).unwrap();
    assert!(header.starts_with("iteration,l_p,l_sky,l_d,l_n,l_dis,l_control,l_normal,total,count,ms_per_iter"));
}

#[test]
fn random_init_and_threads_env() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["gen-scene", "colorize", "gmm-build"] {
        assert!(run(dir.path(), &[stage]).status.success());
    }
    let o = bin()
        .env("LIGS_THREADS", "1")
        .arg("--data")
        .arg(dir.path().join("data"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(["--set", "init.mode=random", "--set", "init.count=50", "init-surfels"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = gmm_surfels::surfel::load_checkpoint(&dir.path().join("out/init.ply")).unwrap();
    assert_eq!(ck.surfels.len(), 50);
}
