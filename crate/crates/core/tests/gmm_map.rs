use gmm_surfels::gmm::{
    self, deserialize, em, fit_local_gmm, serialize, to_world, voxelize, FitParams, Gaussian, GmmComponent,
    GmmMap, GmmParams, PlaneFrame,
};
use gmm_surfels::pointcloud::{CameraModel, ColorizedPoint, FrameCloud, Intrinsics};
use gmm_surfels::spatial::VoxelKey;
use nalgebra::{Matrix3, Matrix4, Rotation3, SymmetricEigen, Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const LN_2PI: f64 = 1.8378770664093453;

fn camera_at(eye: Vector3<f64>, target: Vector3<f64>) -> CameraModel {
    CameraModel::look_at(Intrinsics::from_fov(64, 64, 90.0), &eye, &target, &Vector3::z())
}

fn checker(x: f64, y: f64) -> f64 {
    let a = (x / 0.4).floor() as i64 + (y / 0.4).floor() as i64;
    if a.rem_euclid(2) == 0 {
        0.35
    } else {
        0.65
    }
}

/// Noise-free checker floor patch `[x0, x0 + size) x [y0, y0 + size)` at z = 0.
fn floor_frame(frame_id: usize, x0: f64, y0: f64, size: f64, step: f64) -> FrameCloud {
    let n = (size / step).round() as usize;
    let mut points = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let x = x0 + (i as f64 + 0.5) * step;
            let y = y0 + (j as f64 + 0.5) * step;
            let g = checker(x, y);
            points.push(ColorizedPoint::new(Vector3::new(x, y, 0.0), Vector3::new(g, g, g)));
        }
    }
    let c = Vector3::new(x0 + size / 2.0, y0 + size / 2.0, 0.0);
    FrameCloud {
        frame_id,
        points,
        camera: camera_at(c + Vector3::new(0.3, 0.2, 2.0), c),
        no_visible_points: false,
    }
}

fn gaussian_density(p: &Vector3<f64>, mean: &Vector3<f64>, cov: &Matrix3<f64>) -> f64 {
    let d = p - mean;
    let inv = cov.try_inverse().unwrap();
    (-0.5 * d.dot(&(inv * d))).exp() / ((2.0 * std::f64::consts::PI).powi(3) * cov.determinant()).sqrt()
}

#[test]
fn voxelize_counts_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pts: Vec<ColorizedPoint> = (0..10_000)
        .map(|_| {
            let p = Vector3::new(rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0));
            ColorizedPoint::new(p, Vector3::zeros())
        })
        .collect();
    let v = voxelize(&pts, 1.0);
    assert_eq!(v.len(), 8);
    assert_eq!(v.values().map(Vec::len).sum::<usize>(), 10_000);
    for (key, ids) in &v {
        for &i in ids {
            assert_eq!(VoxelKey::of(&pts[i].p, 1.0), *key);
        }
    }
}

#[test]
fn single_cluster_gives_one_component() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = Normal::new(0.0, 0.05).unwrap();
    let pts: Vec<Vector4<f64>> = (0..500)
        .map(|_| Vector4::new(0.3 + n.sample(&mut rng), -0.1 + n.sample(&mut rng), 0.0, 0.5))
        .collect();
    let fit = fit_local_gmm(&pts, &FitParams::default());
    assert_eq!(fit.components.len(), 1);
    let c = &fit.components[0];
    let mean_u = pts.iter().map(|p| p.x).sum::<f64>() / 500.0;
    let mean_v = pts.iter().map(|p| p.y).sum::<f64>() / 500.0;
    let tol = 3.0 * 0.05 / (500f64).sqrt();
    assert!((c.mean.x - mean_u).abs() < tol);
    assert!((c.mean.y - mean_v).abs() < tol);
    assert!((c.weight - 1.0).abs() < 1e-12);
}

#[test]
fn gray_halves_separate() {
    let mut pts = Vec::new();
    for i in 0..30 {
        for j in 0..30 {
            let g = if i < 15 { 0.1 } else { 0.9 };
            pts.push(Vector4::new(i as f64 * 0.02, j as f64 * 0.02, 0.0, g));
        }
    }
    let fit = fit_local_gmm(&pts, &FitParams::default());
    assert!(fit.components.len() >= 2);
    assert!(fit.components.iter().any(|c| c.mean.w < 0.2));
    assert!(fit.components.iter().any(|c| c.mean.w > 0.8));
    let total: f64 = fit.components.iter().map(|c| c.weight).sum();
    assert!((total - 1.0).abs() < 1e-9);
    for c in &fit.components {
        for a in 0..4 {
            assert_eq!(c.cov[(2, a)], 0.0);
            assert_eq!(c.cov[(a, 2)], 0.0);
        }
        assert_eq!(c.mean.z, 0.0);
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    Rotation3::new(axis * rng.gen_range(0.1..3.0)).into_inner()
}

fn random_local(rng: &mut ChaCha8Rng) -> Gaussian<4> {
    let mut a = Matrix3::zeros();
    for v in a.iter_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }
    let s = a * a.transpose() + Matrix3::identity() * 1e-4;
    let idx = [0, 1, 3];
    let mut cov = Matrix4::zeros();
    for i in 0..3 {
        for j in 0..3 {
            cov[(idx[i], idx[j])] = s[(i, j)];
        }
    }
    Gaussian {
        weight: rng.gen_range(0.1..1.0),
        mean: Vector4::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0, rng.gen_range(0.0..1.0)),
        cov,
    }
}

fn sorted_eigs4(m: &Matrix4<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(*m).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn to_world_preserves_spectrum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let local = random_local(&mut rng);
        let frame = PlaneFrame {
            mean: Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
            rotation: random_rotation(&mut rng),
            eigenvalues: [0.0, 0.1, 0.2],
        };
        let w = to_world(&local, &frame);
        prop_assert_eq!(w.weight, local.weight);
        prop_assert_eq!(w.mean.w, local.mean.w);
        prop_assert_eq!(w.cov[(3, 3)], local.cov[(3, 3)]);
        for (a, b) in sorted_eigs4(&w.cov).iter().zip(sorted_eigs4(&local.cov)) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        let pp_w: Matrix3<f64> = w.cov.fixed_view::<3, 3>(0, 0).into();
        let pp_l: Matrix3<f64> = local.cov.fixed_view::<3, 3>(0, 0).into();
        let mut ew: Vec<f64> = pp_w.symmetric_eigenvalues().iter().copied().collect();
        let mut el: Vec<f64> = pp_l.symmetric_eigenvalues().iter().copied().collect();
        ew.sort_by(f64::total_cmp);
        el.sort_by(f64::total_cmp);
        for (a, b) in ew.iter().zip(&el) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        // Hand-evaluated mean transform.
        let expect = frame.mean + frame.rotation * Vector3::new(local.mean.x, local.mean.y, 0.0);
        prop_assert!((Vector3::new(w.mean.x, w.mean.y, w.mean.z) - expect).norm() < 1e-12);
    }

    #[test]
    fn em_log_likelihood_is_monotone(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 0.05).unwrap();
        let centers: Vec<Vector3<f64>> = (0..k)
            .map(|_| Vector3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(0.0..1.0)))
            .collect();
        let pts: Vec<Vector4<f64>> = (0..300)
            .map(|i| {
                let c = centers[i % k];
                Vector4::new(c.x + n.sample(&mut rng), c.y + n.sample(&mut rng), 0.0, (c.z + 0.3 * n.sample(&mut rng)).clamp(0.0, 1.0))
            })
            .collect();
        let fit = fit_local_gmm(&pts, &FitParams::default());
        prop_assert!(!fit.components.is_empty());
        for w in fit.ll_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
        let total: f64 = fit.components.iter().map(|c| c.weight).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn neighborhood_likelihood_matches_brute_force(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // All components inside [0, 1)^3, queries anywhere in [0, 1)^3: every
        // component lies in each query's 27-voxel block.
        let comps: Vec<GmmComponent> = (0..6)
            .map(|_| {
                let mut a = Matrix4::zeros();
                for v in a.iter_mut() {
                    *v = rng.gen_range(-0.2..0.2);
                }
                let cov = a * a.transpose() + Matrix4::identity() * 1e-3;
                let mean = Vector4::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), 0.5);
                GmmComponent::new(rng.gen_range(0.05..1.0), mean, cov, Vector3::zeros(), 1.0, false).unwrap()
            })
            .collect();
        let map = GmmMap::from_components(1.0, comps.clone());
        for _ in 0..10 {
            let p = Vector3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let wsum: f64 = comps.iter().map(|c| c.weight).sum();
            let dens: f64 = comps
                .iter()
                .map(|c| c.weight * gaussian_density(&p, &c.position(), &c.cov_pp()))
                .sum();
            let brute = (dens / wsum).ln();
            prop_assert!((map.log_likelihood(&p) - brute).abs() < 1e-6);
        }
    }
}

#[test]
fn likelihood_closed_forms() {
    let c = GmmComponent::new(1.0, Vector4::zeros(), Matrix4::identity(), Vector3::zeros(), 1.0, false).unwrap();
    let map = GmmMap::from_components(1.0, vec![c]);
    let at_mean = map.log_likelihood(&Vector3::zeros());
    assert!((at_mean + 1.5 * LN_2PI).abs() < 1e-12);
    assert!((at_mean + 2.7568).abs() < 1e-4);
    // Ten sigma out, still inside the 27-voxel block.
    let far = map.log_likelihood(&Vector3::new(0.0, 0.0, 10.0));
    assert!(far == f64::NEG_INFINITY);
    let near = map.log_likelihood(&Vector3::new(0.0, 1.5, 0.0));
    assert!((near - (at_mean - 1.125)).abs() < 1e-12);
    assert!(map.log_likelihood(&Vector3::new(50.0, 0.0, 0.0)) == f64::NEG_INFINITY);
}

#[test]
fn ten_sigma_is_far_below_mode() {
    let cov = Matrix4::from_diagonal(&Vector4::new(0.01, 0.01, 0.01, 0.01));
    let c = GmmComponent::new(1.0, Vector4::new(0.5, 0.5, 0.5, 0.5), cov, Vector3::zeros(), 1.0, false).unwrap();
    let map = GmmMap::from_components(1.0, vec![c]);
    let at_mean = map.log_likelihood(&Vector3::new(0.5, 0.5, 0.5));
    let off = map.log_likelihood(&Vector3::new(1.5, 0.5, 0.5));
    assert!((at_mean - off - 50.0).abs() < 1e-9);
}

#[test]
fn effective_points_classification() {
    let frame = floor_frame(0, 0.0, 0.0, 1.0, 0.05);
    let empty = GmmMap::new(1.0);
    let (new, low) = empty.effective_points(&frame, -6.0);
    assert_eq!(new.len(), frame.points.len());
    assert!(low.is_empty());

    let cov = Matrix4::from_diagonal(&Vector4::new(0.01, 0.01, 1e-8, 0.01));
    let c = GmmComponent::new(1.0, Vector4::new(0.5, 0.5, 0.0, 0.5), cov, Vector3::zeros(), 1.0, true).unwrap();
    let map = GmmMap::from_components(1.0, vec![c]);
    let probe = |p: Vector3<f64>| FrameCloud {
        frame_id: 1,
        points: vec![ColorizedPoint::new(p, Vector3::zeros())],
        camera: frame.camera.clone(),
        no_visible_points: false,
    };
    let (new, low) = map.effective_points(&probe(Vector3::new(0.5, 0.5, 0.0)), -6.0);
    assert!(new.is_empty() && low.is_empty());
    let (new, low) = map.effective_points(&probe(Vector3::new(0.5, 0.5, 0.9)), -6.0);
    assert!(new.is_empty());
    assert_eq!(low, vec![0]);
    let (new, low) = map.effective_points(&probe(Vector3::new(1.5, 0.5, 0.0)), -6.0);
    assert_eq!(new, vec![0]);
    assert!(low.is_empty());
}

#[test]
fn refeeding_a_frame_consumes_little() {
    let params = GmmParams::default();
    let frame = floor_frame(0, 0.0, 0.0, 3.0, 0.03);
    let mut map = GmmMap::new(params.voxel_size);
    let first = map.integrate_frame(&frame, &params).unwrap();
    assert_eq!(first.effective(), frame.points.len());
    assert!(first.consumed as f64 > 0.95 * frame.points.len() as f64);
    assert_eq!(first.new_components, map.len());
    let before = map.len();
    let snapshot: Vec<Vector4<f64>> = map.components().iter().map(|c| c.mean).collect();
    let again = FrameCloud { frame_id: 1, ..frame.clone() };
    let second = map.integrate_frame(&again, &params).unwrap();
    assert!(
        (second.consumed as f64) < 0.05 * frame.points.len() as f64,
        "{second:?}"
    );
    // Append-only: earlier components untouched.
    for (c, m) in map.components().iter().zip(&snapshot) {
        assert_eq!(c.mean, *m);
    }
    assert!(map.len() >= before);
    check_map_invariants(&map, &params, &frame.camera.center());
}

fn check_map_invariants(map: &GmmMap, params: &GmmParams, eye: &Vector3<f64>) {
    for (i, c) in map.components().iter().enumerate() {
        assert!(c.weight > 0.0 && c.weight <= 1.0);
        assert_eq!(c.key, VoxelKey::of(&c.position(), map.voxel_size()));
        assert!(map.voxel(&c.key).contains(&(i as u32)));
        assert!((c.normal.norm() - 1.0).abs() < 1e-12);
        assert!(c.normal.dot(&(eye - c.position())) >= 0.0);
        if c.planar {
            assert!(c.spatial.values[0] <= params.eps_cov + 1e-12, "{}", c.spatial.values[0]);
            assert!(c.normal.z.abs() > 1.0 - 1e-9);
        }
    }
    let listed: usize = map.keys().iter().map(|k| map.voxel(k).len()).sum();
    assert_eq!(listed, map.len());
}

#[test]
fn disjoint_frames_add_up() {
    let params = GmmParams::default();
    let a = floor_frame(0, 0.0, 0.0, 2.0, 0.04);
    let b = floor_frame(1, 10.0, 10.0, 2.0, 0.04);
    let count = |frames: &[&FrameCloud]| {
        let mut m = GmmMap::new(1.0);
        for f in frames {
            m.integrate_frame(f, &params).unwrap();
        }
        m.len()
    };
    let (na, nb) = (count(&[&a]), count(&[&b]));
    assert!(na > 0 && nb > 0);
    assert_eq!(count(&[&a, &b]), na + nb);
}

#[test]
fn well_explained_frame_adds_nothing() {
    let params = GmmParams::default();
    let frame = floor_frame(0, 0.0, 0.0, 2.0, 0.04);
    let mut map = GmmMap::new(1.0);
    map.integrate_frame(&frame, &params).unwrap();
    let (new, low) = map.effective_points(&frame, params.rho);
    let explained: Vec<ColorizedPoint> = frame
        .points
        .iter()
        .enumerate()
        .filter(|(i, _)| !new.contains(i) && !low.contains(i))
        .map(|(_, p)| *p)
        .collect();
    let sub = FrameCloud { frame_id: 5, points: explained, ..frame.clone() };
    let before = map.len();
    let r = map.integrate_frame(&sub, &params).unwrap();
    assert_eq!(r.new_components, 0);
    assert_eq!(r.effective(), 0);
    assert_eq!(map.len(), before);
}

#[test]
fn integration_is_deterministic_and_frozen_map_rejects_frames() {
    let params = GmmParams::default();
    let frame = floor_frame(0, 0.0, 0.0, 2.0, 0.04);
    let mut a = GmmMap::new(1.0);
    let mut b = GmmMap::new(1.0);
    a.integrate_frame(&frame, &params).unwrap();
    b.integrate_frame(&frame, &params).unwrap();
    assert_eq!(serialize(&a), serialize(&b));
    a.freeze();
    assert!(matches!(a.integrate_frame(&frame, &params), Err(gmm::GmmError::Frozen)));
}

#[test]
fn binary_format_round_trips() {
    let empty = GmmMap::new(0.5);
    let bytes = serialize(&empty);
    assert_eq!(bytes.len(), 24);
    assert_eq!(&bytes[..8], b"LIGSGMM1");
    let back = deserialize(&bytes).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.voxel_size(), 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let comps: Vec<GmmComponent> = (0..1000)
        .map(|_| {
            let mut a = Matrix4::zeros();
            for v in a.iter_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
            let mean = Vector4::new(rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.0..1.0));
            let rgb = Vector3::new(rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>());
            GmmComponent::new(rng.gen_range(0.01..1.0), mean, a * a.transpose() + Matrix4::identity() * 1e-6, rgb, 1.0, false).unwrap()
        })
        .collect();
    let map = GmmMap::from_components(1.0, comps);
    let bytes = serialize(&map);
    let back = deserialize(&bytes).unwrap();
    assert_eq!(serialize(&back), bytes);
    assert_eq!(back.keys(), map.keys());
    for (x, y) in map.components().iter().zip(back.components()) {
        assert_eq!(x.weight, y.weight);
        assert_eq!(x.mean, y.mean);
        assert_eq!(x.cov, y.cov);
        assert_eq!(x.mean_rgb, y.mean_rgb);
        assert_eq!(x.key, y.key);
        assert!((x.normal.dot(&y.normal).abs() - 1.0).abs() < 1e-12);
    }
    assert!(deserialize(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[7] = b'2';
    assert!(deserialize(&bad).is_err());
}

#[test]
fn em_floor_keeps_flat_fit_finite() {
    // Constant gray and a perfectly straight row: two degenerate directions.
    let pts: Vec<nalgebra::Vector3<f64>> = (0..50).map(|i| Vector3::new(i as f64 * 0.01, 0.0, 0.5)).collect();
    let init = em::init_from_labels(&pts, &vec![0; 50], 1, 1e-8);
    let fit = em::fit(&pts, init, &em::EmParams { tol: 1e-9, max_iters: 50, floor: 1e-8 });
    assert!(fit.ll_trace.iter().all(|v| v.is_finite()));
    let e = fit.components[0].cov.symmetric_eigenvalues();
    assert!(e.iter().all(|&v| v >= 1e-8 * (1.0 - 1e-9)));
}
