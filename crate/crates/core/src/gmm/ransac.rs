use nalgebra::Vector3;
use rand::Rng;

use super::plane::PlaneFrame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    /// Point-to-plane distance for an inlier, meters.
    pub threshold: f64,
    pub iterations: usize,
    pub min_inliers: usize,
    pub max_planes: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold: 0.02,
            iterations: 200,
            min_inliers: 30,
            max_planes: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlaneFit {
    pub frame: PlaneFrame,
    /// Indices into the original point array.
    pub inliers: Vec<usize>,
}

fn inliers_of(
    points: &[Vector3<f64>],
    candidates: &[usize],
    origin: &Vector3<f64>,
    normal: &Vector3<f64>,
    threshold: f64,
) -> Vec<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&i| normal.dot(&(points[i] - origin)).abs() <= threshold)
        .collect()
}

/// Greedy sequential RANSAC over `bucket` (indices into `points`).
///
/// Returns the accepted planes and the indices on none of them.
pub fn extract_planes<R: Rng>(
    points: &[Vector3<f64>],
    bucket: &[usize],
    params: &RansacParams,
    rng: &mut R,
) -> (Vec<PlaneFit>, Vec<usize>) {
    let mut remaining: Vec<usize> = bucket.to_vec();
    let mut planes = Vec::new();
    let min_inliers = params.min_inliers.max(3);
    while planes.len() < params.max_planes && remaining.len() >= min_inliers {
        let n = remaining.len();
        let mut best: Option<(usize, Vector3<f64>, Vector3<f64>)> = None;
        for _ in 0..params.iterations {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            let c = rng.gen_range(0..n);
            if a == b || b == c || a == c {
                continue;
            }
            let (pa, pb, pc) = (points[remaining[a]], points[remaining[b]], points[remaining[c]]);
            let (e1, e2) = (pb - pa, pc - pa);
            let cross = e1.cross(&e2);
            let norm = cross.norm();
            if norm <= 1e-9 * e1.norm() * e2.norm() || norm == 0.0 {
                continue;
            }
            let normal = cross / norm;
            let count = remaining
                .iter()
                .filter(|&&i| normal.dot(&(points[i] - pa)).abs() <= params.threshold)
                .count();
            if best.map_or(true, |(c, _, _)| count > c) {
                best = Some((count, pa, normal));
            }
        }
        let Some((count, origin, normal)) = best else {
            break;
        };
        if count < min_inliers {
            break;
        }
        let mut inliers = inliers_of(points, &remaining, &origin, &normal, params.threshold);
        // One least-squares refit of the hypothesis.
        if let Some(refit) = PlaneFrame::fit(inliers.iter().map(|&i| &points[i])) {
            let refined = inliers_of(points, &remaining, &refit.mean, &refit.normal(), params.threshold);
            if refined.len() >= min_inliers {
                inliers = refined;
            }
        }
        let Some(frame) = PlaneFrame::fit(inliers.iter().map(|&i| &points[i])) else {
            break;
        };
        let mut taken = vec![false; points.len()];
        for &i in &inliers {
            taken[i] = true;
        }
        remaining.retain(|&i| !taken[i]);
        planes.push(PlaneFit { frame, inliers });
    }
    (planes, remaining)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plane_with_outliers() {
        let mut pts = Vec::new();
        for i in 0..500 {
            pts.push(Vector3::new((i % 25) as f64 * 0.04, (i / 25) as f64 * 0.05, 0.0));
        }
        for i in 0..5 {
            pts.push(Vector3::new(0.1 * i as f64, 0.3, 1.0));
        }
        let idx: Vec<usize> = (0..pts.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (planes, rest) = extract_planes(&pts, &idx, &RansacParams::default(), &mut rng);
        assert_eq!(planes.len(), 1);
        assert_eq!(planes[0].inliers.len(), 500);
        assert!((planes[0].frame.normal().z.abs() - 1.0).abs() < 1e-12);
        assert_eq!(rest, vec![500, 501, 502, 503, 504]);
    }

    #[test]
    fn perpendicular_walls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = Vec::new();
        for _ in 0..300 {
            pts.push(Vector3::new(rng.gen_range(0.05..1.0), 0.0, rng.gen_range(0.0..1.0)));
        }
        for _ in 0..300 {
            pts.push(Vector3::new(0.0, rng.gen_range(0.05..1.0), rng.gen_range(0.0..1.0)));
        }
        let idx: Vec<usize> = (0..pts.len()).collect();
        let (planes, rest) = extract_planes(&pts, &idx, &RansacParams::default(), &mut rng);
        assert_eq!(planes.len(), 2);
        for p in &planes {
            assert!((p.inliers.len() as i64 - 300).abs() <= 5);
        }
        assert!(rest.is_empty());
    }

    #[test]
    fn degenerate_buckets_yield_no_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let line: Vec<Vector3<f64>> = (0..40).map(|i| Vector3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let idx: Vec<usize> = (0..40).collect();
        let (planes, rest) = extract_planes(&line, &idx, &RansacParams::default(), &mut rng);
        assert!(planes.is_empty());
        assert_eq!(rest.len(), 40);
        let same = vec![Vector3::new(1.0, 2.0, 3.0); 40];
        let (planes, rest) = extract_planes(&same, &idx, &RansacParams::default(), &mut rng);
        assert!(planes.is_empty());
        assert_eq!(rest.len(), 40);
    }

    #[test]
    fn small_bucket_is_all_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new(i as f64, (i * i) as f64, 0.0)).collect();
        let idx: Vec<usize> = (0..10).collect();
        let (planes, rest) = extract_planes(&pts, &idx, &RansacParams::default(), &mut rng);
        assert!(planes.is_empty());
        assert_eq!(rest, idx);
    }
}
