//! Gaussian-kernel mean shift with binned seeding, used to pick the number
//! of mixture components and their starting points.

use std::collections::BTreeMap;

use nalgebra::SVector;

#[derive(Debug, Clone)]
pub struct Modes<const D: usize> {
    pub centers: Vec<SVector<f64, D>>,
    /// Nearest-mode label of every input point.
    pub labels: Vec<usize>,
    pub support: Vec<usize>,
}

const MAX_ITERS: usize = 200;
const SHIFT_TOL: f64 = 1e-4;

/// Finds modes of `data` under a Gaussian kernel with per-axis `bandwidth`.
///
/// Modes closer than one bandwidth are merged, and modes with fewer than
/// `min_support` nearest points are dropped (the best-supported one always
/// survives). Empty input gives no modes.
pub fn mean_shift<const D: usize>(
    data: &[SVector<f64, D>],
    bandwidth: &SVector<f64, D>,
    min_support: usize,
) -> Modes<D> {
    if data.is_empty() {
        return Modes {
            centers: vec![],
            labels: vec![],
            support: vec![],
        };
    }
    let scaled: Vec<SVector<f64, D>> = data.iter().map(|x| x.component_div(bandwidth)).collect();

    let mut bins: BTreeMap<[i64; D], (SVector<f64, D>, usize)> = BTreeMap::new();
    for y in &scaled {
        let key: [i64; D] = std::array::from_fn(|i| y[i].floor() as i64);
        let e = bins.entry(key).or_insert((SVector::zeros(), 0));
        e.0 += y;
        e.1 += 1;
    }

    let mut converged: Vec<(SVector<f64, D>, f64)> = bins
        .values()
        .map(|(sum, n)| climb(&scaled, sum / *n as f64))
        .collect();
    // Highest density first; the sort is stable so seed order breaks ties.
    converged.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut centers: Vec<SVector<f64, D>> = Vec::new();
    for (m, _) in converged {
        if centers.iter().all(|c| (c - m).norm() >= 1.0) {
            centers.push(m);
        }
    }

    loop {
        let (labels, support) = assign(&scaled, &centers);
        let best = (0..centers.len()).max_by_key(|&i| (support[i], std::cmp::Reverse(i))).unwrap();
        let keep: Vec<usize> = (0..centers.len())
            .filter(|&i| i == best || support[i] >= min_support)
            .collect();
        if keep.len() == centers.len() {
            return Modes {
                centers: centers.iter().map(|c| c.component_mul(bandwidth)).collect(),
                labels,
                support,
            };
        }
        centers = keep.into_iter().map(|i| centers[i]).collect();
    }
}

fn climb<const D: usize>(data: &[SVector<f64, D>], mut x: SVector<f64, D>) -> (SVector<f64, D>, f64) {
    let mut density = 0.0;
    for _ in 0..MAX_ITERS {
        let mut num = SVector::<f64, D>::zeros();
        let mut den = 0.0;
        for y in data {
            let d2 = (y - x).norm_squared();
            if d2 < 25.0 {
                let k = (-0.5 * d2).exp();
                num += y * k;
                den += k;
            }
        }
        density = den;
        if den == 0.0 {
            break;
        }
        let next = num / den;
        let shift = (next - x).norm();
        x = next;
        if shift < SHIFT_TOL {
            break;
        }
    }
    (x, density)
}

fn assign<const D: usize>(data: &[SVector<f64, D>], centers: &[SVector<f64, D>]) -> (Vec<usize>, Vec<usize>) {
    let mut support = vec![0; centers.len()];
    let labels = data
        .iter()
        .map(|y| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, c) in centers.iter().enumerate() {
                let d = (y - c).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            support[best] += 1;
            best
        })
        .collect();
    (labels, support)
}
