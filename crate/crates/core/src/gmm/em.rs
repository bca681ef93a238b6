//! Expectation-maximization for full-covariance Gaussian mixtures with an
//! eigenvalue floor on every covariance.

use nalgebra::{Cholesky, DMatrix, SMatrix, SVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian<const D: usize> {
    pub weight: f64,
    pub mean: SVector<f64, D>,
    pub cov: SMatrix<f64, D, D>,
}

#[derive(Debug, Clone, Copy)]
pub struct EmParams {
    /// Stop when the mean per-point log-likelihood gain drops below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Lower bound on every covariance eigenvalue.
    pub floor: f64,
}

#[derive(Debug, Clone)]
pub struct EmFit<const D: usize> {
    pub components: Vec<Gaussian<D>>,
    /// Total data log-likelihood before each M-step, plus the final value.
    pub ll_trace: Vec<f64>,
}

/// Projects a symmetric matrix onto `{eigenvalues >= floor}`.
///
/// This is the covariance maximizing the Gaussian likelihood for a given
/// scatter under that constraint, so EM stays monotone.
pub fn clamp_eigenvalues<const D: usize>(m: &SMatrix<f64, D, D>, floor: f64) -> SMatrix<f64, D, D> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = DMatrix::from_column_slice(D, D, sym.as_slice()).symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return sym;
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let out = SMatrix::<f64, D, D>::from_column_slice(out.as_slice());
    (out + out.transpose()) * 0.5
}

/// Cached inverse Cholesky factor and log normalizer of one component.
struct Evaluator<const D: usize> {
    l_inv: SMatrix<f64, D, D>,
    log_coef: f64,
    mean: SVector<f64, D>,
}

impl<const D: usize> Evaluator<D> {
    fn new(g: &Gaussian<D>) -> Option<Self> {
        let chol = Cholesky::new(g.cov)?;
        let l = chol.l();
        let l_inv = l.solve_lower_triangular(&SMatrix::identity())?;
        let log_det: f64 = (0..D).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        Some(Self {
            l_inv,
            log_coef: g.weight.ln() - 0.5 * (D as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
            mean: g.mean,
        })
    }

    fn log_weighted_density(&self, x: &SVector<f64, D>) -> f64 {
        let y = self.l_inv * (x - self.mean);
        self.log_coef - 0.5 * y.norm_squared()
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Posterior component probabilities of `x`.
pub fn posterior<const D: usize>(components: &[Gaussian<D>], x: &SVector<f64, D>) -> Vec<f64> {
    let evals: Vec<Option<Evaluator<D>>> = components.iter().map(Evaluator::new).collect();
    let logs: Vec<f64> = evals
        .iter()
        .map(|e| e.as_ref().map_or(f64::NEG_INFINITY, |e| e.log_weighted_density(x)))
        .collect();
    let z = log_sum_exp(&logs);
    logs.iter().map(|l| (l - z).exp()).collect()
}

/// Total log-likelihood of `data` under a mixture.
pub fn log_likelihood<const D: usize>(components: &[Gaussian<D>], data: &[SVector<f64, D>]) -> f64 {
    let evals: Vec<Evaluator<D>> = components.iter().filter_map(Evaluator::new).collect();
    let mut buf = vec![0.0; evals.len()];
    data.iter()
        .map(|x| {
            for (b, e) in buf.iter_mut().zip(&evals) {
                *b = e.log_weighted_density(x);
            }
            log_sum_exp(&buf)
        })
        .sum()
}

/// Initial mixture from hard labels: per-label weight, mean and floored
/// covariance. Labels without points are skipped.
pub fn init_from_labels<const D: usize>(
    data: &[SVector<f64, D>],
    labels: &[usize],
    k: usize,
    floor: f64,
) -> Vec<Gaussian<D>> {
    let n = data.len() as f64;
    (0..k)
        .filter_map(|c| {
            let members: Vec<&SVector<f64, D>> =
                data.iter().zip(labels).filter(|(_, &l)| l == c).map(|(x, _)| x).collect();
            if members.is_empty() {
                return None;
            }
            let m = members.len() as f64;
            let mean = members.iter().fold(SVector::zeros(), |a, x| a + *x) / m;
            let cov = members
                .iter()
                .fold(SMatrix::zeros(), |a, x| a + (*x - mean) * (*x - mean).transpose())
                / m;
            Some(Gaussian {
                weight: m / n,
                mean,
                cov: clamp_eigenvalues(&cov, floor),
            })
        })
        .collect()
}

pub fn fit<const D: usize>(data: &[SVector<f64, D>], init: Vec<Gaussian<D>>, params: &EmParams) -> EmFit<D> {
    let n = data.len();
    let mut comps = init;
    let mut ll_trace = Vec::new();
    if n == 0 || comps.is_empty() {
        return EmFit {
            components: comps,
            ll_trace,
        };
    }
    let mut resp = vec![0.0; n * comps.len()];
    loop {
        let k = comps.len();
        let evals: Vec<Evaluator<D>> = comps
            .iter()
            .map(|g| Evaluator::new(g).expect("floored covariance is positive definite"))
            .collect();
        resp.resize(n * k, 0.0);
        let mut ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            for (r, e) in row.iter_mut().zip(&evals) {
                *r = e.log_weighted_density(x);
            }
            let z = log_sum_exp(row);
            ll += z;
            for r in row.iter_mut() {
                *r = (*r - z).exp();
            }
        }
        let done = match ll_trace.last() {
            Some(&prev) => ll - prev < params.tol * n as f64,
            None => false,
        };
        ll_trace.push(ll);
        if done || ll_trace.len() > params.max_iters {
            break;
        }

        let mut next = Vec::with_capacity(k);
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk < 1e-10 {
                continue;
            }
            let mean = data
                .iter()
                .enumerate()
                .fold(SVector::zeros(), |a, (i, x)| a + x * resp[i * k + c])
                / nk;
            let cov = data.iter().enumerate().fold(SMatrix::zeros(), |a, (i, x)| {
                let d = x - mean;
                a + d * d.transpose() * resp[i * k + c]
            }) / nk;
            next.push(Gaussian {
                weight: nk / n as f64,
                mean,
                cov: clamp_eigenvalues(&cov, params.floor),
            });
        }
        let total: f64 = next.iter().map(|g| g.weight).sum();
        for g in &mut next {
            g.weight /= total;
        }
        comps = next;
    }
    EmFit {
        components: comps,
        ll_trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Vector2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn clamp_raises_small_eigenvalues_only() {
        let m = Matrix2::new(1.0, 0.0, 0.0, 0.0);
        let c = clamp_eigenvalues(&m, 1e-3);
        assert!((c[(1, 1)] - 1e-3).abs() < 1e-15);
        assert_eq!(clamp_eigenvalues(&Matrix2::identity(), 1e-3), Matrix2::identity());
    }

    #[test]
    fn two_clusters_monotone_and_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Normal::new(0.0, 0.1).unwrap();
        let mut data = Vec::new();
        for i in 0..600 {
            let c = if i < 200 { Vector2::new(-1.0, 0.0) } else { Vector2::new(1.0, 0.5) };
            data.push(c + Vector2::new(n.sample(&mut rng), n.sample(&mut rng)));
        }
        let init = vec![
            Gaussian { weight: 0.5, mean: Vector2::new(-0.5, 0.0), cov: Matrix2::identity() },
            Gaussian { weight: 0.5, mean: Vector2::new(0.5, 0.0), cov: Matrix2::identity() },
        ];
        let fit = fit(&data, init, &EmParams { tol: 1e-10, max_iters: 200, floor: 1e-8 });
        for w in fit.ll_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        let mut c = fit.components.clone();
        c.sort_by(|a, b| a.mean.x.total_cmp(&b.mean.x));
        assert!((c[0].weight - 1.0 / 3.0).abs() < 0.01);
        assert!((c[1].mean - Vector2::new(1.0, 0.5)).norm() < 0.03);
        let final_ll = log_likelihood(&fit.components, &data);
        assert!((final_ll - fit.ll_trace.last().unwrap()).abs() < 1e-6);
    }
}
