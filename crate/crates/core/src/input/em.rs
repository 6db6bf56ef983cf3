//! Weighted Gaussian-mixture EM on point sets.

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::input::kmeans::WeightedPointSet;
use crate::linalg::{clamp_eigenvalues, pidx, Packed};

/// Smallest covariance eigenvalue produced by the input fitters.
pub const INPUT_COVARIANCE_FLOOR: f64 = 1e-4;

/// Responsibilities of points (rows) to components (columns) in log space.
fn log_joint(pts: &WeightedPointSet, mixture: &[Gaussian]) -> Result<Vec<Vec<f64>>> {
    let total: f64 = mixture.iter().map(|g| g.weight.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("mixture has no positive weight".into()));
    }
    let factors = mixture.iter().map(|g| g.cholesky()).collect::<Result<Vec<_>>>()?;
    Ok(pts
        .positions
        .iter()
        .map(|x| {
            mixture
                .iter()
                .zip(&factors)
                .map(|(g, l)| {
                    if g.weight <= 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        (g.weight / total).ln()
                            + crate::gaussian::log_density_with_factor(&g.position, l, x, g.dims)
                    }
                })
                .collect()
        })
        .collect())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `Σᵢ mᵢ log Σₛ πₛ N(xᵢ; μₛ, Σₛ)` with `πₛ` the normalized weights.
pub fn weighted_log_likelihood(pts: &WeightedPointSet, mixture: &[Gaussian]) -> Result<f64> {
    let lj = log_joint(pts, mixture)?;
    Ok(lj
        .iter()
        .zip(&pts.masses)
        .filter(|(_, m)| **m > 0.0)
        .map(|(row, m)| m * log_sum_exp(row))
        .sum())
}

/// Point-to-component responsibilities; every row sums to one.
pub fn weighted_responsibilities(pts: &WeightedPointSet, mixture: &[Gaussian]) -> Result<Vec<Vec<f64>>> {
    let lj = log_joint(pts, mixture)?;
    Ok(lj
        .into_iter()
        .map(|row| {
            let lse = log_sum_exp(&row);
            row.iter().map(|v| (v - lse).exp()).collect()
        })
        .collect())
}

/// One EM step. Weights become responsibility masses, so they sum to the
/// point mass; covariance eigenvalues are clamped to
/// [`INPUT_COVARIANCE_FLOOR`]. A component that receives no mass keeps its
/// previous parameters.
pub fn weighted_em_step(pts: &WeightedPointSet, mixture: &[Gaussian]) -> Result<Vec<Gaussian>> {
    let k = pts.dims;
    if mixture.iter().any(|g| g.dims != k) {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: mixture.iter().find(|g| g.dims != k).map_or(k, |g| g.dims),
        });
    }
    let r = weighted_responsibilities(pts, mixture)?;
    let mut out = Vec::with_capacity(mixture.len());
    for (s, prev) in mixture.iter().enumerate() {
        let mut mass = 0.0;
        let mut mean = [0.0; 3];
        for (i, x) in pts.positions.iter().enumerate() {
            let w = pts.masses[i] * r[i][s];
            mass += w;
            for d in 0..k {
                mean[d] += w * x[d];
            }
        }
        if mass <= 0.0 || !mass.is_finite() {
            out.push(*prev);
            continue;
        }
        for v in mean.iter_mut() {
            *v /= mass;
        }
        let mut cov: Packed<f64> = [0.0; 6];
        for (i, x) in pts.positions.iter().enumerate() {
            let w = pts.masses[i] * r[i][s];
            for a in 0..k {
                for b in 0..=a {
                    cov[pidx(a, b)] += w * (x[a] - mean[a]) * (x[b] - mean[b]);
                }
            }
        }
        for v in cov.iter_mut() {
            *v /= mass;
        }
        let mut g = Gaussian::zeroed(k);
        g.weight = mass;
        g.position = mean;
        g.covariance = clamp_eigenvalues(&cov, k, INPUT_COVARIANCE_FLOOR);
        out.push(g);
    }
    Ok(out)
}

/// Outcome of [`em_until_converged`].
#[derive(Clone, Debug)]
pub struct EmRun {
    pub mixture: Vec<Gaussian>,
    /// Log-likelihood before the first step and after every step.
    pub log_likelihood: Vec<f64>,
}

/// Repeats [`weighted_em_step`] until the log-likelihood gains less than
/// `tol` or `max_iters` steps ran.
pub fn em_until_converged(pts: &WeightedPointSet, init: &[Gaussian], tol: f64, max_iters: usize) -> Result<EmRun> {
    let mut mixture = init.to_vec();
    let mut ll = vec![weighted_log_likelihood(pts, &mixture)?];
    for _ in 0..max_iters {
        mixture = weighted_em_step(pts, &mixture)?;
        let l = weighted_log_likelihood(pts, &mixture)?;
        let prev = *ll.last().expect("non-empty");
        ll.push(l);
        if (l - prev).abs() < tol {
            break;
        }
    }
    Ok(EmRun {
        mixture,
        log_likelihood: ll,
    })
}
