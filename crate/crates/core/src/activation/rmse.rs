//! Sampled RMSE between a fitted mixture and a reference function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, PreparedGaussian};
use crate::linalg::Vector;

/// Positions at which fitted and reference functions are compared.
#[derive(Clone, Debug)]
pub struct SamplePoints {
    pub dims: usize,
    pub points: Vec<Vector<f64>>,
}

/// Draws `n` positions from the mixture treated as a distribution over
/// components proportional to `|aᵢ|`. Per-component counts are fixed by
/// largest-remainder allocation and every draw is truncated at Mahalanobis
/// radius 3. All-zero weights fall back to equal allocation.
pub fn sample_positions(gs: &[Gaussian], n: usize, seed: u64) -> Result<SamplePoints> {
    let first = gs
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot sample an empty mixture".into()))?;
    let k = first.dims;
    let total: f64 = gs.iter().map(|g| g.weight.abs()).sum();
    let share: Vec<f64> = if total > 0.0 {
        gs.iter().map(|g| g.weight.abs() / total * n as f64).collect()
    } else {
        vec![n as f64 / gs.len() as f64; gs.len()]
    };
    let mut counts: Vec<usize> = share.iter().map(|s| s.floor() as usize).collect();
    let mut order: Vec<usize> = (0..gs.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = share[a] - share[a].floor();
        let rb = share[b] - share[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for (g, &c) in gs.iter().zip(&counts) {
        if c == 0 {
            continue;
        }
        let l = g.cholesky()?;
        for _ in 0..c {
            let z = loop {
                let mut z = [0.0; 3];
                for v in z.iter_mut().take(k) {
                    *v = rng.sample(StandardNormal);
                }
                if z.iter().map(|v| v * v).sum::<f64>() <= 9.0 {
                    break z;
                }
            };
            let mut x = g.position;
            for i in 0..k {
                for j in 0..=i {
                    x[i] += l[crate::linalg::pidx(i, j)] * z[j];
                }
            }
            points.push(x);
        }
    }
    Ok(SamplePoints { dims: k, points })
}

/// Root-mean-square difference between `fitted` and `reference` over `pts`.
pub fn fitting_rmse(
    fitted: &[Gaussian],
    reference: &dyn Fn(&[f64]) -> f64,
    pts: &SamplePoints,
) -> Result<f64> {
    if pts.points.is_empty() {
        return Err(Error::InvalidArgument("RMSE needs at least one sample".into()));
    }
    let prepared = fitted.iter().map(PreparedGaussian::new).collect::<Result<Vec<_>>>()?;
    let k = pts.dims;
    let mut sum = 0.0;
    for x in &pts.points {
        let f: f64 = prepared.iter().map(|p| p.eval(x)).sum();
        let d = f - reference(&x[..k]);
        sum += d * d;
    }
    Ok((sum / pts.points.len() as f64).sqrt())
}

/// Fitting error of one layer: the whole chain, the ReLU fit alone and the
/// reduction alone.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FittingErrors {
    pub all: f64,
    pub relu: f64,
    pub reduction: f64,
}

/// Measures [`FittingErrors`] at positions drawn from the convolution output.
pub fn fitting_errors(
    conv_output: &[Gaussian],
    relu_fit: &[Gaussian],
    reduced: &[Gaussian],
    n_samples: usize,
    seed: u64,
) -> Result<FittingErrors> {
    let pts = sample_positions(conv_output, n_samples, seed)?;
    let conv = conv_output.iter().map(PreparedGaussian::new).collect::<Result<Vec<_>>>()?;
    let fit = relu_fit.iter().map(PreparedGaussian::new).collect::<Result<Vec<_>>>()?;
    let k = pts.dims;
    let to3 = |x: &[f64]| {
        let mut p = [0.0; 3];
        p[..k].copy_from_slice(x);
        p
    };
    let relu_gt = |x: &[f64]| conv.iter().map(|p| p.eval(&to3(x))).sum::<f64>().max(0.0);
    let fit_eval = |x: &[f64]| fit.iter().map(|p| p.eval(&to3(x))).sum::<f64>();
    Ok(FittingErrors {
        all: fitting_rmse(reduced, &relu_gt, &pts)?,
        relu: fitting_rmse(relu_fit, &relu_gt, &pts)?,
        reduction: fitting_rmse(reduced, &fit_eval, &pts)?,
    })
}
