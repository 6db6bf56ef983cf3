//! Least-squares ReLU fitting, kept as a reference for the dense heuristic.

use nalgebra::{DMatrix, DVector};

use super::rmse::sample_positions;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, PreparedGaussian};
use crate::linalg::Vector;

/// Where the fitted mixture is required to match the ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSet {
    /// The component means.
    Centers,
    /// `n` positions drawn from the mixture.
    Random(usize),
    /// The component means followed by `n` drawn positions.
    CentersAndRandom(usize),
}

#[derive(Clone, Debug)]
pub struct LeastSquaresFit {
    pub gaussians: Vec<Gaussian>,
    pub samples: Vec<Vector<f64>>,
    /// Largest `|A y − t|` over the sample positions.
    pub max_residual: f64,
    pub rank: usize,
}

/// Re-weights `gs` so the mixture matches `max(0, gm)` at the sample
/// positions in the least-squares sense. Rank-deficient systems get the
/// minimum-norm solution through the SVD pseudo-inverse.
pub fn least_squares_relu_fit(gs: &[Gaussian], set: SampleSet, seed: u64) -> Result<LeastSquaresFit> {
    let n = gs.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty mixture".into()));
    }
    let centers = || gs.iter().map(|g| g.position).collect::<Vec<_>>();
    let samples = match set {
        SampleSet::Centers => centers(),
        SampleSet::Random(m) => sample_positions(gs, m, seed)?.points,
        SampleSet::CentersAndRandom(m) => {
            let mut s = centers();
            s.extend(sample_positions(gs, m, seed)?.points);
            s
        }
    };
    if samples.len() < n {
        return Err(Error::InvalidArgument(format!(
            "{} sample positions for {n} unknowns",
            samples.len()
        )));
    }
    let prepared = gs.iter().map(PreparedGaussian::new).collect::<Result<Vec<_>>>()?;
    let a = DMatrix::from_fn(samples.len(), n, |i, j| prepared[j].unit_eval(&samples[i]));
    let t = DVector::from_fn(samples.len(), |i, _| {
        prepared.iter().map(|p| p.eval(&samples[i])).sum::<f64>().max(0.0)
    });
    let svd = a.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    let rank = svd.rank(tol);
    let y = svd
        .solve(&t, tol)
        .map_err(|e| Error::InvalidArgument(format!("least-squares solve failed: {e}")))?;
    let max_residual = (&a * &y - &t).amax();
    let gaussians = gs
        .iter()
        .zip(y.iter())
        .map(|(g, w)| Gaussian { weight: *w, ..*g })
        .collect();
    Ok(LeastSquaresFit {
        gaussians,
        samples,
        max_residual,
        rank,
    })
}
