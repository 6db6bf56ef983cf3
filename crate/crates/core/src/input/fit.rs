//! Turning images and point clouds into input mixtures.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{mixture_integral, rescale_domain, Gaussian, MixtureBatch};
use crate::input::em::{em_until_converged, weighted_em_step, INPUT_COVARIANCE_FLOOR};
use crate::input::kmeans::{weighted_kmeans, WeightedPointSet};
use crate::linalg::{clamp_eigenvalues, pidx, Packed};

const KMEANS_ITERATIONS: usize = 100;
/// Convergence threshold on the log-likelihood gain.
pub const EM_TOLERANCE: f64 = 1e-6;
pub const EM_MAX_ITERATIONS: usize = 100;
/// Pixels below this fraction of the brightest pixel are dropped.
pub const PIXEL_MASS_THRESHOLD: f64 = 1e-3;

/// Row-major grey image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                got: pixels.len(),
            });
        }
        Ok(Image { width, height, pixels })
    }

    /// Pixel centers `(col + 0.5, row + 0.5)` carrying their intensity,
    /// skipping faint pixels.
    pub fn to_points(&self) -> Result<WeightedPointSet> {
        let max = self.pixels.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return Err(Error::BlankImage);
        }
        let mut pos = Vec::new();
        let mut mass = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.pixels[r * self.width + c];
                if v >= PIXEL_MASS_THRESHOLD * max {
                    pos.push([c as f64 + 0.5, r as f64 + 0.5, 0.0]);
                    mass.push(v);
                }
            }
        }
        WeightedPointSet::new(2, pos, mass)
    }
}

/// Gaussians from a clustering: weight = cluster mass, mean = centroid,
/// covariance = weighted cluster covariance with the floor applied.
fn clusters_to_mixture(pts: &WeightedPointSet, n: usize, seed: u64) -> Result<Vec<Gaussian>> {
    let km = weighted_kmeans(pts, n, seed, KMEANS_ITERATIONS)?;
    let k = pts.dims;
    let mut covs: Vec<Packed<f64>> = vec![[0.0; 6]; n];
    for (i, x) in pts.positions.iter().enumerate() {
        let c = km.assignment[i];
        let m = &km.centroids[c];
        for a in 0..k {
            for b in 0..=a {
                covs[c][pidx(a, b)] += pts.masses[i] * (x[a] - m[a]) * (x[b] - m[b]);
            }
        }
    }
    Ok((0..n)
        .map(|c| {
            let mut g = Gaussian::zeroed(k);
            g.weight = km.masses[c];
            g.position = km.centroids[c];
            let mut cov = covs[c];
            if km.masses[c] > 0.0 {
                cov.iter_mut().for_each(|v| *v /= km.masses[c]);
            }
            g.covariance = clamp_eigenvalues(&cov, k, INPUT_COVARIANCE_FLOOR);
            g
        })
        .collect())
}

/// k-means followed by a single EM step. Weights sum to the point mass.
pub fn fit_points(pts: &WeightedPointSet, n: usize, seed: u64) -> Result<Vec<Gaussian>> {
    let init = clusters_to_mixture(pts, n, seed)?;
    weighted_em_step(pts, &init)
}

/// Variance of a unit-width uniform distribution, the spread of one pixel.
const PIXEL_VARIANCE: f64 = 1.0 / 12.0;

/// Fits `n` Gaussians to the pixel masses. Every covariance gets the pixel's
/// own footprint added, since a pixel covers a unit square rather than a
/// point.
pub fn fit_image_mixture(image: &Image, n: usize, seed: u64) -> Result<Vec<Gaussian>> {
    let mut gs = fit_points(&image.to_points()?, n, seed)?;
    for g in &mut gs {
        g.covariance[pidx(0, 0)] += PIXEL_VARIANCE;
        g.covariance[pidx(1, 1)] += PIXEL_VARIANCE;
    }
    Ok(gs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointFitMethod {
    /// k-means and one EM step.
    Kmeans,
    /// k-means and EM to convergence.
    KmeansEm,
    /// Random points as means and EM to convergence.
    RandEm,
}

impl std::str::FromStr for PointFitMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(PointFitMethod::Kmeans),
            "kmeans+em" | "kmeans-em" => Ok(PointFitMethod::KmeansEm),
            "rand+em" | "rand-em" => Ok(PointFitMethod::RandEm),
            other => Err(Error::InvalidArgument(format!("unknown fitting method {other}"))),
        }
    }
}

/// Mass-weighted covariance of the whole set, floored.
fn global_covariance(pts: &WeightedPointSet) -> Packed<f64> {
    let k = pts.dims;
    let total = pts.total_mass();
    let mut m = [0.0; 3];
    for (x, w) in pts.positions.iter().zip(&pts.masses) {
        for d in 0..k {
            m[d] += w * x[d] / total;
        }
    }
    let mut cov = [0.0; 6];
    for (x, w) in pts.positions.iter().zip(&pts.masses) {
        for a in 0..k {
            for b in 0..=a {
                cov[pidx(a, b)] += w * (x[a] - m[a]) * (x[b] - m[b]) / total;
            }
        }
    }
    clamp_eigenvalues(&cov, k, INPUT_COVARIANCE_FLOOR)
}

pub fn fit_pointcloud_mixture(pts: &WeightedPointSet, n: usize, method: PointFitMethod, seed: u64) -> Result<Vec<Gaussian>> {
    if pts.len() < n {
        return Err(Error::InvalidArgument(format!("{} points for {n} components", pts.len())));
    }
    match method {
        PointFitMethod::Kmeans => fit_points(pts, n, seed),
        PointFitMethod::KmeansEm => {
            let init = clusters_to_mixture(pts, n, seed)?;
            Ok(em_until_converged(pts, &init, EM_TOLERANCE, EM_MAX_ITERATIONS)?.mixture)
        }
        PointFitMethod::RandEm => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cov = global_covariance(pts);
            let w = pts.total_mass() / n as f64;
            let init: Vec<Gaussian> = sample(&mut rng, pts.len(), n)
                .into_iter()
                .map(|i| {
                    let mut g = Gaussian::zeroed(pts.dims);
                    g.weight = w;
                    g.position = pts.positions[i];
                    g.covariance = cov;
                    g
                })
                .collect();
            Ok(em_until_converged(pts, &init, EM_TOLERANCE, EM_MAX_ITERATIONS)?.mixture)
        }
    }
}

/// Global weight scale fixed on the training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub weight_scale: f64,
}

impl Normalization {
    /// Rescales every sample's domain, then multiplies all weights by the
    /// stored scale.
    pub fn apply(&self, data: &MixtureBatch) -> Result<MixtureBatch> {
        let (mut out, _) = rescale_domain(data)?;
        for g in out.gaussians_mut() {
            g.weight *= self.weight_scale;
        }
        Ok(out)
    }
}

/// Rescales every sample and picks the weight scale that makes the mean
/// integral over the training set one.
pub fn normalize_dataset(train: &MixtureBatch) -> Result<(MixtureBatch, Normalization)> {
    if train.batch() == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let integrals = mixture_integral(train);
    let mean = integrals.iter().sum::<f64>() / train.batch() as f64;
    if mean == 0.0 || !mean.is_finite() {
        return Err(Error::ZeroMeanIntegral);
    }
    let norm = Normalization {
        weight_scale: 1.0 / mean,
    };
    Ok((norm.apply(train)?, norm))
}
