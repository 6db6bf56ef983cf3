//! Mass-weighted k-means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::check_dims;

/// Points with non-negative masses.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedPointSet {
    pub dims: usize,
    pub positions: Vec<[f64; 3]>,
    pub masses: Vec<f64>,
}

impl WeightedPointSet {
    pub fn new(dims: usize, positions: Vec<[f64; 3]>, masses: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if positions.len() != masses.len() {
            return Err(Error::DimensionMismatch {
                expected: positions.len(),
                got: masses.len(),
            });
        }
        if masses.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidArgument("masses must be finite and non-negative".into()));
        }
        if masses.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument("point set has no mass".into()));
        }
        Ok(WeightedPointSet {
            dims,
            positions,
            masses,
        })
    }

    /// Unit-mass points.
    pub fn uniform(dims: usize, positions: Vec<[f64; 3]>) -> Result<Self> {
        let n = positions.len();
        Self::new(dims, positions, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }
}

pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<[f64; 3]>,
    pub assignment: Vec<usize>,
    /// Mass per cluster.
    pub masses: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    /// Weighted within-cluster sum of squared distances.
    pub fn sse(&self, pts: &WeightedPointSet) -> f64 {
        pts.positions
            .iter()
            .zip(&pts.masses)
            .zip(&self.assignment)
            .map(|((p, m), &c)| m * dist2(p, &self.centroids[c]))
            .sum()
    }
}

fn nearest(p: &[f64; 3], centroids: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (c, ctr) in centroids.iter().enumerate() {
        let d = dist2(p, ctr);
        if d < bd {
            bd = d;
            best = c;
        }
    }
    best
}

/// Lloyd iterations on mass-weighted centroids, seeded by farthest-point
/// sampling from a mass-proportional random first point. Clusters left
/// without mass are moved to the point farthest from its centroid. With fewer
/// distinct points than `n` some centroids coincide and stay empty.
pub fn weighted_kmeans(pts: &WeightedPointSet, n: usize, seed: u64, iters: usize) -> Result<KMeans> {
    let live: Vec<usize> = (0..pts.len()).filter(|&i| pts.masses[i] > 0.0).collect();
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one cluster".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = live.iter().map(|&i| pts.masses[i]).sum();
    let mut u = rng.gen::<f64>() * total;
    let mut first = *live.last().expect("non-empty");
    for &i in &live {
        u -= pts.masses[i];
        if u <= 0.0 {
            first = i;
            break;
        }
    }
    let mut centroids = vec![pts.positions[first]];
    let mut min_d: Vec<f64> = pts.positions.iter().map(|p| dist2(p, &pts.positions[first])).collect();
    while centroids.len() < n {
        let mut best = live[0];
        for &i in &live {
            if min_d[i] > min_d[best] {
                best = i;
            }
        }
        let c = pts.positions[best];
        centroids.push(c);
        for (d, p) in min_d.iter_mut().zip(&pts.positions) {
            *d = d.min(dist2(p, &c));
        }
    }

    let mut assignment = vec![usize::MAX; pts.len()];
    let mut masses = vec![0.0; n];
    let mut iterations = 0;
    for _ in 0..iters.max(1) {
        iterations += 1;
        let mut changed = false;
        for (i, p) in pts.positions.iter().enumerate() {
            let c = nearest(p, &centroids);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![[0.0; 3]; n];
        masses = vec![0.0; n];
        for (i, p) in pts.positions.iter().enumerate() {
            let c = assignment[i];
            masses[c] += pts.masses[i];
            for d in 0..3 {
                sums[c][d] += pts.masses[i] * p[d];
            }
        }
        let mut reseeded = false;
        for c in 0..n {
            if masses[c] > 0.0 {
                for d in 0..3 {
                    centroids[c][d] = sums[c][d] / masses[c];
                }
            }
        }
        for c in 0..n {
            if masses[c] > 0.0 {
                continue;
            }
            let mut far = live[0];
            let mut fd = -1.0;
            for &i in &live {
                let d = dist2(&pts.positions[i], &centroids[assignment[i]]);
                if d > fd {
                    fd = d;
                    far = i;
                }
            }
            if fd > 0.0 {
                centroids[c] = pts.positions[far];
                reseeded = true;
            }
        }
        if !changed && !reseeded {
            break;
        }
    }
    // final assignment consistent with the returned centroids
    masses = vec![0.0; n];
    for (i, p) in pts.positions.iter().enumerate() {
        assignment[i] = nearest(p, &centroids);
        masses[assignment[i]] += pts.masses[i];
    }
    Ok(KMeans {
        centroids,
        assignment,
        masses,
        iterations,
    })
}
