//! Fitting benchmark: speed and accuracy of the activation and reduction
//! methods on random signed mixtures.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{fitting_errors, least_squares_relu_fit, relu_dense_fit, DenseFitConfig, FittingErrors, SampleSet};
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::linalg::{packed_len, pidx};
use crate::reduce::{reduce, ReductionConfig, ReductionMethod};

/// `n` Gaussians with uniform positions in a box whose volume grows with
/// `n`, random SPD covariances, and weights of magnitude 0.2 to 1.5 that
/// are negative with probability `negative`.
pub fn random_mixture(rng: &mut impl Rng, n: usize, dims: usize, negative: f64) -> Vec<Gaussian> {
    let half = 0.5 * (n as f64).powf(1.0 / dims as f64);
    (0..n)
        .map(|_| {
            let mut g = Gaussian::zeroed(dims);
            g.weight = rng.gen_range(0.2..1.5);
            if rng.gen_bool(negative) {
                g.weight = -g.weight;
            }
            for d in 0..dims {
                g.position[d] = rng.gen_range(-half..half);
            }
            let a: Vec<f64> = (0..dims * dims).map(|_| rng.gen_range(-0.7..0.7)).collect();
            for i in 0..dims {
                for j in 0..=i {
                    let s: f64 = (0..dims).map(|m| a[i * dims + m] * a[j * dims + m]).sum();
                    g.covariance[pidx(i, j)] = s + if i == j { 0.3 } else { 0.0 };
                }
            }
            debug_assert!(g.covariance[packed_len(dims)..].iter().all(|v| *v == 0.0));
            g
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dims: usize,
    /// Gaussians per input mixture.
    pub components: usize,
    /// Target size of the reductions.
    pub reduce_to: usize,
    pub instances: usize,
    pub rmse_points: usize,
    pub negative_fraction: f64,
    pub seed: u64,
    pub least_squares: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dims: 2,
            components: 256,
            reduce_to: 32,
            instances: 5,
            rmse_points: 2000,
            negative_fraction: 0.4,
            seed: 0,
            least_squares: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodReport {
    pub method: String,
    /// Mean wall time of the method's own step per instance.
    pub seconds: f64,
    /// Mean errors over instances.
    pub rmse: FittingErrors,
    /// Largest number of Gaussians held by the method at once.
    pub peak_cached: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub methods: Vec<MethodReport>,
}

impl BenchReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }
}

struct Acc {
    seconds: f64,
    rmse: FittingErrors,
    peak: usize,
}

impl Acc {
    fn new() -> Self {
        Acc {
            seconds: 0.0,
            rmse: FittingErrors::default(),
            peak: 0,
        }
    }

    fn add(&mut self, seconds: f64, e: FittingErrors, peak: usize) {
        self.seconds += seconds;
        self.rmse.all += e.all;
        self.rmse.relu += e.relu;
        self.rmse.reduction += e.reduction;
        self.peak = self.peak.max(peak);
    }

    fn finish(self, method: &str, n: usize) -> MethodReport {
        let n = n as f64;
        MethodReport {
            method: method.to_string(),
            seconds: self.seconds / n,
            rmse: FittingErrors {
                all: self.rmse.all / n,
                relu: self.rmse.relu / n,
                reduction: self.rmse.reduction / n,
            },
            peak_cached: self.peak,
        }
    }
}

pub const REDUCTION_METHODS: [(&str, ReductionMethod); 3] = [
    ("modified-em", ReductionMethod::ModifiedEm),
    ("treehem-2", ReductionMethod::TreeHem { t: 2 }),
    ("treehem-4", ReductionMethod::TreeHem { t: 4 }),
];

/// Runs every method on `config.instances` random mixtures. Activation
/// methods are timed on their own; reductions are timed on the dense fit
/// output, and their errors cover the whole activation plus reduction.
pub fn bench_fitting(config: &BenchConfig) -> Result<BenchReport> {
    if config.instances == 0 || config.components == 0 || config.reduce_to == 0 {
        return Err(Error::InvalidArgument("benchmark sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dense_cfg = DenseFitConfig::default();
    let mut dense = Acc::new();
    let mut ls = Acc::new();
    let mut reductions: Vec<Acc> = REDUCTION_METHODS.iter().map(|_| Acc::new()).collect();
    for i in 0..config.instances {
        let gs = random_mixture(&mut rng, config.components, config.dims, config.negative_fraction);
        let seed = config.seed.wrapping_add(i as u64);

        let t = Instant::now();
        let fit = relu_dense_fit(&gs, &dense_cfg)?;
        let dt = t.elapsed().as_secs_f64();
        let e = fitting_errors(&gs, &fit.gaussians, &fit.gaussians, config.rmse_points, seed)?;
        dense.add(dt, e, gs.len());

        if config.least_squares {
            let t = Instant::now();
            let l = least_squares_relu_fit(&gs, SampleSet::CentersAndRandom(gs.len()), seed)?;
            let dt = t.elapsed().as_secs_f64();
            let e = fitting_errors(&gs, &l.gaussians, &l.gaussians, config.rmse_points, seed)?;
            ls.add(dt, e, gs.len());
        }

        for ((_, method), acc) in REDUCTION_METHODS.iter().zip(reductions.iter_mut()) {
            let cfg = ReductionConfig {
                method: *method,
                ..Default::default()
            };
            let t = Instant::now();
            let (out, record) = reduce(&fit.gaussians, config.reduce_to, &cfg)?;
            let dt = t.elapsed().as_secs_f64();
            let e = fitting_errors(&gs, &fit.gaussians, &out, config.rmse_points, seed)?;
            acc.add(dt, e, record.cached_gaussians());
        }
    }
    let mut methods = vec![dense.finish("dense", config.instances)];
    if config.least_squares {
        methods.push(ls.finish("least-squares", config.instances));
    }
    for ((name, _), acc) in REDUCTION_METHODS.iter().zip(reductions) {
        methods.push(acc.finish(name, config.instances));
    }
    Ok(BenchReport {
        config: config.clone(),
        methods,
    })
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "# {}D, N={} -> {}, {} instances, {} RMSE samples",
            c.dims, c.components, c.reduce_to, c.instances, c.rmse_points
        )?;
        writeln!(
            f,
            "{:<14} {:>12} {:>12} {:>12} {:>12} {:>8}",
            "method", "ms", "rmse_all", "rmse_relu", "rmse_reduce", "cached"
        )?;
        for m in &self.methods {
            writeln!(
                f,
                "{:<14} {:>12.4} {:>12.6} {:>12.6} {:>12.6} {:>8}",
                m.method,
                m.seconds * 1e3,
                m.rmse.all,
                m.rmse.relu,
                m.rmse.reduction,
                m.peak_cached
            )?;
        }
        Ok(())
    }
}
