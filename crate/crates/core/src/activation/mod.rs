//! Fitting mixtures to the ReLU of a mixture.
//!
//! The dense fit keeps positions and covariances and only re-weights
//! components: negative weights are replaced by a small positive ε, then each
//! weight is corrected by the ratio between the ReLU of the original mixture
//! and the coarse mixture, both evaluated at that component's mean.

mod least_squares;
mod rmse;

pub use least_squares::{least_squares_relu_fit, LeastSquaresFit, SampleSet};
pub use rmse::{fitting_errors, fitting_rmse, sample_positions, FittingErrors, SamplePoints};

use crate::error::Result;
use crate::gaussian::{unit_eval_cov_grad, Gaussian, PreparedGaussian};
use crate::linalg::Vector;

/// Dense fit tuning.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DenseFitConfig {
    /// ε = `epsilon_floor · max(max |aᵢ|, 1)` stands in for non-positive weights.
    pub epsilon_floor: f64,
    /// Components whose coarse-mixture value falls below this get weight 0.
    pub eval_clamp: f64,
}

impl Default for DenseFitConfig {
    fn default() -> Self {
        DenseFitConfig {
            epsilon_floor: 1e-6,
            eval_clamp: 1e-12,
        }
    }
}

/// Nonlinearity used between convolution and reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    DenseFit,
    /// Clamps weights to be non-negative. Only useful as an ablation.
    ParameterSpace,
}

/// Result of [`relu_dense_fit`], including what its backward needs.
#[derive(Clone, Debug)]
pub struct DenseFit {
    pub gaussians: Vec<Gaussian>,
    /// Coarse weights a′.
    pub coarse: Vec<f64>,
    /// gm(Bᵢ; a) per component.
    pub target: Vec<f64>,
    /// gm(Bᵢ; a′) per component.
    pub approx: Vec<f64>,
    pub epsilon: f64,
    /// Index of the weight that set ε, when ε depends on the weights.
    pub epsilon_source: Option<usize>,
    /// Number of components zeroed by the denominator clamp.
    pub clamped: usize,
}

fn epsilon_of(weights: &[f64], cfg: &DenseFitConfig) -> (f64, Option<usize>) {
    let mut best = 1.0;
    let mut src = None;
    for (i, a) in weights.iter().enumerate() {
        if a.abs() > best {
            best = a.abs();
            src = Some(i);
        }
    }
    (cfg.epsilon_floor * best, src)
}

/// Dense ReLU fit of one channel mixture.
pub fn relu_dense_fit(gs: &[Gaussian], cfg: &DenseFitConfig) -> Result<DenseFit> {
    let prepared = gs.iter().map(PreparedGaussian::new).collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = gs.iter().map(|g| g.weight).collect();
    let (epsilon, epsilon_source) = epsilon_of(&weights, cfg);
    let coarse: Vec<f64> = weights.iter().map(|&a| if a > 0.0 { a } else { epsilon }).collect();

    let n = gs.len();
    let mut target = vec![0.0; n];
    let mut approx = vec![0.0; n];
    for (i, gi) in gs.iter().enumerate() {
        let mut s = 0.0;
        let mut t = 0.0;
        for (j, pj) in prepared.iter().enumerate() {
            let v = pj.unit_eval(&gi.position);
            s += weights[j] * v;
            t += coarse[j] * v;
        }
        target[i] = s;
        approx[i] = t;
    }

    let mut out = gs.to_vec();
    let mut clamped = 0;
    for i in 0..n {
        out[i].weight = if approx[i] < cfg.eval_clamp {
            clamped += 1;
            0.0
        } else {
            coarse[i] * (target[i].max(0.0) / approx[i])
        };
    }
    if clamped > 0 {
        log::debug!("dense fit clamped {clamped} of {n} components");
    }
    Ok(DenseFit {
        gaussians: out,
        coarse,
        target,
        approx,
        epsilon,
        epsilon_source,
        clamped,
    })
}

/// Backward of [`relu_dense_fit`]. `grad_out` is the cotangent of the fitted
/// mixture; positions and covariances pass straight through and also pick up
/// the dependence of every pairwise evaluation on them.
pub fn relu_dense_fit_backward(
    gs: &[Gaussian],
    fit: &DenseFit,
    cfg: &DenseFitConfig,
    grad_out: &[Gaussian],
) -> Result<Vec<Gaussian>> {
    let n = gs.len();
    let k = gs.first().map_or(2, |g| g.dims);
    let mut grad = grad_out.to_vec();
    for g in grad.iter_mut() {
        g.weight = 0.0;
    }

    // cotangents of s, t, a′
    let mut gs_ = vec![0.0; n];
    let mut gt = vec![0.0; n];
    let mut ga_coarse = vec![0.0; n];
    for i in 0..n {
        let t = fit.approx[i];
        if t < cfg.eval_clamp {
            continue;
        }
        let go = grad_out[i].weight;
        let s = fit.target[i];
        if s > 0.0 {
            gs_[i] = go * fit.coarse[i] / t;
            ga_coarse[i] += go * s / t;
        }
        gt[i] = -go * fit.gaussians[i].weight / t;
    }

    if gs_.iter().any(|v| *v != 0.0) || gt.iter().any(|v| *v != 0.0) {
        let prepared = gs.iter().map(PreparedGaussian::new).collect::<Result<Vec<_>>>()?;
        let precision: Vec<_> = prepared.iter().map(|p| p.precision()).collect();
        for i in 0..n {
            if gs_[i] == 0.0 && gt[i] == 0.0 {
                continue;
            }
            let x = gs[i].position;
            let mut gx = [0.0; 3];
            for (j, pj) in prepared.iter().enumerate() {
                let v = pj.unit_eval(&x);
                if v == 0.0 {
                    continue;
                }
                grad[j].weight += gs_[i] * v;
                ga_coarse[j] += gt[i] * v;
                let gg = gs_[i] * gs[j].weight + gt[i] * fit.coarse[j];
                if gg == 0.0 {
                    continue;
                }
                let u: Vector<f64> = pj.precision_times_offset(&x);
                for d in 0..k {
                    gx[d] -= gg * v * u[d];
                    grad[j].position[d] += gg * v * u[d];
                }
                let dc = unit_eval_cov_grad(v, &u, &precision[j], k);
                for (c, d) in grad[j].covariance.iter_mut().zip(dc) {
                    *c += gg * d;
                }
            }
            for d in 0..k {
                grad[i].position[d] += gx[d];
            }
        }
    }

    // a′ → a, including the weight that sets ε
    let mut g_eps = 0.0;
    for i in 0..n {
        if gs[i].weight > 0.0 {
            grad[i].weight += ga_coarse[i];
        } else {
            g_eps += ga_coarse[i];
        }
    }
    if let Some(src) = fit.epsilon_source {
        grad[src].weight += g_eps * cfg.epsilon_floor * gs[src].weight.signum();
    }
    Ok(grad)
}

/// Clamps weights to `max(0, a)`, leaving positions and covariances alone.
pub fn parameter_space_relu(gs: &[Gaussian]) -> Vec<Gaussian> {
    gs.iter()
        .map(|g| Gaussian {
            weight: g.weight.max(0.0),
            ..*g
        })
        .collect()
}

/// Backward of [`parameter_space_relu`]; the derivative at 0 is taken as 0.
pub fn parameter_space_relu_backward(gs: &[Gaussian], grad_out: &[Gaussian]) -> Vec<Gaussian> {
    gs.iter()
        .zip(grad_out)
        .map(|(g, go)| Gaussian {
            weight: if g.weight > 0.0 { go.weight } else { 0.0 },
            ..*go
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{eval_gaussians, random_gaussian};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn relu_target(gs: &[Gaussian]) -> impl Fn(&[f64]) -> f64 + '_ {
        move |x| eval_gaussians(gs, x).unwrap().max(0.0)
    }

    #[test]
    fn all_positive_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut gs: Vec<_> = (0..12).map(|_| random_gaussian(&mut rng, 2)).collect();
            for g in gs.iter_mut() {
                g.weight = g.weight.abs() + 0.01;
            }
            let fit = relu_dense_fit(&gs, &DenseFitConfig::default()).unwrap();
            assert_eq!(fit.gaussians, gs);
        }
    }

    #[test]
    fn single_negative_component_vanishes() {
        let g = Gaussian::isotropic(-1.0, &[0.0, 0.0], 1.0).unwrap();
        let fit = relu_dense_fit(&[g], &DenseFitConfig::default()).unwrap();
        assert_eq!(fit.coarse[0], 1e-6);
        assert_eq!(fit.gaussians[0].weight, 0.0);
    }

    #[test]
    fn epsilon_scales_with_largest_weight() {
        let gs = vec![
            Gaussian::isotropic(-4.0, &[0.0, 0.0], 1.0).unwrap(),
            Gaussian::isotropic(0.5, &[3.0, 0.0], 1.0).unwrap(),
        ];
        let fit = relu_dense_fit(&gs, &DenseFitConfig::default()).unwrap();
        assert!((fit.epsilon - 4e-6).abs() < 1e-20);
        assert_eq!(fit.epsilon_source, Some(0));
    }

    #[test]
    fn mixed_sign_fit_is_nonnegative_and_no_worse_than_coarse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = DenseFitConfig::default();
        let mut better = 0;
        let trials = 20;
        for t in 0..trials {
            let gs: Vec<_> = (0..10).map(|_| random_gaussian(&mut rng, 2)).collect();
            let fit = relu_dense_fit(&gs, &cfg).unwrap();
            assert!(fit.gaussians.iter().all(|g| g.weight >= 0.0));
            assert!(fit.gaussians.iter().zip(&gs).all(|(a, b)| a.position == b.position
                && a.covariance == b.covariance));
            let mut coarse = gs.clone();
            for (g, a) in coarse.iter_mut().zip(&fit.coarse) {
                g.weight = *a;
            }
            let pts = sample_positions(&gs, 20_000, t as u64).unwrap();
            let target = relu_target(&gs);
            let e_fit = fitting_rmse(&fit.gaussians, &target, &pts).unwrap();
            let e_coarse = fitting_rmse(&coarse, &target, &pts).unwrap();
            assert!(e_fit.is_finite());
            if e_fit <= e_coarse {
                better += 1;
            }
        }
        assert!(better >= trials * 9 / 10, "{better}/{trials}");
    }

    fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = DenseFitConfig::default();
        let gs: Vec<_> = (0..6).map(|_| random_gaussian(&mut rng, 2)).collect();
        let seeds: Vec<f64> = (0..6).map(|i| 0.3 + 0.1 * i as f64).collect();
        let loss = |gs: &[Gaussian]| -> f64 {
            let fit = relu_dense_fit(gs, &cfg).unwrap();
            fit.gaussians.iter().zip(&seeds).map(|(g, s)| g.weight * s).sum()
        };
        let fit = relu_dense_fit(&gs, &cfg).unwrap();
        let mut go = vec![Gaussian::zeroed(2); 6];
        for (g, s) in go.iter_mut().zip(&seeds) {
            g.weight = *s;
        }
        let grad = relu_dense_fit_backward(&gs, &fit, &cfg, &go).unwrap();
        for i in 0..6 {
            let fd = central_difference(
                |v| {
                    let mut p = gs.clone();
                    p[i].weight = v;
                    loss(&p)
                },
                gs[i].weight,
            );
            assert!((fd - grad[i].weight).abs() < 1e-6 * fd.abs().max(1.0), "weight {i}");
            for d in 0..2 {
                let fd = central_difference(
                    |v| {
                        let mut p = gs.clone();
                        p[i].position[d] = v;
                        loss(&p)
                    },
                    gs[i].position[d],
                );
                assert!((fd - grad[i].position[d]).abs() < 1e-6 * fd.abs().max(1.0));
            }
            for c in 0..3 {
                let fd = central_difference(
                    |v| {
                        let mut p = gs.clone();
                        p[i].covariance[c] = v;
                        loss(&p)
                    },
                    gs[i].covariance[c],
                );
                assert!((fd - grad[i].covariance[c]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn parameter_space_cases() {
        let pos = Gaussian::isotropic(0.5, &[0.0, 0.0], 1.0).unwrap();
        let neg = Gaussian::isotropic(-0.5, &[1.0, 0.0], 1.0).unwrap();
        assert_eq!(parameter_space_relu(&[pos]), vec![pos]);
        assert!(parameter_space_relu(&[neg, neg]).iter().all(|g| g.weight == 0.0));
        let mut go = Gaussian::zeroed(2);
        go.weight = 3.0;
        let g = parameter_space_relu_backward(&[pos, neg], &[go, go]);
        assert_eq!(g[0].weight, 3.0);
        assert_eq!(g[1].weight, 0.0);
    }
}
