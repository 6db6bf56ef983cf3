//! One expectation-maximization step between two mixtures.
//!
//! Targets play the role of samples. Each target contributes with a
//! likelihood raised to its share of virtual samples, so heavier targets pull
//! harder. Everything is generic over [`Real`] so the same code can be
//! replayed on taped scalars for the backward pass.

use crate::gaussian::{log_density_with_factor, Gaussian};
use crate::linalg::{self, pidx, Real};

/// Scale of the per-target virtual sample counts `ŵᵢ = n_virtual·wᵢ/Σw`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VirtualSampleConfig {
    pub n_virtual: f64,
}

impl Default for VirtualSampleConfig {
    fn default() -> Self {
        VirtualSampleConfig { n_virtual: 100.0 }
    }
}

/// Row-major `targets × fits` responsibility matrix.
#[derive(Clone, Debug)]
pub struct Responsibilities<T> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
    /// Rows that fell back to `1/S` because every fit had zero likelihood.
    pub uniform_rows: usize,
}

impl<T: Copy> Responsibilities<T> {
    pub fn get(&self, i: usize, s: usize) -> T {
        self.values[i * self.cols + s]
    }
}

/// Added to a fitted covariance whose Cholesky pivot collapses.
pub const COVARIANCE_FLOOR: f64 = 1e-6;
pub const MIN_PIVOT: f64 = 1e-9;
/// Fits whose mass falls below this fraction of the target mass count as
/// starved. Keeping them would put `1/w` factors near the underflow limit
/// into the backward pass.
pub const NEGLIGIBLE_FIT_MASS: f64 = 1e-12;

/// `rᵢₛ ∝ wₛ · [N(μᵢ | μₛ, Σₛ) · exp(−½ tr(Σₛ⁻¹ Σᵢ))]^ŵᵢ`, computed in log
/// space. Zero-weight fits get zero responsibility.
pub fn em_responsibilities<T: Real>(
    targets: &[Gaussian<T>],
    fits: &[Gaussian<T>],
    cfg: &super::VirtualSampleConfig,
) -> crate::Result<Responsibilities<T>> {
    let k = fits.first().map_or(2, |g| g.dims);
    let factors = fits
        .iter()
        .map(|f| f.cholesky())
        .collect::<crate::Result<Vec<_>>>()?;
    let mut total = T::zero();
    for t in targets {
        total = total + t.weight;
    }
    let s_n = fits.len();
    let mut values = Vec::with_capacity(targets.len() * s_n);
    let mut uniform_rows = 0;
    let mut logs: Vec<Option<T>> = vec![None; s_n];
    for t in targets {
        let w_hat = if total.val() > 0.0 {
            T::cst(cfg.n_virtual) * t.weight / total
        } else {
            T::zero()
        };
        let mut max = f64::NEG_INFINITY;
        for (s, f) in fits.iter().enumerate() {
            logs[s] = if f.weight.val() > 0.0 {
                let l = &factors[s];
                let ll = log_density_with_factor(&f.position, l, &t.position, k)
                    - T::cst(0.5) * linalg::chol_trace_solve(l, &t.covariance, k);
                let v = w_hat * ll + f.weight.ln();
                max = max.max(v.val());
                Some(v)
            } else {
                None
            };
        }
        if !max.is_finite() {
            uniform_rows += 1;
            values.extend(std::iter::repeat(T::cst(1.0 / s_n as f64)).take(s_n));
            continue;
        }
        let m = T::cst(max);
        let exps: Vec<Option<T>> = logs.iter().map(|l| l.map(|v| (v - m).exp())).collect();
        let mut denom = T::zero();
        for e in exps.iter().flatten() {
            denom = denom + *e;
        }
        for e in exps {
            values.push(match e {
                Some(e) => e / denom,
                None => T::zero(),
            });
        }
    }
    Ok(Responsibilities {
        rows: targets.len(),
        cols: s_n,
        values,
        uniform_rows,
    })
}

/// M step: moment-matched merge of the targets into each fit. A fit that
/// receives no mass (below [`NEGLIGIBLE_FIT_MASS`] of the total) keeps the
/// position and covariance of `init` with weight 0.
pub fn em_m_step<T: Real>(
    targets: &[Gaussian<T>],
    r: &Responsibilities<T>,
    init: &[Gaussian<T>],
) -> Vec<Gaussian<T>> {
    let k = init.first().map_or(2, |g| g.dims);
    let mut out = Vec::with_capacity(r.cols);
    let total: f64 = targets.iter().map(|t| t.weight.val().max(0.0)).sum();
    for s in 0..r.cols {
        let mut w = T::zero();
        for (i, t) in targets.iter().enumerate() {
            w = w + r.get(i, s) * t.weight;
        }
        if !(w.val() > 0.0) || w.val() <= NEGLIGIBLE_FIT_MASS * total {
            out.push(Gaussian {
                weight: T::zero(),
                ..init[s]
            });
            continue;
        }
        let shares: Vec<T> = targets
            .iter()
            .enumerate()
            .map(|(i, t)| r.get(i, s) * t.weight / w)
            .collect();
        let mut mu = [T::zero(); 3];
        for (t, a) in targets.iter().zip(&shares) {
            for d in 0..k {
                mu[d] = mu[d] + *a * t.position[d];
            }
        }
        let mut cov = [T::zero(); 6];
        for (t, a) in targets.iter().zip(&shares) {
            let mut diff = [T::zero(); 3];
            for d in 0..k {
                diff[d] = t.position[d] - mu[d];
            }
            for i in 0..k {
                for j in 0..=i {
                    let q = pidx(i, j);
                    cov[q] = cov[q] + *a * (t.covariance[q] + diff[i] * diff[j]);
                }
            }
        }
        let needs_floor = match linalg::cholesky(&cov, k) {
            Some(l) => linalg::chol_min_pivot(&l, k) < MIN_PIVOT,
            None => true,
        };
        if needs_floor {
            for d in 0..k {
                let q = pidx(d, d);
                cov[q] = cov[q] + T::cst(COVARIANCE_FLOOR);
            }
        }
        out.push(Gaussian {
            dims: k,
            weight: w,
            position: mu,
            covariance: cov,
        });
    }
    out
}

/// One full EM step from `init`.
pub fn em_step<T: Real>(
    targets: &[Gaussian<T>],
    init: &[Gaussian<T>],
    cfg: &super::VirtualSampleConfig,
) -> crate::Result<Vec<Gaussian<T>>> {
    let r = em_responsibilities(targets, init, cfg)?;
    Ok(em_m_step(targets, &r, init))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::random_gaussian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use twofloat::TwoFloat;

    fn std2(w: f64, x: f64, y: f64) -> Gaussian {
        Gaussian::isotropic(w, &[x, y], 1.0).unwrap()
    }

    fn random_targets(rng: &mut impl Rng, n: usize) -> Vec<Gaussian> {
        (0..n)
            .map(|_| {
                let mut g = random_gaussian(rng, 2);
                g.weight = rng.gen_range(0.0..2.0);
                g
            })
            .collect()
    }

    #[test]
    fn identical_fits_split_evenly() {
        let targets = vec![std2(1.0, 0.0, 0.0), std2(2.0, 3.0, 1.0), std2(0.5, -1.0, 4.0)];
        let f = std2(1.0, 1.0, 1.0);
        let r = em_responsibilities(&targets, &[f, f], &VirtualSampleConfig::default()).unwrap();
        assert!(r.values.iter().all(|v| (*v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn single_fit_takes_everything() {
        let targets = vec![std2(1.0, 0.0, 0.0), std2(2.0, 30.0, 1.0)];
        let r = em_responsibilities(&targets, &[std2(1.0, 0.0, 0.0)], &VirtualSampleConfig::default()).unwrap();
        assert!(r.values.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn zero_weight_fits_give_uniform_rows() {
        let targets = vec![std2(1.0, 0.0, 0.0)];
        let r = em_responsibilities(
            &targets,
            &[std2(0.0, 0.0, 0.0), std2(0.0, 1.0, 0.0)],
            &VirtualSampleConfig::default(),
        )
        .unwrap();
        assert_eq!(r.uniform_rows, 1);
        assert_eq!(r.values, vec![0.5, 0.5]);
    }

    #[test]
    fn symmetric_merge() {
        let targets = vec![std2(1.0, 1.0, 0.0), std2(1.0, -1.0, 0.0)];
        let r = Responsibilities {
            rows: 2,
            cols: 1,
            values: vec![1.0, 1.0],
            uniform_rows: 0,
        };
        let out = em_m_step(&targets, &r, &[std2(1.0, 0.0, 0.0)]);
        assert_eq!(out[0].weight, 2.0);
        assert_eq!(&out[0].position[..2], &[0.0, 0.0]);
        assert_eq!(&out[0].covariance[..3], &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn single_target_single_fit_is_identity() {
        let t = Gaussian::new(1.3, &[0.4, -0.2], &[1.2, 0.3, 0.8]).unwrap();
        let out = em_step(&[t], &[t], &VirtualSampleConfig::default()).unwrap();
        assert!((out[0].weight - t.weight).abs() < 1e-15);
        for d in 0..2 {
            assert!((out[0].position[d] - t.position[d]).abs() < 1e-15);
        }
        for d in 0..3 {
            assert!((out[0].covariance[d] - t.covariance[d]).abs() < 1e-15);
        }
    }

    #[test]
    fn starved_fit_keeps_init_with_zero_weight() {
        let targets = vec![std2(1.0, 0.0, 0.0)];
        let r = Responsibilities {
            rows: 1,
            cols: 2,
            values: vec![1.0, 0.0],
            uniform_rows: 0,
        };
        let init = [std2(1.0, 0.0, 0.0), std2(0.7, 5.0, 5.0)];
        let out = em_m_step(&targets, &r, &init);
        assert_eq!(out[1].weight, 0.0);
        assert_eq!(out[1].position, init[1].position);
        assert_eq!(out[1].covariance, init[1].covariance);
    }

    #[test]
    fn coincident_point_targets_are_floored() {
        let mut t = std2(1.0, 0.0, 0.0);
        t.covariance = [1e-20, 0.0, 1e-20, 0.0, 0.0, 0.0];
        let r = Responsibilities {
            rows: 2,
            cols: 1,
            values: vec![1.0, 1.0],
            uniform_rows: 0,
        };
        let out = em_m_step(&[t, t], &r, &[std2(1.0, 0.0, 0.0)]);
        assert!(out[0].cholesky().is_ok());
        assert!(out[0].covariance[0] >= COVARIANCE_FLOOR);
    }

    #[test]
    fn rows_normalize_mass_is_conserved_and_covariances_are_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let n = rng.gen_range(2..12);
            let s = rng.gen_range(1..n);
            let targets = random_targets(&mut rng, n);
            let init: Vec<_> = targets[..s].to_vec();
            let r = em_responsibilities(&targets, &init, &VirtualSampleConfig::default()).unwrap();
            for i in 0..n {
                let row: f64 = (0..s).map(|j| r.get(i, j)).sum();
                assert!((row - 1.0).abs() < 1e-9);
            }
            let out = em_m_step(&targets, &r, &init);
            let before: f64 = targets.iter().map(|g| g.weight).sum();
            let after: f64 = out.iter().map(|g| g.weight).sum();
            assert!((before - after).abs() <= 1e-9 * before);
            assert!(out.iter().all(|g| g.cholesky().is_ok()));
        }
    }

    fn tf(v: f64) -> TwoFloat {
        TwoFloat::from(v)
    }

    /// Responsibilities and M step for 2D, written out with explicit 2×2
    /// inverses in double-double arithmetic.
    fn extended_precision_em(targets: &[Gaussian], fits: &[Gaussian], n_virtual: f64) -> (Vec<Vec<f64>>, Vec<[f64; 6]>) {
        let total = targets.iter().fold(tf(0.0), |a, t| a + tf(t.weight));
        let two_pi = tf(2.0) * TwoFloat::from(std::f64::consts::PI);
        let mut rows = Vec::new();
        for t in targets {
            let w_hat = tf(n_virtual) * tf(t.weight) / total;
            let mut logs = Vec::new();
            for f in fits {
                let (a, b, c) = (tf(f.covariance[0]), tf(f.covariance[1]), tf(f.covariance[2]));
                let det = a * c - b * b;
                let (ia, ib, ic) = (c / det, -b / det, a / det);
                let dx = tf(t.position[0]) - tf(f.position[0]);
                let dy = tf(t.position[1]) - tf(f.position[1]);
                let q = ia * dx * dx + tf(2.0) * ib * dx * dy + ic * dy * dy;
                let tr = ia * tf(t.covariance[0]) + tf(2.0) * ib * tf(t.covariance[1]) + ic * tf(t.covariance[2]);
                let log_n = -(two_pi.ln()) - tf(0.5) * det.ln() - tf(0.5) * q;
                logs.push(w_hat * (log_n - tf(0.5) * tr) + tf(f.weight).ln());
            }
            let m = logs.iter().fold(f64::NEG_INFINITY, |a, l| a.max(f64::from(*l)));
            let exps: Vec<TwoFloat> = logs.iter().map(|l| (*l - tf(m)).exp()).collect();
            let den = exps.iter().fold(tf(0.0), |a, e| a + *e);
            rows.push(exps.iter().map(|e| *e / den).collect::<Vec<TwoFloat>>());
        }
        let mut fitted = Vec::new();
        for s in 0..fits.len() {
            let w = targets.iter().zip(&rows).fold(tf(0.0), |a, (t, r)| a + r[s] * tf(t.weight));
            let mut mu = [tf(0.0), tf(0.0)];
            for (t, r) in targets.iter().zip(&rows) {
                let share = r[s] * tf(t.weight) / w;
                mu[0] += share * tf(t.position[0]);
                mu[1] += share * tf(t.position[1]);
            }
            let mut cov = [tf(0.0); 3];
            for (t, r) in targets.iter().zip(&rows) {
                let share = r[s] * tf(t.weight) / w;
                let d = [tf(t.position[0]) - mu[0], tf(t.position[1]) - mu[1]];
                cov[0] += share * (tf(t.covariance[0]) + d[0] * d[0]);
                cov[1] += share * (tf(t.covariance[1]) + d[1] * d[0]);
                cov[2] += share * (tf(t.covariance[2]) + d[1] * d[1]);
            }
            fitted.push([
                f64::from(w),
                f64::from(mu[0]),
                f64::from(mu[1]),
                f64::from(cov[0]),
                f64::from(cov[1]),
                f64::from(cov[2]),
            ]);
        }
        let rows = rows
            .into_iter()
            .map(|r| r.into_iter().map(f64::from).collect())
            .collect();
        (rows, fitted)
    }

    #[test]
    fn matches_extended_precision_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cfg = VirtualSampleConfig::default();
        for _ in 0..50 {
            let n = rng.gen_range(2..9);
            let s = rng.gen_range(1..=n.min(4));
            let targets = random_targets(&mut rng, n);
            let init = targets[..s].to_vec();
            if init.iter().any(|g| g.weight == 0.0) {
                continue;
            }
            let r = em_responsibilities(&targets, &init, &cfg).unwrap();
            let out = em_m_step(&targets, &r, &init);
            let (rows, fitted) = extended_precision_em(&targets, &init, cfg.n_virtual);
            for i in 0..n {
                for j in 0..s {
                    assert!((r.get(i, j) - rows[i][j]).abs() < 1e-9, "r[{i}][{j}]");
                }
            }
            for (g, f) in out.iter().zip(&fitted) {
                if f[0] <= 1e-12 {
                    continue;
                }
                let got = [g.weight, g.position[0], g.position[1], g.covariance[0], g.covariance[1], g.covariance[2]];
                for (a, b) in got.iter().zip(f) {
                    assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{a} vs {b}");
                }
            }
        }
    }
}
