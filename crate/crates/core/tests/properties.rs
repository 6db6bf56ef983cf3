//! Randomized invariants across the public API.

use gmcn::activation::{fitting_rmse, relu_dense_fit, sample_positions, DenseFitConfig};
use gmcn::autodiff::Tape;
use gmcn::gaussian::eval_gaussians;
use gmcn::harness::random_mixture;
use gmcn::input::{em_until_converged, fit_image_mixture, fit_points, Image, WeightedPointSet};
use gmcn::network::{gcl_forward, log_softmax, make_covariance, Model, ModelSpec, Pipeline};
use gmcn::reduce::{reduce, ReductionConfig, ReductionMethod};
use gmcn::{convolve_mixtures, mixture_integral, rescale_domain, Gaussian, MixtureBatch};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mixture(seed: u64, n: usize, dims: usize, negative: f64) -> Vec<Gaussian> {
    random_mixture(&mut ChaCha8Rng::seed_from_u64(seed), n, dims, negative)
}

fn point(rng: &mut ChaCha8Rng, dims: usize) -> Vec<f64> {
    (0..dims).map(|_| rng.gen_range(-3.0..3.0)).collect()
}

fn is_spd(g: &Gaussian) -> bool {
    g.cholesky().is_ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn convolution_counts_commutes_and_multiplies_integrals(seed: u64, n in 1usize..7, m in 1usize..7, dims in 2usize..4) {
        let a = mixture(seed, n, dims, 0.4);
        let b = mixture(seed ^ 1, m, dims, 0.4);
        let ab = convolve_mixtures(&a, &b).unwrap();
        let ba = convolve_mixtures(&b, &a).unwrap();
        prop_assert_eq!(ab.len(), n * m);
        prop_assert!(ab.iter().all(is_spd));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let x = point(&mut rng, dims);
            let (u, v) = (eval_gaussians(&ab, &x).unwrap(), eval_gaussians(&ba, &x).unwrap());
            prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
        }
        let sa: f64 = a.iter().map(|g| g.weight).sum();
        let sb: f64 = b.iter().map(|g| g.weight).sum();
        let sab: f64 = ab.iter().map(|g| g.weight).sum();
        prop_assert!((sab - sa * sb).abs() <= 1e-12 * (1.0 + (sa * sb).abs()));
    }

    #[test]
    fn rescaling_is_a_change_of_variables(seed: u64, n in 1usize..10, dims in 2usize..4) {
        let gs = mixture(seed, n, dims, 0.4);
        let m = MixtureBatch::from_channel(dims, gs.clone()).unwrap();
        let (r, scales) = rescale_domain(&m).unwrap();
        let s = scales[0].0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let x = point(&mut rng, dims);
            let sx: Vec<f64> = x.iter().map(|v| v * s).collect();
            let lhs = eval_gaussians(r.channel(0, 0).unwrap(), &sx).unwrap() * s.powi(dims as i32);
            let rhs = eval_gaussians(&gs, &x).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }
        let mean_trace: f64 = r.gaussians().iter().map(|g| g.trace()).sum::<f64>() / n as f64;
        prop_assert!((mean_trace - dims as f64).abs() < 1e-9);
    }

    #[test]
    fn dense_fit_is_non_negative_and_keeps_geometry(seed: u64, n in 1usize..24, dims in 2usize..4) {
        let gs = mixture(seed, n, dims, 0.5);
        let fit = relu_dense_fit(&gs, &DenseFitConfig::default()).unwrap();
        for (f, g) in fit.gaussians.iter().zip(&gs) {
            prop_assert!(f.weight >= 0.0);
            prop_assert_eq!(f.position, g.position);
            prop_assert_eq!(f.covariance, g.covariance);
        }
        let pts = sample_positions(&gs, 100, seed).unwrap();
        let relu = |x: &[f64]| eval_gaussians(&gs, x).unwrap().max(0.0);
        prop_assert!(fitting_rmse(&fit.gaussians, &relu, &pts).unwrap().is_finite());

        let pos = mixture(seed, n, dims, 0.0);
        prop_assert_eq!(relu_dense_fit(&pos, &DenseFitConfig::default()).unwrap().gaussians, pos);
    }

    #[test]
    fn reductions_are_spd_deterministic_and_identity_when_large(seed: u64, n in 2usize..64, t in 2usize..5, dims in 2usize..4) {
        let gs = mixture(seed, n, dims, 0.0);
        for method in [ReductionMethod::TreeHem { t }, ReductionMethod::ModifiedEm] {
            let cfg = ReductionConfig { method, ..Default::default() };
            let n_p = (n / 3).max(1);
            let (out, _) = reduce(&gs, n_p, &cfg).unwrap();
            prop_assert_eq!(out.len(), n_p);
            prop_assert!(out.iter().all(|g| g.weight >= 0.0 && is_spd(g)));
            prop_assert_eq!(&reduce(&gs, n_p, &cfg).unwrap().0, &out);

            let (same, _) = reduce(&gs, n, &cfg).unwrap();
            let mut a: Vec<_> = same.iter().map(|g| g.weight.to_bits()).collect();
            let mut b: Vec<_> = gs.iter().map(|g| g.weight.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            prop_assert!(gs.iter().all(|g| same.contains(g)));
        }
    }

    #[test]
    fn covariance_factors_always_give_spd(f in prop::collection::vec(-3.0f64..3.0, 9), rank_one: bool, dims in 2usize..4) {
        let mut factor: Vec<f64> = f[..dims * dims].to_vec();
        if rank_one {
            // every row a multiple of the first
            for r in 1..dims {
                for c in 0..dims {
                    factor[r * dims + c] = factor[c] * r as f64;
                }
            }
        }
        let c = make_covariance(&factor, dims, 1e-6);
        let g = Gaussian { dims, weight: 1.0, position: [0.0; 3], covariance: c };
        prop_assert!(is_spd(&g));
    }

    #[test]
    fn log_softmax_is_normalized(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let s: f64 = log_softmax(&v).iter().map(|x| x.exp()).sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_fits_conserve_mass_and_respect_the_floor(seed: u64, n_pts in 20usize..80, n in 1usize..6, dims in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions: Vec<[f64; 3]> = (0..n_pts)
            .map(|_| {
                let mut p = [0.0; 3];
                for v in p.iter_mut().take(dims) {
                    *v = rng.gen_range(-4.0..4.0);
                }
                p
            })
            .collect();
        let masses: Vec<f64> = (0..n_pts).map(|_| rng.gen_range(0.1..2.0)).collect();
        let total: f64 = masses.iter().sum();
        let pts = WeightedPointSet::new(dims, positions, masses).unwrap();
        let gs = fit_points(&pts, n, seed).unwrap();
        let sum: f64 = gs.iter().map(|g| g.weight).sum();
        prop_assert!((sum - total).abs() <= 1e-9 * total);
        let run = em_until_converged(&pts, &gs, 0.0, 10).unwrap();
        for w in run.log_likelihood.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        }
        for g in &run.mixture {
            prop_assert!(g.weight >= 0.0);
            // the smallest eigenvalue is at least the floor when C − floor·I is PSD
            let mut shifted = *g;
            for d in 0..dims {
                shifted.covariance[d * (d + 1) / 2 + d] -= 0.99e-4;
            }
            prop_assert!(is_spd(&shifted));
        }
    }

    #[test]
    fn image_fits_carry_the_image_mass(seed: u64, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<f64> = (0..64).map(|_| if rng.gen_bool(0.4) { rng.gen_range(0.1..1.0) } else { 0.0 }).collect();
        prop_assume!(pixels.iter().filter(|p| **p > 0.0).count() >= n);
        let img = Image::new(8, 8, pixels.clone()).unwrap();
        let gs = fit_image_mixture(&img, n, seed).unwrap();
        let mass: f64 = pixels.iter().sum();
        let sum: f64 = gs.iter().map(|g| g.weight).sum();
        prop_assert!(gs.iter().all(|g| g.weight >= 0.0));
        prop_assert!((sum - mass).abs() <= 1e-9 * mass);
    }
}

#[test]
fn layer_output_counts_follow_the_spec() {
    let spec = ModelSpec::halving(2, 16, &[4, 6], 3, 5);
    let model = Model::new(spec.clone(), 0).unwrap();
    let kernels = model.materialize_kernels().unwrap();
    let mut x = MixtureBatch::new(2, 2, 1, 16, [mixture(1, 16, 2, 0.0), mixture(2, 16, 2, 0.0)].concat()).unwrap();
    let mut tape = Tape::disabled();
    for ((l, k), want) in spec.layers.iter().zip(&kernels).zip(spec.component_counts()) {
        x = gcl_forward(&mut tape, 0, x, k, l, &Pipeline::default()).unwrap();
        assert_eq!(x.shape(), (2, l.f_out, want));
    }
}

#[test]
fn backward_is_linear_in_the_loss_cotangent() {
    let spec = ModelSpec::halving(2, 8, &[2], 3, 4);
    let model = Model::new(spec, 5).unwrap();
    let kernels = model.materialize_kernels().unwrap();
    let x = MixtureBatch::from_channel(2, mixture(3, 8, 2, 0.0)).unwrap();
    let mut tape = Tape::recording();
    let integrals = model.sample_integrals(&kernels, x, &mut tape).unwrap();
    assert_eq!(integrals.len(), 3);

    let zero = tape.backward(&kernels, &[0.0; 3]).unwrap();
    assert!(zero.iter().all(|k| k.packed_params().iter().all(|v| *v == 0.0)));

    let (u, v) = ([1.0, -2.0, 0.5], [0.25, 3.0, -1.0]);
    let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
    let gu = tape.backward(&kernels, &u).unwrap();
    let gv = tape.backward(&kernels, &v).unwrap();
    let gs = tape.backward(&kernels, &sum).unwrap();
    for ((a, b), s) in gu.iter().zip(&gv).zip(&gs) {
        for ((a, b), s) in a.packed_params().iter().zip(b.packed_params()).zip(s.packed_params()) {
            assert!((a + b - s).abs() <= 1e-10 * (1.0 + s.abs()), "{a} + {b} != {s}");
        }
    }
}

#[test]
fn weight_decay_is_non_negative_and_vanishes_at_identity() {
    let mut model = Model::new(ModelSpec::halving(3, 8, &[2], 3, 3), 1).unwrap();
    for k in &model.kernels {
        assert!(k.weight_decay_loss() > 0.0);
    }
    for k in &mut model.kernels {
        let s = (1.0 - k.epsilon).sqrt();
        for g in &mut k.gaussians {
            g.weight = 0.0;
            g.factor = vec![s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, s];
        }
        assert!(k.weight_decay_loss() < 1e-24);
    }
}

#[test]
fn integrals_of_batches_match_per_sample_sums() {
    let gs = [mixture(7, 5, 2, 0.4), mixture(8, 5, 2, 0.4)].concat();
    let m = MixtureBatch::new(2, 2, 1, 5, gs.clone()).unwrap();
    let i = mixture_integral(&m);
    for b in 0..2 {
        let s: f64 = gs[b * 5..(b + 1) * 5].iter().map(|g| g.weight).sum();
        assert!((i[b] - s).abs() < 1e-12);
    }
}
