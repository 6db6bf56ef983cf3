//! Finite-difference checks of every differentiable operation and of a small
//! two-layer model, each at several random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activation::DenseFitConfig;
use crate::autodiff::gradcheck::{finite_difference_check, GradCheckConfig, GradCheckReport, ParamCheck};
use crate::autodiff::Tape;
use crate::error::Result;
use crate::gaussian::{Gaussian, MixtureBatch};
use crate::network::head::{log_softmax, nll_log_softmax_backward, nll_loss, BatchNorm};
use crate::network::kernels::{make_covariance, make_covariance_backward};
use crate::network::{Model, ModelSpec};
use crate::reduce::{ReductionConfig, ReductionMethod};

/// Outcome of one operation over all points.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub points: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Every compared parameter, over all points.
    pub checks: Vec<ParamCheck>,
}

impl OpCheck {
    fn add(&mut self, r: &GradCheckReport) {
        self.points += 1;
        self.checked += r.checked.len();
        self.skipped += r.skipped.len();
        self.checks.extend_from_slice(&r.checked);
        self.max_rel_error = self.max_rel_error.max(r.max_rel_error());
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Checks whose relative error reaches `tolerance`.
    pub fn violations(&self, tolerance: f64) -> impl Iterator<Item = &ParamCheck> {
        self.checks.iter().filter(move |c| c.rel_error >= tolerance)
    }
}

pub const OPERATIONS: [&str; 10] = [
    "convolution",
    "dense-fit",
    "parameter-relu",
    "tree-hem-2d",
    "tree-hem-3d",
    "modified-em",
    "rescale",
    "integral",
    "covariance",
    "head",
];

fn random_gaussian(rng: &mut ChaCha8Rng, dims: usize, signed: bool) -> Gaussian {
    let mut w = rng.gen_range(0.2..1.5);
    if signed && rng.gen_bool(0.4) {
        w = -w;
    }
    let pos: Vec<f64> = (0..dims).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let a: Vec<f64> = (0..dims * dims).map(|_| rng.gen_range(-0.7..0.7)).collect();
    let mut cov = Vec::new();
    for i in 0..dims {
        for j in 0..=i {
            let mut s: f64 = (0..dims).map(|m| a[i * dims + m] * a[j * dims + m]).sum();
            if i == j {
                s += 0.3;
            }
            cov.push(s);
        }
    }
    Gaussian::new(w, &pos, &cov).expect("random covariance is SPD")
}

fn random_batch(rng: &mut ChaCha8Rng, dims: usize, shape: (usize, usize, usize), signed: bool) -> MixtureBatch {
    let (b, f, n) = shape;
    let gs = (0..b * f * n).map(|_| random_gaussian(rng, dims, signed)).collect();
    MixtureBatch::new(dims, b, f, n, gs).expect("shape is consistent")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cotangent(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Checks a single-input mixture op given as a tape-recording closure; the
/// loss is a random linear functional of the output parameters.
fn check_mixture_op<F>(input: &MixtureBatch, rng: &mut ChaCha8Rng, op: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, MixtureBatch) -> Result<MixtureBatch>,
{
    let (b, f, n) = input.shape();
    let dims = input.dims();
    let mut tape = Tape::recording();
    let out = op(&mut tape, input.clone())?;
    let c = cotangent(rng, out.packed_params().len());
    let grad = MixtureBatch::from_packed_params(dims, out.batch(), out.channels(), out.components(), &c)?;
    let (gin, _) = tape.backward_mixture(&[], grad)?;
    let analytic = gin.packed_params();
    let x0 = input.packed_params();
    let eval = |x: &[f64]| -> Result<(f64, u64)> {
        let m = MixtureBatch::from_packed_params(dims, b, f, n, x)?;
        let mut t = Tape::recording();
        let out = op(&mut t, m)?;
        Ok((dot(&c, &out.packed_params()), t.fingerprint()))
    };
    let idx: Vec<usize> = (0..x0.len()).collect();
    finite_difference_check(eval, &x0, &analytic, &idx, cfg)
}

fn check_convolution(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let dims = if rng.gen_bool(0.5) { 2 } else { 3 };
    let input = random_batch(rng, dims, (1, 2, 3), true);
    let kernels = random_batch(rng, dims, (2, 2, 2), true);
    let ni = input.packed_params().len();
    let mut tape = Tape::recording();
    let out = tape.convolution(0, input.clone(), &kernels)?;
    let c = cotangent(rng, out.packed_params().len());
    let grad = MixtureBatch::from_packed_params(dims, 1, 2, out.components(), &c)?;
    let (gin, gk) = tape.backward_mixture(&[kernels.clone()], grad)?;
    let mut analytic = gin.packed_params();
    analytic.extend(gk[0].packed_params());
    let mut x0 = input.packed_params();
    x0.extend(kernels.packed_params());
    let eval = |x: &[f64]| -> Result<(f64, u64)> {
        let i = MixtureBatch::from_packed_params(dims, 1, 2, 3, &x[..ni])?;
        let k = MixtureBatch::from_packed_params(dims, 2, 2, 2, &x[ni..])?;
        let out = crate::gaussian::convolution_layer(&i, &k)?;
        Ok((dot(&c, &out.packed_params()), 0))
    };
    let idx: Vec<usize> = (0..x0.len()).collect();
    finite_difference_check(eval, &x0, &analytic, &idx, cfg)
}

fn check_covariance(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let k = if rng.gen_bool(0.5) { 2 } else { 3 };
    let factor: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c = cotangent(rng, k * (k + 1) / 2);
    let mut g = [0.0; 6];
    g[..c.len()].copy_from_slice(&c);
    let analytic = make_covariance_backward(&factor, k, &g);
    let eval = |x: &[f64]| -> Result<(f64, u64)> { Ok((dot(&c, &make_covariance(x, k, 0.01)[..c.len()]), 0)) };
    let idx: Vec<usize> = (0..factor.len()).collect();
    finite_difference_check(eval, &factor, &analytic, &idx, cfg)
}

fn check_head(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (b_n, c_n) = (4, 3);
    let mut bn = BatchNorm::new(c_n);
    for c in 0..c_n {
        bn.gamma[c] = rng.gen_range(0.5..1.5);
        bn.beta[c] = rng.gen_range(-0.5..0.5);
    }
    let training = rng.gen_bool(0.5);
    let labels: Vec<usize> = (0..b_n).map(|_| rng.gen_range(0..c_n)).collect();
    let x: Vec<f64> = (0..b_n * c_n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let rows = |x: &[f64]| -> Vec<Vec<f64>> { x.chunks(c_n).map(|r| r.to_vec()).collect() };
    let (y, cache, _) = bn.forward(&rows(&x), training)?;
    let lp: Vec<Vec<f64>> = y.iter().map(|r| log_softmax(r)).collect();
    let (dx, _, _) = bn.backward(&cache, &nll_log_softmax_backward(&lp, &labels));
    let analytic: Vec<f64> = dx.concat();
    let eval = |x: &[f64]| -> Result<(f64, u64)> {
        let (y, _, _) = bn.forward(&rows(x), training)?;
        let lp: Vec<Vec<f64>> = y.iter().map(|r| log_softmax(r)).collect();
        Ok((nll_loss(&lp, &labels)?, 0))
    };
    let idx: Vec<usize> = (0..x.len()).collect();
    finite_difference_check(eval, &x, &analytic, &idx, cfg)
}

fn check_op(name: &str, rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let dense = DenseFitConfig::default();
    match name {
        "convolution" => check_convolution(rng, cfg),
        "dense-fit" => {
            let x = random_batch(rng, 2, (1, 1, 6), true);
            check_mixture_op(&x, rng, |t, m| t.dense_fit(m, &dense), cfg)
        }
        "parameter-relu" => {
            let x = random_batch(rng, 2, (1, 2, 4), true);
            check_mixture_op(&x, rng, |t, m| t.parameter_relu(m), cfg)
        }
        "tree-hem-2d" | "tree-hem-3d" | "modified-em" => {
            let (dims, n, n_p, method) = match name {
                "tree-hem-2d" => (2, 12, 4, ReductionMethod::TreeHem { t: 2 }),
                "tree-hem-3d" => (3, 10, 3, ReductionMethod::TreeHem { t: 4 }),
                _ => (2, 10, 4, ReductionMethod::ModifiedEm),
            };
            let red = ReductionConfig {
                method,
                ..Default::default()
            };
            let x = random_batch(rng, dims, (1, 1, n), false);
            check_mixture_op(&x, rng, |t, m| t.reduce(m, n_p, &red), cfg)
        }
        "rescale" => {
            let x = random_batch(rng, 2, (2, 2, 3), true);
            check_mixture_op(&x, rng, |t, m| t.rescale(m), cfg)
        }
        "integral" => {
            let x = random_batch(rng, 3, (2, 2, 3), true);
            let c = cotangent(rng, 4);
            let (b, f, n) = x.shape();
            let gin = crate::gaussian::mixture_integral_backward(&x, &c)?;
            let eval = |p: &[f64]| -> Result<(f64, u64)> {
                let m = MixtureBatch::from_packed_params(3, b, f, n, p)?;
                Ok((dot(&c, &crate::gaussian::mixture_integral(&m)), 0))
            };
            let x0 = x.packed_params();
            let idx: Vec<usize> = (0..x0.len()).collect();
            finite_difference_check(eval, &x0, &gin.packed_params(), &idx, cfg)
        }
        "covariance" => check_covariance(rng, cfg),
        "head" => check_head(rng, cfg),
        other => Err(crate::Error::InvalidArgument(format!("unknown operation {other}"))),
    }
}

/// Runs the check for operation `name` at `points` random points.
pub fn check_operation(name: &'static str, points: usize, seed: u64, cfg: &GradCheckConfig) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OpCheck {
        name,
        points: 0,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        checks: Vec::new(),
    };
    for _ in 0..points {
        out.add(&check_op(name, &mut rng, cfg)?);
    }
    Ok(out)
}

/// Two layers: one input channel of 8 Gaussians, 2 channels of 4, then 3
/// classes.
pub fn toy_model_spec() -> ModelSpec {
    ModelSpec::halving(2, 8, &[2], 3, 5)
}

/// Checks every parameter of a freshly initialized two-layer model on a
/// random batch, once per point.
pub fn check_model(points: usize, seed: u64, cfg: &GradCheckConfig) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OpCheck {
        name: "model",
        points: 0,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        checks: Vec::new(),
    };
    for p in 0..points {
        let model = Model::new(toy_model_spec(), seed.wrapping_add(p as u64))?;
        let x = random_batch(&mut rng, 2, (3, 1, 8), false);
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..3)).collect();
        let wd = 0.01;
        let step = model.loss_and_grad(&x, &labels, true, wd)?;
        let x0 = model.params();
        let eval = |params: &[f64]| -> Result<(f64, u64)> {
            let mut m = model.clone();
            m.set_params(params)?;
            m.loss_with_fingerprint(&x, &labels, true, wd)
        };
        let idx: Vec<usize> = (0..x0.len()).collect();
        out.add(&finite_difference_check(eval, &x0, &step.grad, &idx, cfg)?);
    }
    Ok(out)
}
