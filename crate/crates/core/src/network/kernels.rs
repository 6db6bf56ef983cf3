//! Learnable kernels stored with unconstrained covariance factors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{check_dims, Gaussian, MixtureBatch};
use crate::linalg::{pidx, Packed};

/// ε in `C = C′ᵀC′ + εI`.
pub const COVARIANCE_EPSILON: f64 = 0.01;

/// `C = C′ᵀ C′ + ε I` for a row-major `k×k` factor.
pub fn make_covariance(factor: &[f64], k: usize, epsilon: f64) -> Packed<f64> {
    let mut c = [0.0; 6];
    for i in 0..k {
        for j in 0..=i {
            let mut s = 0.0;
            for r in 0..k {
                s += factor[r * k + i] * factor[r * k + j];
            }
            if i == j {
                s += epsilon;
            }
            c[pidx(i, j)] = s;
        }
    }
    c
}

/// Pulls a packed covariance cotangent back to the factor: `2 C′ G` with
/// `G` the symmetric matrix whose off-diagonal entries carry half of each
/// packed slot.
pub fn make_covariance_backward(factor: &[f64], k: usize, grad: &Packed<f64>) -> Vec<f64> {
    let g = |i: usize, j: usize| {
        if i == j {
            grad[pidx(i, i)]
        } else {
            0.5 * grad[pidx(i, j)]
        }
    };
    let mut out = vec![0.0; k * k];
    for r in 0..k {
        for l in 0..k {
            let mut s = 0.0;
            for j in 0..k {
                s += factor[r * k + j] * g(j, l);
            }
            out[r * k + l] = 2.0 * s;
        }
    }
    out
}

/// One kernel Gaussian in trainable form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelGaussian {
    pub weight: f64,
    pub position: Vec<f64>,
    /// Row-major `k×k` covariance factor `C′`.
    pub factor: Vec<f64>,
}

/// Kernels of one layer, indexed `[out channel, in channel, component]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSet {
    pub dims: usize,
    pub f_out: usize,
    pub f_in: usize,
    pub n_k: usize,
    pub epsilon: f64,
    pub gaussians: Vec<KernelGaussian>,
}

impl KernelSet {
    /// Parameters per kernel Gaussian: weight, position and factor.
    pub fn stride(&self) -> usize {
        1 + self.dims + self.dims * self.dims
    }

    pub fn param_count(&self) -> usize {
        self.gaussians.len() * self.stride()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for g in &self.gaussians {
            p.push(g.weight);
            p.extend_from_slice(&g.position);
            p.extend_from_slice(&g.factor);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} kernel parameters, expected {}",
                p.len(),
                self.param_count()
            )));
        }
        let k = self.dims;
        for (g, c) in self.gaussians.iter_mut().zip(p.chunks_exact(1 + k + k * k)) {
            g.weight = c[0];
            g.position.copy_from_slice(&c[1..1 + k]);
            g.factor.copy_from_slice(&c[1 + k..]);
        }
        Ok(())
    }

    /// Kernels as a `(F_o, F_i, N_k)` mixture batch with materialized
    /// covariances.
    pub fn materialize(&self) -> Result<MixtureBatch> {
        let k = self.dims;
        let gs = self
            .gaussians
            .iter()
            .map(|g| {
                let mut out = Gaussian::zeroed(k);
                out.weight = g.weight;
                out.position[..k].copy_from_slice(&g.position);
                out.covariance = make_covariance(&g.factor, k, self.epsilon);
                out
            })
            .collect();
        MixtureBatch::new(k, self.f_out, self.f_in, self.n_k, gs)
    }

    /// Chains a cotangent on the materialized kernels back to the flat
    /// parameter vector.
    pub fn params_grad(&self, grad: &MixtureBatch) -> Result<Vec<f64>> {
        if grad.shape() != (self.f_out, self.f_in, self.n_k) {
            return Err(Error::TapeMismatch("kernel cotangent shape".into()));
        }
        let k = self.dims;
        let mut out = Vec::with_capacity(self.param_count());
        for (g, c) in self.gaussians.iter().zip(grad.gaussians()) {
            out.push(c.weight);
            out.extend_from_slice(&c.position[..k]);
            out.extend(make_covariance_backward(&g.factor, k, &c.covariance));
        }
        Ok(out)
    }

    /// `Σᵢ aᵢ² + mean((Cᵢ − I) ⊙ (Cᵢ − I))` summed over every kernel
    /// Gaussian, the mean running over the `k²` matrix entries.
    pub fn weight_decay_loss(&self) -> f64 {
        let k = self.dims;
        self.gaussians
            .iter()
            .map(|g| {
                let c = make_covariance(&g.factor, k, self.epsilon);
                let mut sq = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        let d = c[pidx(i, j)] - if i == j { 1.0 } else { 0.0 };
                        sq += d * d;
                    }
                }
                g.weight * g.weight + sq / (k * k) as f64
            })
            .sum()
    }

    /// Gradient of [`KernelSet::weight_decay_loss`] on the flat parameters.
    pub fn weight_decay_grad(&self) -> Vec<f64> {
        let k = self.dims;
        let mut out = Vec::with_capacity(self.param_count());
        for g in &self.gaussians {
            let c = make_covariance(&g.factor, k, self.epsilon);
            let mut gc = [0.0; 6];
            for i in 0..k {
                for j in 0..=i {
                    let d = c[pidx(i, j)] - if i == j { 1.0 } else { 0.0 };
                    // off-diagonal slots stand for two matrix entries
                    let mult = if i == j { 2.0 } else { 4.0 };
                    gc[pidx(i, j)] = mult * d / (k * k) as f64;
                }
            }
            out.push(2.0 * g.weight);
            out.extend(std::iter::repeat(0.0).take(k));
            out.extend(make_covariance_backward(&g.factor, k, &gc));
        }
        out
    }
}

/// Kernel positions: the origin, then the axis points at radius 2.5 in 2D
/// (evenly spaced on the circle beyond four), random points on the sphere
/// of radius 2.5 in 3D.
fn kernel_positions(k: usize, n_k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    const RADIUS: f64 = 2.5;
    let mut out = vec![vec![0.0; k]];
    let others = n_k.saturating_sub(1);
    if k == 2 {
        if others == 4 {
            for p in [[RADIUS, 0.0], [-RADIUS, 0.0], [0.0, RADIUS], [0.0, -RADIUS]] {
                out.push(p.to_vec());
            }
        } else {
            for j in 0..others {
                let a = 2.0 * std::f64::consts::PI * j as f64 / others as f64;
                out.push(vec![RADIUS * a.cos(), RADIUS * a.sin()]);
            }
        }
    } else {
        for _ in 0..others {
            let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            out.push(v.iter().map(|x| RADIUS * x / n).collect());
        }
    }
    out.truncate(n_k);
    out
}

/// Random kernels: weights from N(0.1, 1), positions per
/// [`kernel_positions`], factors `(I + 0.05 R) · 0.7` with `R ~ U[−1, 1]`.
pub fn init_kernels(dims: usize, f_out: usize, f_in: usize, n_k: usize, seed: u64) -> Result<KernelSet> {
    check_dims(dims)?;
    if f_out == 0 || f_in == 0 || n_k == 0 {
        return Err(Error::InvalidArgument("kernel counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.1, 1.0).expect("valid normal");
    let mut gaussians = Vec::with_capacity(f_out * f_in * n_k);
    for _ in 0..f_out * f_in {
        let positions = kernel_positions(dims, n_k, &mut rng);
        for position in positions {
            let weight = normal.sample(&mut rng);
            let mut factor = vec![0.0; dims * dims];
            for i in 0..dims {
                for j in 0..dims {
                    let r: f64 = rng.gen_range(-1.0..=1.0);
                    factor[i * dims + j] = (if i == j { 1.0 } else { 0.0 } + 0.05 * r) * 0.7;
                }
            }
            gaussians.push(KernelGaussian {
                weight,
                position,
                factor,
            });
        }
    }
    Ok(KernelSet {
        dims,
        f_out,
        f_in,
        n_k,
        epsilon: COVARIANCE_EPSILON,
        gaussians,
    })
}
