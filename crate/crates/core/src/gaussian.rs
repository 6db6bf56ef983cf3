//! Gaussians, mixtures and their exact arithmetic.
//!
//! A [`Gaussian`] is a weighted, normalized multivariate normal density in two
//! or three dimensions. Mixtures are plain weighted sums; weights may be
//! negative. [`MixtureBatch`] packs `[batch, channel, component]` Gaussians
//! densely so every channel of every sample holds the same component count.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{self, pidx, Packed, Real, Vector};

/// Weighted normalized Gaussian. Unused trailing slots of `position` and
/// `covariance` are zero when `dims == 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian<T = f64> {
    pub dims: usize,
    pub weight: T,
    pub position: Vector<T>,
    pub covariance: Packed<T>,
}

/// Cotangent of a Gaussian: same layout, one entry per parameter. The entry
/// for a packed off-diagonal covariance slot is the derivative with respect
/// to that slot, which stands for both symmetric matrix entries.
pub type GaussianGrad = Gaussian<f64>;

pub fn check_dims(dims: usize) -> Result<()> {
    match dims {
        2 | 3 => Ok(()),
        d => Err(Error::UnsupportedDims(d)),
    }
}

impl<T: Real> Gaussian<T> {
    pub fn zeroed(dims: usize) -> Self {
        Gaussian {
            dims,
            weight: T::zero(),
            position: [T::zero(); 3],
            covariance: [T::zero(); 6],
        }
    }

    pub fn cholesky(&self) -> Result<Packed<T>> {
        linalg::cholesky(&self.covariance, self.dims).ok_or(Error::CovarianceDegenerate)
    }

    /// Log of the unit-weight density at `x`.
    pub fn log_density(&self, x: &Vector<T>) -> Result<T> {
        let l = self.cholesky()?;
        Ok(log_density_with_factor(&self.position, &l, x, self.dims))
    }
}

/// `ln N(x | b, L Lᵀ)`, the unit-weight normalized log density.
pub fn log_density_with_factor<T: Real>(b: &Vector<T>, l: &Packed<T>, x: &Vector<T>, k: usize) -> T {
    let mut d = [T::zero(); 3];
    for i in 0..k {
        d[i] = x[i] - b[i];
    }
    let y = linalg::solve_lower(l, &d, k);
    let mut q = T::zero();
    for v in y.iter().take(k) {
        q = q + *v * *v;
    }
    let half = T::cst(0.5);
    T::cst(-0.5 * k as f64 * (2.0 * PI).ln()) - half * linalg::chol_log_det(l, k) - half * q
}

impl Gaussian<f64> {
    pub fn new(weight: f64, position: &[f64], covariance: &[f64]) -> Result<Self> {
        let dims = position.len();
        check_dims(dims)?;
        if covariance.len() != linalg::packed_len(dims) {
            return Err(Error::DimensionMismatch {
                expected: linalg::packed_len(dims),
                got: covariance.len(),
            });
        }
        let mut g = Gaussian::zeroed(dims);
        g.weight = weight;
        g.position[..dims].copy_from_slice(position);
        g.covariance[..covariance.len()].copy_from_slice(covariance);
        g.cholesky()?;
        Ok(g)
    }

    /// Gaussian with covariance `variance · I`.
    pub fn isotropic(weight: f64, position: &[f64], variance: f64) -> Result<Self> {
        let dims = position.len();
        check_dims(dims)?;
        let mut cov = [0.0; 6];
        for i in 0..dims {
            cov[pidx(i, i)] = variance;
        }
        Gaussian::new(weight, position, &cov[..linalg::packed_len(dims)])
    }

    /// Zero-weight unit Gaussian at the origin; used to pad channels.
    pub fn padding(dims: usize) -> Self {
        Gaussian {
            dims,
            weight: 0.0,
            position: [0.0; 3],
            covariance: linalg::identity(dims),
        }
    }

    pub fn position(&self) -> &[f64] {
        &self.position[..self.dims]
    }

    pub fn covariance_packed(&self) -> &[f64] {
        &self.covariance[..linalg::packed_len(self.dims)]
    }

    pub fn trace(&self) -> f64 {
        linalg::trace(&self.covariance, self.dims)
    }

    pub fn lift<T: Real>(&self) -> Gaussian<T> {
        Gaussian {
            dims: self.dims,
            weight: T::cst(self.weight),
            position: self.position.map(T::cst),
            covariance: self.covariance.map(T::cst),
        }
    }

    pub fn add_assign(&mut self, other: &Gaussian) {
        self.weight += other.weight;
        for i in 0..3 {
            self.position[i] += other.position[i];
        }
        for i in 0..6 {
            self.covariance[i] += other.covariance[i];
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weight == 0.0
            && self.position.iter().all(|v| *v == 0.0)
            && self.covariance.iter().all(|v| *v == 0.0)
    }
}

/// Evaluates `a · N(x | b, C)`.
pub fn eval_gaussian(g: &Gaussian, x: &[f64]) -> Result<f64> {
    if x.len() != g.dims {
        return Err(Error::DimensionMismatch {
            expected: g.dims,
            got: x.len(),
        });
    }
    let mut p = [0.0; 3];
    p[..g.dims].copy_from_slice(x);
    Ok(g.weight * g.log_density(&p)?.exp())
}

/// A Gaussian with its factorization cached for repeated evaluation.
#[derive(Clone, Copy, Debug)]
pub struct PreparedGaussian {
    pub dims: usize,
    pub weight: f64,
    pub position: Vector<f64>,
    /// `L⁻¹`, lower-triangular packed.
    pub inv_factor: Packed<f64>,
    /// `(2π)^(−k/2) det(C)^(−1/2)`.
    pub norm: f64,
}

/// Mahalanobis distances beyond this are treated as exact zeros.
pub const NEGLIGIBLE_MAHALANOBIS: f64 = 80.0;

impl PreparedGaussian {
    pub fn new(g: &Gaussian) -> Result<Self> {
        let l = g.cholesky()?;
        let k = g.dims;
        let log_det = linalg::chol_log_det(&l, k);
        Ok(PreparedGaussian {
            dims: k,
            weight: g.weight,
            position: g.position,
            inv_factor: linalg::lower_inverse(&l, k),
            norm: (-0.5 * (k as f64 * (2.0 * PI).ln() + log_det)).exp(),
        })
    }

    /// `L⁻¹ (x − b)`.
    #[inline]
    pub fn whiten(&self, x: &Vector<f64>) -> Vector<f64> {
        let li = &self.inv_factor;
        let d0 = x[0] - self.position[0];
        let d1 = x[1] - self.position[1];
        if self.dims == 2 {
            [li[0] * d0, li[1] * d0 + li[2] * d1, 0.0]
        } else {
            let d2 = x[2] - self.position[2];
            [
                li[0] * d0,
                li[1] * d0 + li[2] * d1,
                li[3] * d0 + li[4] * d1 + li[5] * d2,
            ]
        }
    }

    /// Unit-weight density at `x`.
    #[inline]
    pub fn unit_eval(&self, x: &Vector<f64>) -> f64 {
        let y = self.whiten(x);
        let q = y[0] * y[0] + y[1] * y[1] + y[2] * y[2];
        if q > NEGLIGIBLE_MAHALANOBIS {
            0.0
        } else {
            self.norm * (-0.5 * q).exp()
        }
    }

    #[inline]
    pub fn eval(&self, x: &Vector<f64>) -> f64 {
        self.weight * self.unit_eval(x)
    }

    /// `C⁻¹ (x − b)`, obtained as `L⁻ᵀ L⁻¹ (x − b)`.
    #[inline]
    pub fn precision_times_offset(&self, x: &Vector<f64>) -> Vector<f64> {
        let y = self.whiten(x);
        let li = &self.inv_factor;
        let k = self.dims;
        let mut u = [0.0; 3];
        for j in 0..k {
            let mut s = 0.0;
            for i in j..k {
                s += li[pidx(i, j)] * y[i];
            }
            u[j] = s;
        }
        u
    }

    /// Packed `C⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn precision(&self) -> Packed<f64> {
        let li = &self.inv_factor;
        let k = self.dims;
        let mut p = [0.0; 6];
        for i in 0..k {
            for j in 0..=i {
                let mut s = 0.0;
                for r in i..k {
                    s += li[pidx(r, i)] * li[pidx(r, j)];
                }
                p[pidx(i, j)] = s;
            }
        }
        p
    }
}

/// Gradient pieces of a unit-weight density value `v = N(x | b, C)`:
/// `∂v/∂x = −v·u` with `u = C⁻¹(x − b)`, `∂v/∂b = v·u`, and for the packed
/// covariance `∂v/∂C = ½ v (u uᵀ − C⁻¹)` with off-diagonal slots doubled.
#[inline]
pub fn unit_eval_cov_grad(v: f64, u: &Vector<f64>, precision: &Packed<f64>, k: usize) -> Packed<f64> {
    let mut g = [0.0; 6];
    for i in 0..k {
        for j in 0..=i {
            let full = 0.5 * v * (u[i] * u[j] - precision[pidx(i, j)]);
            g[pidx(i, j)] = if i == j { full } else { 2.0 * full };
        }
    }
    g
}

/// Dense `[batch, channel, component]` array of Gaussians sharing `dims`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureBatch {
    dims: usize,
    batch: usize,
    channels: usize,
    components: usize,
    gaussians: Vec<Gaussian>,
}

impl MixtureBatch {
    pub fn new(
        dims: usize,
        batch: usize,
        channels: usize,
        components: usize,
        gaussians: Vec<Gaussian>,
    ) -> Result<Self> {
        check_dims(dims)?;
        if gaussians.len() != batch * channels * components {
            return Err(Error::ShapeMismatch(format!(
                "{} gaussians for shape ({batch}, {channels}, {components})",
                gaussians.len()
            )));
        }
        if let Some(g) = gaussians.iter().find(|g| g.dims != dims) {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: g.dims,
            });
        }
        Ok(MixtureBatch {
            dims,
            batch,
            channels,
            components,
            gaussians,
        })
    }

    /// Validates positive-definiteness of every covariance.
    pub fn validate(&self) -> Result<()> {
        for g in &self.gaussians {
            g.cholesky()?;
        }
        Ok(())
    }

    /// All-zero cotangent of this batch's shape.
    pub fn zeros_like(&self) -> Self {
        MixtureBatch {
            gaussians: vec![Gaussian::zeroed(self.dims); self.gaussians.len()],
            ..*self
        }
    }

    /// A single channel mixture as a one-sample, one-channel batch.
    pub fn from_channel(dims: usize, gaussians: Vec<Gaussian>) -> Result<Self> {
        let n = gaussians.len();
        MixtureBatch::new(dims, 1, 1, n, gaussians)
    }

    pub fn dims(&self) -> usize {
        self.dims
    }
    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn components(&self) -> usize {
        self.components
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.channels, self.components)
    }
    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }
    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }
    pub fn into_gaussians(self) -> Vec<Gaussian> {
        self.gaussians
    }

    fn offset(&self, b: usize, c: usize) -> Result<usize> {
        if b >= self.batch || c >= self.channels {
            return Err(Error::IndexOutOfRange(format!(
                "({b}, {c}) outside ({}, {})",
                self.batch, self.channels
            )));
        }
        Ok((b * self.channels + c) * self.components)
    }

    pub fn channel(&self, b: usize, c: usize) -> Result<&[Gaussian]> {
        let o = self.offset(b, c)?;
        Ok(&self.gaussians[o..o + self.components])
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> Result<&mut [Gaussian]> {
        let o = self.offset(b, c)?;
        let n = self.components;
        Ok(&mut self.gaussians[o..o + n])
    }

    /// Iterates channels in `(batch, channel)` order.
    pub fn channels_iter(&self) -> impl Iterator<Item = &[Gaussian]> {
        self.gaussians.chunks(self.components.max(1)).take(self.batch * self.channels)
    }

    /// Copy of one batch element as a batch of size one.
    pub fn sample(&self, b: usize) -> Result<MixtureBatch> {
        let o = self.offset(b, 0)?;
        let len = self.channels * self.components;
        Ok(MixtureBatch {
            batch: 1,
            gaussians: self.gaussians[o..o + len].to_vec(),
            ..*self
        })
    }

    /// Concatenates equally shaped batches along the batch axis.
    pub fn stack(samples: &[MixtureBatch]) -> Result<MixtureBatch> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero batches".into()))?;
        let mut gaussians = Vec::new();
        let mut batch = 0;
        for s in samples {
            if s.dims != first.dims || s.channels != first.channels || s.components != first.components {
                return Err(Error::ShapeMismatch("stacking batches of different shapes".into()));
            }
            batch += s.batch;
            gaussians.extend_from_slice(&s.gaussians);
        }
        MixtureBatch::new(first.dims, batch, first.channels, first.components, gaussians)
    }

    /// Number of parameters per Gaussian: `1 + k + k(k+1)/2`.
    pub fn stride(&self) -> usize {
        param_stride(self.dims)
    }

    /// Flat `(weight, position, packed covariance)` parameters.
    pub fn packed_params(&self) -> Vec<f64> {
        let k = self.dims;
        let p = linalg::packed_len(k);
        let mut out = Vec::with_capacity(self.gaussians.len() * self.stride());
        for g in &self.gaussians {
            out.push(g.weight);
            out.extend_from_slice(&g.position[..k]);
            out.extend_from_slice(&g.covariance[..p]);
        }
        out
    }

    pub fn from_packed_params(
        dims: usize,
        batch: usize,
        channels: usize,
        components: usize,
        params: &[f64],
    ) -> Result<Self> {
        check_dims(dims)?;
        let stride = param_stride(dims);
        let count = batch * channels * components;
        if params.len() != count * stride {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for {count} gaussians of stride {stride}",
                params.len()
            )));
        }
        let p = linalg::packed_len(dims);
        let gaussians = params
            .chunks_exact(stride)
            .map(|c| {
                let mut g = Gaussian::zeroed(dims);
                g.weight = c[0];
                g.position[..dims].copy_from_slice(&c[1..1 + dims]);
                g.covariance[..p].copy_from_slice(&c[1 + dims..]);
                g
            })
            .collect();
        MixtureBatch::new(dims, batch, channels, components, gaussians)
    }
}

pub const fn param_stride(dims: usize) -> usize {
    1 + dims + linalg::packed_len(dims)
}

/// Evaluates channel `(batch, channel)` of `m` at `x`.
pub fn eval_mixture(m: &MixtureBatch, batch: usize, channel: usize, x: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for g in m.channel(batch, channel)? {
        s += eval_gaussian(g, x)?;
    }
    Ok(s)
}

/// Evaluates a plain slice of Gaussians at `x`.
pub fn eval_gaussians(gs: &[Gaussian], x: &[f64]) -> Result<f64> {
    gs.iter().map(|g| eval_gaussian(g, x)).sum()
}

/// Closed-form convolution of two mixtures: every pair `(n, m)` yields weight
/// `aₙ·aₘ`, position `bₙ + βₘ` and covariance `Cₙ + Γₘ`, in row-major pair
/// order.
pub fn convolve_mixtures(m1: &[Gaussian], m2: &[Gaussian]) -> Result<Vec<Gaussian>> {
    let mut out = Vec::with_capacity(m1.len() * m2.len());
    for g in m1 {
        for h in m2 {
            if g.dims != h.dims {
                return Err(Error::DimensionMismatch {
                    expected: g.dims,
                    got: h.dims,
                });
            }
            out.push(convolve_pair(g, h));
        }
    }
    Ok(out)
}

#[inline]
fn convolve_pair(g: &Gaussian, h: &Gaussian) -> Gaussian {
    let mut o = Gaussian::zeroed(g.dims);
    o.weight = g.weight * h.weight;
    for i in 0..3 {
        o.position[i] = g.position[i] + h.position[i];
    }
    for i in 0..6 {
        o.covariance[i] = g.covariance[i] + h.covariance[i];
    }
    o
}

/// Convolution layer. `kernels` is shaped `(F_o, F_i, N_k)`; the output is
/// `(B, F_o, F_i·N_i·N_k)` where output channel `o` concatenates the
/// convolutions of every input channel `i` with kernel `(o, i)`, ordered by
/// `(i, input component, kernel component)`.
pub fn convolution_layer(input: &MixtureBatch, kernels: &MixtureBatch) -> Result<MixtureBatch> {
    if input.dims != kernels.dims {
        return Err(Error::DimensionMismatch {
            expected: input.dims,
            got: kernels.dims,
        });
    }
    if kernels.channels != input.channels {
        return Err(Error::ShapeMismatch(format!(
            "kernels expect {} input channels, data has {}",
            kernels.channels, input.channels
        )));
    }
    let (b_n, f_i, n_i) = input.shape();
    let (f_o, _, n_k) = kernels.shape();
    let n_o = f_i * n_i * n_k;
    let mut out = Vec::with_capacity(b_n * f_o * n_o);
    for b in 0..b_n {
        for o in 0..f_o {
            for i in 0..f_i {
                let data = input.channel(b, i)?;
                let kern = kernels.channel(o, i)?;
                for g in data {
                    for h in kern {
                        out.push(convolve_pair(g, h));
                    }
                }
            }
        }
    }
    MixtureBatch::new(input.dims, b_n, f_o, n_o, out)
}

/// Backward of [`convolution_layer`]: returns `(input cotangent, kernel
/// cotangent)`.
pub fn convolution_layer_backward(
    input: &MixtureBatch,
    kernels: &MixtureBatch,
    out_grad: &MixtureBatch,
) -> Result<(MixtureBatch, MixtureBatch)> {
    let (b_n, f_i, n_i) = input.shape();
    let (f_o, _, n_k) = kernels.shape();
    if out_grad.shape() != (b_n, f_o, f_i * n_i * n_k) {
        return Err(Error::TapeMismatch(format!(
            "convolution cotangent shape {:?}",
            out_grad.shape()
        )));
    }
    let mut gin = input.zeros_like();
    let mut gk = kernels.zeros_like();
    let k_stride = f_i * n_k;
    for b in 0..b_n {
        for o in 0..f_o {
            let go = out_grad.channel(b, o)?;
            let mut idx = 0;
            for i in 0..f_i {
                let data = input.channel(b, i)?;
                let kern = kernels.channel(o, i)?;
                for (ni, g) in data.iter().enumerate() {
                    for (nk, h) in kern.iter().enumerate() {
                        let c = &go[idx];
                        idx += 1;
                        let gi = &mut gin.gaussians[(b * f_i + i) * n_i + ni];
                        gi.weight += c.weight * h.weight;
                        for d in 0..3 {
                            gi.position[d] += c.position[d];
                        }
                        for d in 0..6 {
                            gi.covariance[d] += c.covariance[d];
                        }
                        let gkk = &mut gk.gaussians[o * k_stride + i * n_k + nk];
                        gkk.weight += c.weight * g.weight;
                        for d in 0..3 {
                            gkk.position[d] += c.position[d];
                        }
                        for d in 0..6 {
                            gkk.covariance[d] += c.covariance[d];
                        }
                    }
                }
            }
        }
    }
    Ok((gin, gk))
}

/// `Σ aᵢ` per `(batch, channel)`, in `(batch, channel)` order.
pub fn mixture_integral(m: &MixtureBatch) -> Vec<f64> {
    m.channels_iter()
        .map(|ch| ch.iter().map(|g| g.weight).sum())
        .collect()
}

/// Backward of [`mixture_integral`].
pub fn mixture_integral_backward(m: &MixtureBatch, out_grad: &[f64]) -> Result<MixtureBatch> {
    if out_grad.len() != m.batch * m.channels {
        return Err(Error::TapeMismatch(format!(
            "integral cotangent of length {}",
            out_grad.len()
        )));
    }
    let mut g = m.zeros_like();
    let n = m.components;
    for (c, v) in out_grad.iter().enumerate() {
        for gg in &mut g.gaussians[c * n..(c + 1) * n] {
            gg.weight = *v;
        }
    }
    Ok(g)
}

/// Per-batch-element domain scale `σ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainScale(pub f64);

/// Scales each batch element so its mean covariance trace (over all channels
/// and components) equals `k`: positions by `σ`, covariances by `σ²`, with
/// `σ = sqrt(k / t̄)`.
pub fn rescale_domain(m: &MixtureBatch) -> Result<(MixtureBatch, Vec<DomainScale>)> {
    let k = m.dims as f64;
    let per = m.channels * m.components;
    let mut out = m.clone();
    let mut scales = Vec::with_capacity(m.batch);
    for b in 0..m.batch {
        let slice = &mut out.gaussians[b * per..(b + 1) * per];
        let mean_trace = slice.iter().map(|g| g.trace()).sum::<f64>() / per.max(1) as f64;
        if !(mean_trace > 0.0) || !mean_trace.is_finite() {
            return Err(Error::DegenerateDomain(mean_trace));
        }
        let s = (k / mean_trace).sqrt();
        apply_scale(slice, s);
        scales.push(DomainScale(s));
    }
    Ok((out, scales))
}

/// Applies a fixed scale to positions and covariances.
pub fn apply_scale(gs: &mut [Gaussian], s: f64) {
    let s2 = s * s;
    for g in gs {
        for v in g.position.iter_mut() {
            *v *= s;
        }
        for v in g.covariance.iter_mut() {
            *v *= s2;
        }
    }
}

/// Backward of [`rescale_domain`], including the dependence of `σ` on every
/// covariance trace.
pub fn rescale_domain_backward(
    input: &MixtureBatch,
    scales: &[DomainScale],
    out_grad: &MixtureBatch,
) -> Result<MixtureBatch> {
    if out_grad.shape() != input.shape() || scales.len() != input.batch {
        return Err(Error::TapeMismatch("rescale cotangent shape".into()));
    }
    let k = input.dims;
    let per = input.channels * input.components;
    let mut gin = out_grad.clone();
    for b in 0..input.batch {
        let s = scales[b].0;
        let xs = &input.gaussians[b * per..(b + 1) * per];
        let gs = &mut gin.gaussians[b * per..(b + 1) * per];
        // ∂L/∂σ = Σ ḡ_b·b + 2σ Σ ḡ_C·C
        let mut g_sigma = 0.0;
        for (x, g) in xs.iter().zip(gs.iter()) {
            for d in 0..k {
                g_sigma += g.position[d] * x.position[d];
            }
            for d in 0..linalg::packed_len(k) {
                g_sigma += 2.0 * s * g.covariance[d] * x.covariance[d];
            }
        }
        let mean_trace = k as f64 / (s * s);
        // σ = sqrt(k / t̄) ⇒ ∂σ/∂t̄ = −σ / (2 t̄); ∂t̄/∂C_ii = 1/per
        let g_trace = g_sigma * (-0.5 * s / mean_trace) / per as f64;
        for g in gs.iter_mut() {
            for v in g.position.iter_mut() {
                *v *= s;
            }
            for v in g.covariance.iter_mut() {
                *v *= s * s;
            }
            for d in 0..k {
                g.covariance[pidx(d, d)] += g_trace;
            }
        }
    }
    Ok(gin)
}

/// Axis-aligned box.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundingBox {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl BoundingBox {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Self {
        BoundingBox { min, max }
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    /// Box around all component means, padded by `sigmas` standard
    /// deviations along each axis.
    pub fn around(gs: &[Gaussian], sigmas: f64) -> Option<Self> {
        let k = gs.first()?.dims;
        let mut min = vec![f64::INFINITY; k];
        let mut max = vec![f64::NEG_INFINITY; k];
        for g in gs {
            for d in 0..k {
                let sd = g.covariance[pidx(d, d)].max(0.0).sqrt() * sigmas;
                min[d] = min[d].min(g.position[d] - sd);
                max[d] = max[d].max(g.position[d] + sd);
            }
        }
        Some(BoundingBox { min, max })
    }
}

/// Scalar field sampled at cell centers, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub resolution: Vec<usize>,
    pub bbox: BoundingBox,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn cell_center(&self, index: &[usize]) -> Vec<f64> {
        index
            .iter()
            .enumerate()
            .map(|(d, &i)| {
                let h = (self.bbox.max[d] - self.bbox.min[d]) / self.resolution[d] as f64;
                self.bbox.min[d] + (i as f64 + 0.5) * h
            })
            .collect()
    }

    /// Multi-index of a flat index.
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        self.resolution
            .iter()
            .map(|&r| {
                let i = flat % r;
                flat /= r;
                i
            })
            .collect()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Evaluates channel `(batch, channel)` at every cell center of `bbox`.
pub fn eval_grid(
    m: &MixtureBatch,
    batch: usize,
    channel: usize,
    bbox: &BoundingBox,
    resolution: &[usize],
) -> Result<Grid> {
    let gs = m.channel(batch, channel)?;
    eval_grid_gaussians(gs, m.dims, bbox, resolution)
}

pub fn eval_grid_gaussians(
    gs: &[Gaussian],
    dims: usize,
    bbox: &BoundingBox,
    resolution: &[usize],
) -> Result<Grid> {
    if bbox.dims() != dims || resolution.len() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            got: bbox.dims().min(resolution.len()),
        });
    }
    if resolution.iter().any(|&r| r < 2) {
        return Err(Error::InvalidArgument("grid resolution must be at least 2 per axis".into()));
    }
    if (0..dims).any(|d| !(bbox.max[d] > bbox.min[d])) {
        return Err(Error::ZeroVolume);
    }
    let prepared = gs.iter().map(PreparedGaussian::new).collect::<Result<Vec<_>>>()?;
    let total: usize = resolution.iter().product();
    let mut grid = Grid {
        resolution: resolution.to_vec(),
        bbox: bbox.clone(),
        values: Vec::with_capacity(total),
    };
    for flat in 0..total {
        let c = grid.cell_center(&grid.unravel(flat));
        let mut x = [0.0; 3];
        x[..dims].copy_from_slice(&c);
        grid.values.push(prepared.iter().map(|p| p.eval(&x)).sum());
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn std2(weight: f64, x: f64, y: f64) -> Gaussian {
        Gaussian::isotropic(weight, &[x, y], 1.0).unwrap()
    }

    pub(crate) fn random_gaussian(rng: &mut impl Rng, dims: usize) -> Gaussian {
        let mut pos = vec![0.0; dims];
        for p in pos.iter_mut() {
            *p = rng.gen_range(-2.0..2.0);
        }
        // A Aᵀ + 0.2 I
        let mut a = [[0.0; 3]; 3];
        for row in a.iter_mut().take(dims) {
            for v in row.iter_mut().take(dims) {
                *v = rng.gen_range(-0.8..0.8);
            }
        }
        let mut cov = vec![0.0; linalg::packed_len(dims)];
        for i in 0..dims {
            for j in 0..=i {
                let mut s = if i == j { 0.2 } else { 0.0 };
                for r in 0..dims {
                    s += a[i][r] * a[j][r];
                }
                cov[pidx(i, j)] = s;
            }
        }
        Gaussian::new(rng.gen_range(-1.0..1.5), &pos, &cov).unwrap()
    }

    #[test]
    fn peak_of_standard_gaussian() {
        let g = std2(1.0, 0.0, 0.0);
        let v = eval_gaussian(&g, &[0.0, 0.0]).unwrap();
        assert!((v - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!((v - 0.1591549).abs() < 1e-7);
        let g = std2(3.0, 1.0, 2.0);
        assert!((eval_gaussian(&g, &[1.0, 2.0]).unwrap() - 3.0 / (2.0 * PI)).abs() < 1e-14);
    }

    #[test]
    fn anisotropic_value_matches_explicit_inverse_formula() {
        let g = Gaussian::new(1.0, &[0.0, 0.0], &[4.0, 0.0, 1.0]).unwrap();
        // independent scalar evaluation with an explicit 2×2 inverse
        let (a, b, c) = (4.0, 0.0, 1.0);
        let det: f64 = a * c - b * b;
        let (ia, ib, ic) = (c / det, -b / det, a / det);
        let (dx, dy) = (2.0, 0.0);
        let q = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy;
        let expected = (-0.5 * q).exp() / (2.0 * PI * det.sqrt());
        let v = eval_gaussian(&g, &[2.0, 0.0]).unwrap();
        assert!((v - expected).abs() < 1e-15);
        let p = PreparedGaussian::new(&g).unwrap();
        assert!((p.eval(&[2.0, 0.0, 0.0]) - expected).abs() < 1e-15);
    }

    #[test]
    fn degenerate_covariance_is_rejected() {
        assert!(matches!(
            Gaussian::new(1.0, &[0.0, 0.0], &[1.0, 1.0, 1.0]),
            Err(Error::CovarianceDegenerate)
        ));
        let mut g = std2(1.0, 0.0, 0.0);
        g.covariance[0] = -1.0;
        assert!(eval_gaussian(&g, &[0.0, 0.0]).is_err());
        assert!(eval_gaussian(&std2(1.0, 0.0, 0.0), &[0.0]).is_err());
    }

    #[test]
    fn mixture_evaluation_cases() {
        let zero = MixtureBatch::from_channel(2, vec![std2(0.0, 0.3, 0.1), std2(0.0, -1.0, 2.0)]).unwrap();
        assert_eq!(eval_mixture(&zero, 0, 0, &[0.2, 0.7]).unwrap(), 0.0);
        let g = Gaussian::new(0.7, &[0.5, -0.5], &[2.0, 0.3, 1.0]).unwrap();
        let one = MixtureBatch::from_channel(2, vec![g]).unwrap();
        assert_eq!(
            eval_mixture(&one, 0, 0, &[0.1, 0.2]).unwrap(),
            eval_gaussian(&g, &[0.1, 0.2]).unwrap()
        );
        let two = MixtureBatch::from_channel(2, vec![std2(1.0, 1.0, 0.0), std2(1.0, -1.0, 0.0)]).unwrap();
        let v = eval_mixture(&two, 0, 0, &[0.0, 0.0]).unwrap();
        let single = eval_gaussian(&std2(1.0, 0.0, 0.0), &[1.0, 0.0]).unwrap();
        assert!((v - 2.0 * single).abs() < 1e-15);
        assert!(eval_mixture(&two, 1, 0, &[0.0, 0.0]).is_err());
        assert!(eval_mixture(&two, 0, 1, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn pair_convolution_closed_form() {
        let g = Gaussian::isotropic(1.0, &[1.0, 0.0], 1.0).unwrap();
        let h = Gaussian::isotropic(1.0, &[0.0, 2.0], 2.0).unwrap();
        let out = convolve_mixtures(&[g], &[h]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0], Gaussian::isotropic(1.0, &[1.0, 2.0], 3.0).unwrap());
    }

    #[test]
    fn convolution_component_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<_> = (0..16).map(|_| random_gaussian(&mut rng, 2)).collect();
        let b: Vec<_> = (0..5).map(|_| random_gaussian(&mut rng, 2)).collect();
        assert_eq!(convolve_mixtures(&a, &b).unwrap().len(), 80);
        let c = Gaussian::isotropic(1.0, &[0.0, 0.0, 0.0], 1.0).unwrap();
        assert!(convolve_mixtures(&a, &[c]).is_err());
    }

    /// Direct summation of the rasterized inputs on a grid of spacing `h`.
    #[test]
    fn convolution_matches_direct_grid_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<_> = (0..3).map(|_| random_gaussian(&mut rng, 2)).collect();
        let b: Vec<_> = (0..2).map(|_| random_gaussian(&mut rng, 2)).collect();
        let conv = convolve_mixtures(&a, &b).unwrap();
        let n = 72usize;
        let h = 0.25;
        let coord = |i: usize| (i as f64 - (n / 2) as f64) * h;
        let mut fa = vec![0.0; n * n];
        let mut fb = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                let x = [coord(i), coord(j)];
                fa[j * n + i] = eval_gaussians(&a, &x).unwrap();
                fb[j * n + i] = eval_gaussians(&b, &x).unwrap();
            }
        }
        // (f ∗ g)(z) ≈ h² Σ_x f(x) g(z − x) with z − x on the same lattice
        let mut num = 0.0;
        let mut den = 0.0;
        for zj in (n / 4..3 * n / 4).step_by(3) {
            for zi in (n / 4..3 * n / 4).step_by(3) {
                let z = [coord(zi), coord(zj)];
                let mut s = 0.0;
                for xj in 0..n {
                    for xi in 0..n {
                        let yi = zi as isize - xi as isize + (n / 2) as isize;
                        let yj = zj as isize - xj as isize + (n / 2) as isize;
                        if yi < 0 || yj < 0 || yi >= n as isize || yj >= n as isize {
                            continue;
                        }
                        s += fa[xj * n + xi] * fb[yj as usize * n + yi as usize];
                    }
                }
                s *= h * h;
                let exact = eval_gaussians(&conv, &z).unwrap();
                num += (s - exact).powi(2);
                den += exact * exact;
            }
        }
        assert!((num / den).sqrt() < 1e-3, "relative L2 {}", (num / den).sqrt());
    }

    #[test]
    fn convolution_layer_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<_> = (0..8 * 16).map(|_| random_gaussian(&mut rng, 2)).collect();
        let input = MixtureBatch::new(2, 1, 8, 16, data).unwrap();
        let kern: Vec<_> = (0..4 * 8 * 5).map(|_| random_gaussian(&mut rng, 2)).collect();
        let kernels = MixtureBatch::new(2, 4, 8, 5, kern).unwrap();
        let out = convolution_layer(&input, &kernels).unwrap();
        assert_eq!(out.shape(), (1, 4, 640));
        let bad = MixtureBatch::new(2, 4, 7, 5, vec![Gaussian::padding(2); 140]).unwrap();
        assert!(convolution_layer(&input, &bad).is_err());
    }

    #[test]
    fn unit_kernel_at_origin_only_widens() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<_> = (0..6).map(|_| random_gaussian(&mut rng, 2)).collect();
        let input = MixtureBatch::new(2, 1, 1, 6, data.clone()).unwrap();
        let kc = [0.5, 0.1, 0.3];
        let kernel = Gaussian::new(1.0, &[0.0, 0.0], &kc).unwrap();
        let kernels = MixtureBatch::new(2, 1, 1, 1, vec![kernel]).unwrap();
        let out = convolution_layer(&input, &kernels).unwrap();
        for (o, g) in out.gaussians().iter().zip(&data) {
            assert_eq!(o.weight, g.weight);
            assert_eq!(o.position, g.position);
            for d in 0..3 {
                assert_eq!(o.covariance[d], g.covariance[d] + kc[d]);
            }
        }
    }

    #[test]
    fn integral_is_weight_sum() {
        let m = MixtureBatch::from_channel(
            2,
            vec![std2(1.0, 0.0, 0.0), std2(2.0, 1.0, 1.0), std2(-0.5, 3.0, 0.0)],
        )
        .unwrap();
        assert_eq!(mixture_integral(&m), vec![2.5]);
        let z = MixtureBatch::from_channel(2, vec![std2(0.0, 0.0, 0.0)]).unwrap();
        assert_eq!(mixture_integral(&z), vec![0.0]);
    }

    #[test]
    fn integral_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gs: Vec<_> = (0..4).map(|_| random_gaussian(&mut rng, 2)).collect();
        let m = MixtureBatch::from_channel(2, gs.clone()).unwrap();
        let exact = mixture_integral(&m)[0];
        let prepared: Vec<_> = gs.iter().map(|g| PreparedGaussian::new(g).unwrap()).collect();
        let (lo, hi) = (-12.0, 12.0);
        let samples = 1_000_000;
        let mut s = 0.0;
        for _ in 0..samples {
            let x = [rng.gen_range(lo..hi), rng.gen_range(lo..hi), 0.0];
            s += prepared.iter().map(|p| p.eval(&x)).sum::<f64>();
        }
        let mc = s / samples as f64 * (hi - lo) * (hi - lo);
        let scale = gs.iter().map(|g| g.weight.abs()).sum::<f64>();
        assert!((mc - exact).abs() < 0.01 * scale, "mc {mc} exact {exact}");
    }

    #[test]
    fn rescale_examples() {
        let g = Gaussian::isotropic(1.0, &[2.0, -4.0], 4.0).unwrap();
        let m = MixtureBatch::from_channel(2, vec![g]).unwrap();
        let (r, s) = rescale_domain(&m).unwrap();
        assert!((s[0].0 - 0.5).abs() < 1e-15);
        let o = r.gaussians()[0];
        assert!((o.covariance[0] - 1.0).abs() < 1e-15 && (o.covariance[2] - 1.0).abs() < 1e-15);
        assert_eq!(&o.position[..2], &[1.0, -2.0]);

        let fixed = MixtureBatch::from_channel(2, vec![std2(1.0, 3.0, 1.0)]).unwrap();
        let (r, s) = rescale_domain(&fixed).unwrap();
        assert_eq!(s[0].0, 1.0);
        assert_eq!(r, fixed);

        let mut bad = fixed.clone();
        bad.gaussians_mut()[0].covariance = [0.0; 6];
        assert!(matches!(rescale_domain(&bad), Err(Error::DegenerateDomain(_))));
    }

    #[test]
    fn rescale_random_3d_batch_hits_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gs: Vec<_> = (0..3 * 2 * 7).map(|_| random_gaussian(&mut rng, 3)).collect();
        let m = MixtureBatch::new(3, 3, 2, 7, gs).unwrap();
        let (r, scales) = rescale_domain(&m).unwrap();
        for b in 0..3 {
            let per: Vec<f64> = (0..2)
                .flat_map(|c| r.channel(b, c).unwrap().iter().map(|g| g.trace()).collect::<Vec<_>>())
                .collect();
            let mean = per.iter().sum::<f64>() / per.len() as f64;
            assert!((mean - 3.0).abs() < 1e-9 * 3.0);
            // change of variables: eval(m', σx)·σ^k = eval(m, x)
            let s = scales[b].0;
            for _ in 0..5 {
                let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                for c in 0..2 {
                    let before = eval_mixture(&m, b, c, &x).unwrap();
                    let sx: Vec<f64> = x.iter().map(|v| v * s).collect();
                    let after = eval_mixture(&r, b, c, &sx).unwrap() * s.powi(3);
                    assert!((before - after).abs() < 1e-9 * before.abs().max(1e-3));
                }
            }
        }
    }

    #[test]
    fn grid_cases() {
        let zero = MixtureBatch::from_channel(2, vec![std2(0.0, 0.0, 0.0)]).unwrap();
        let bbox = BoundingBox::new(vec![-3.0, -3.0], vec![3.0, 3.0]);
        let g = eval_grid(&zero, 0, 0, &bbox, &[8, 8]).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0));

        let unit = MixtureBatch::from_channel(2, vec![std2(1.0, 0.0, 0.0)]).unwrap();
        let g = eval_grid(&unit, 0, 0, &bbox, &[9, 7]).unwrap();
        for j in 0..7 {
            for i in 0..9 {
                let v = g.values[j * 9 + i];
                assert!((v - g.values[j * 9 + (8 - i)]).abs() < 1e-15);
                assert!((v - g.values[(6 - j) * 9 + i]).abs() < 1e-15);
            }
        }
        assert!(eval_grid(&unit, 0, 0, &bbox, &[1, 7]).is_err());
        let flat = BoundingBox::new(vec![0.0, -1.0], vec![0.0, 1.0]);
        assert!(matches!(eval_grid(&unit, 0, 0, &flat, &[4, 4]), Err(Error::ZeroVolume)));
    }

    #[test]
    fn grid_argmax_is_near_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let mut g = random_gaussian(&mut rng, 2);
            g.weight = 1.0;
            let m = MixtureBatch::from_channel(2, vec![g]).unwrap();
            let bbox = BoundingBox::new(vec![-4.0, -4.0], vec![4.0, 4.0]);
            let grid = eval_grid(&m, 0, 0, &bbox, &[40, 40]).unwrap();
            let c = grid.cell_center(&grid.unravel(grid.argmax()));
            let h = 8.0 / 40.0;
            assert!((c[0] - g.position[0]).abs() <= h && (c[1] - g.position[1]).abs() <= h);
        }
    }

    #[test]
    fn packed_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gs: Vec<_> = (0..6).map(|_| random_gaussian(&mut rng, 3)).collect();
        let m = MixtureBatch::new(3, 2, 1, 3, gs).unwrap();
        let p = m.packed_params();
        assert_eq!(p.len(), 6 * 10);
        assert_eq!(MixtureBatch::from_packed_params(3, 2, 1, 3, &p).unwrap(), m);
    }
}

#[cfg(test)]
pub(crate) use tests::random_gaussian;
