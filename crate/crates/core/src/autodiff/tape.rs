//! Operation-level tape for the mixture pipeline.
//!
//! Each method runs one differentiable operation on a [`MixtureBatch`] and,
//! when recording, keeps what its backward needs. [`Tape::backward`] walks
//! the records in reverse and returns the cotangents of every kernel set used
//! by a convolution.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::activation::{
    parameter_space_relu, parameter_space_relu_backward, relu_dense_fit, relu_dense_fit_backward, DenseFit,
    DenseFitConfig,
};
use crate::error::{Error, Result};
use crate::gaussian::{
    convolution_layer, convolution_layer_backward, mixture_integral, mixture_integral_backward, rescale_domain,
    rescale_domain_backward, DomainScale, MixtureBatch,
};
use crate::reduce::{reduce, reduce_backward, NodeFit, ReductionConfig, ReductionRecord};

/// One executed operation.
#[derive(Clone, Debug)]
pub enum Record {
    Convolution {
        layer: usize,
        input: MixtureBatch,
    },
    DenseFit {
        input: MixtureBatch,
        fits: Vec<DenseFit>,
        cfg: DenseFitConfig,
    },
    ParameterRelu {
        input: MixtureBatch,
    },
    Reduce {
        input: MixtureBatch,
        n_p: usize,
        records: Vec<ReductionRecord>,
        cfg: ReductionConfig,
    },
    Rescale {
        input: MixtureBatch,
        scales: Vec<DomainScale>,
    },
    Integral {
        input: MixtureBatch,
    },
}

/// Ordered operation records of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    records: Vec<Record>,
    recording: bool,
}

impl Tape {
    pub fn recording() -> Self {
        Tape {
            records: Vec::new(),
            recording: true,
        }
    }

    /// A tape that runs operations without keeping anything.
    pub fn disabled() -> Self {
        Tape::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn push(&mut self, r: Record) {
        if self.recording {
            self.records.push(r);
        }
    }

    pub fn convolution(&mut self, layer: usize, input: MixtureBatch, kernels: &MixtureBatch) -> Result<MixtureBatch> {
        let out = convolution_layer(&input, kernels)?;
        self.push(Record::Convolution { layer, input });
        Ok(out)
    }

    pub fn dense_fit(&mut self, input: MixtureBatch, cfg: &DenseFitConfig) -> Result<MixtureBatch> {
        let mut out = input.clone();
        let mut fits = Vec::with_capacity(input.batch() * input.channels());
        for b in 0..input.batch() {
            for c in 0..input.channels() {
                let fit = relu_dense_fit(input.channel(b, c)?, cfg)?;
                out.channel_mut(b, c)?.copy_from_slice(&fit.gaussians);
                fits.push(fit);
            }
        }
        self.push(Record::DenseFit {
            input,
            fits,
            cfg: *cfg,
        });
        Ok(out)
    }

    pub fn parameter_relu(&mut self, input: MixtureBatch) -> Result<MixtureBatch> {
        let mut out = input.clone();
        let relu = parameter_space_relu(input.gaussians());
        out.gaussians_mut().copy_from_slice(&relu);
        self.push(Record::ParameterRelu { input });
        Ok(out)
    }

    pub fn reduce(&mut self, input: MixtureBatch, n_p: usize, cfg: &ReductionConfig) -> Result<MixtureBatch> {
        let (b_n, f_n, _) = input.shape();
        let mut gs = Vec::with_capacity(b_n * f_n * n_p);
        let mut records = Vec::with_capacity(b_n * f_n);
        for ch in input.channels_iter() {
            let (out, rec) = reduce(ch, n_p, cfg)?;
            gs.extend(out);
            records.push(rec);
        }
        let out = MixtureBatch::new(input.dims(), b_n, f_n, n_p, gs)?;
        self.push(Record::Reduce {
            input,
            n_p,
            records,
            cfg: *cfg,
        });
        Ok(out)
    }

    pub fn rescale(&mut self, input: MixtureBatch) -> Result<MixtureBatch> {
        let (out, scales) = rescale_domain(&input)?;
        self.push(Record::Rescale { input, scales });
        Ok(out)
    }

    pub fn integral(&mut self, input: MixtureBatch) -> Vec<f64> {
        let out = mixture_integral(&input);
        self.push(Record::Integral { input });
        out
    }

    /// Hash of every discrete decision taken during the forward pass: signs
    /// seen by the activations, clamped components, reduction picks, tree
    /// orders and top-down selections.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for r in &self.records {
            match r {
                Record::DenseFit { input, fits, .. } => {
                    for g in input.gaussians() {
                        (g.weight > 0.0).hash(&mut h);
                    }
                    for f in fits {
                        for s in &f.target {
                            (*s > 0.0).hash(&mut h);
                        }
                        f.clamped.hash(&mut h);
                        f.epsilon_source.hash(&mut h);
                    }
                }
                Record::ParameterRelu { input } => {
                    for g in input.gaussians() {
                        (g.weight > 0.0).hash(&mut h);
                    }
                }
                Record::Reduce { records, .. } => {
                    for rec in records {
                        match rec {
                            ReductionRecord::Identity { inputs } => inputs.hash(&mut h),
                            ReductionRecord::ModifiedEm { picks } => picks.hash(&mut h),
                            ReductionRecord::TreeHem(t) => {
                                t.tree.order.hash(&mut h);
                                t.selection.hash(&mut h);
                                for c in &t.caches {
                                    if let NodeFit::Fitted { picks } = &c.fit {
                                        picks.hash(&mut h);
                                    }
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Propagates the cotangent of the final integrals back through every
    /// record. Returns one kernel cotangent per entry of `kernels`; kernels no
    /// convolution used get zeros.
    pub fn backward(&self, kernels: &[MixtureBatch], grad_integrals: &[f64]) -> Result<Vec<MixtureBatch>> {
        let (last, rest) = self
            .records
            .split_last()
            .ok_or_else(|| Error::TapeMismatch("empty tape".into()))?;
        let grad = match last {
            Record::Integral { input } => mixture_integral_backward(input, grad_integrals)?,
            _ => return Err(Error::TapeMismatch("tape must end with an integral".into())),
        };
        let (_, kernel_grads) = propagate(rest, kernels, grad)?;
        Ok(kernel_grads)
    }

    /// Propagates a cotangent on the last output back to the first input.
    /// Returns the input cotangent and one cotangent per kernel set.
    pub fn backward_mixture(&self, kernels: &[MixtureBatch], grad: MixtureBatch) -> Result<(MixtureBatch, Vec<MixtureBatch>)> {
        propagate(&self.records, kernels, grad)
    }
}

fn propagate(
    records: &[Record],
    kernels: &[MixtureBatch],
    mut grad: MixtureBatch,
) -> Result<(MixtureBatch, Vec<MixtureBatch>)> {
    let mut kernel_grads: Vec<MixtureBatch> = kernels.iter().map(|k| k.zeros_like()).collect();
    for r in records.iter().rev() {
        grad = match r {
            Record::Integral { .. } => {
                return Err(Error::TapeMismatch("integral in the middle of the tape".into()));
            }
            Record::Rescale { input, scales } => rescale_domain_backward(input, scales, &grad)?,
            Record::Reduce {
                input,
                n_p,
                records,
                cfg,
            } => {
                if grad.components() != *n_p || records.len() != input.batch() * input.channels() {
                    return Err(Error::TapeMismatch("reduction cotangent shape".into()));
                }
                let mut out = input.zeros_like();
                let mut i = 0;
                for b in 0..input.batch() {
                    for c in 0..input.channels() {
                        let g = reduce_backward(input.channel(b, c)?, &records[i], cfg, grad.channel(b, c)?)?;
                        out.channel_mut(b, c)?.copy_from_slice(&g);
                        i += 1;
                    }
                }
                out
            }
            Record::DenseFit { input, fits, cfg } => {
                if grad.shape() != input.shape() {
                    return Err(Error::TapeMismatch("dense fit cotangent shape".into()));
                }
                let mut out = input.zeros_like();
                let mut i = 0;
                for b in 0..input.batch() {
                    for c in 0..input.channels() {
                        let g = relu_dense_fit_backward(input.channel(b, c)?, &fits[i], cfg, grad.channel(b, c)?)?;
                        out.channel_mut(b, c)?.copy_from_slice(&g);
                        i += 1;
                    }
                }
                out
            }
            Record::ParameterRelu { input } => {
                if grad.shape() != input.shape() {
                    return Err(Error::TapeMismatch("activation cotangent shape".into()));
                }
                let g = parameter_space_relu_backward(input.gaussians(), grad.gaussians());
                let mut out = input.zeros_like();
                out.gaussians_mut().copy_from_slice(&g);
                out
            }
            Record::Convolution { layer, input } => {
                let k = kernels
                    .get(*layer)
                    .ok_or_else(|| Error::TapeMismatch(format!("no kernels for layer {layer}")))?;
                let (gin, gk) = convolution_layer_backward(input, k, &grad)?;
                for (acc, g) in kernel_grads[*layer].gaussians_mut().iter_mut().zip(gk.gaussians()) {
                    acc.add_assign(g);
                }
                gin
            }
        };
    }
    Ok((grad, kernel_grads))
}
