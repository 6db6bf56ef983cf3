//! The full classifier: a chain of Gaussian convolution layers followed by the
//! integral/batch-norm/softmax head.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gaussian::MixtureBatch;
use crate::network::head::{log_softmax, nll_log_softmax_backward, nll_loss, BatchNorm, BatchStats};
use crate::network::kernels::{init_kernels, KernelSet, COVARIANCE_EPSILON};
use crate::network::layer::{gcl_forward, gcl_stages, LayerSpec, LayerStages, Pipeline};

fn default_epsilon() -> f64 {
    COVARIANCE_EPSILON
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dims: usize,
    pub input_channels: usize,
    pub input_components: usize,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default = "default_epsilon")]
    pub covariance_epsilon: f64,
}

impl ModelSpec {
    /// One layer per entry of `channels`, each halving the component count
    /// and rescaling, then a last layer to `classes` channels without
    /// reduction.
    pub fn halving(dims: usize, input_components: usize, channels: &[usize], classes: usize, n_k: usize) -> Self {
        let mut layers = Vec::with_capacity(channels.len() + 1);
        let mut f_in = 1;
        let mut n = input_components;
        for &f_out in channels {
            n = (n / 2).max(1);
            layers.push(LayerSpec {
                f_in,
                f_out,
                n_k,
                n_p: n,
                reduce: true,
                rescale: true,
            });
            f_in = f_out;
        }
        layers.push(LayerSpec {
            f_in,
            f_out: classes,
            n_k,
            n_p: f_in * n * n_k,
            reduce: false,
            rescale: false,
        });
        ModelSpec {
            dims,
            input_channels: 1,
            input_components,
            layers,
            classes,
            pipeline: Pipeline::default(),
            covariance_epsilon: COVARIANCE_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::gaussian::check_dims(self.dims)?;
        if self.layers.is_empty() || self.classes == 0 || self.input_channels == 0 || self.input_components == 0 {
            return Err(Error::InvalidArgument("model needs layers, classes and input".into()));
        }
        let mut f = self.input_channels;
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()?;
            if l.f_in != f {
                return Err(Error::ShapeMismatch(format!("layer {i} expects {} channels, gets {f}", l.f_in)));
            }
            f = l.f_out;
        }
        if f != self.classes {
            return Err(Error::ShapeMismatch(format!("last layer has {f} channels for {} classes", self.classes)));
        }
        Ok(())
    }

    /// Components per channel after each layer.
    pub fn component_counts(&self) -> Vec<usize> {
        let mut n = self.input_components;
        self.layers
            .iter()
            .map(|l| {
                n = l.output_components(n);
                n
            })
            .collect()
    }
}

fn combine_fingerprints(fps: impl Iterator<Item = u64>) -> u64 {
    fps.enumerate()
        .fold(0u64, |acc, (i, f)| acc.rotate_left(7) ^ f ^ i as u64)
}

/// Result of one loss evaluation.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// NLL plus scaled weight decay.
    pub loss: f64,
    pub nll: f64,
    pub weight_decay: f64,
    /// Gradient in [`Model::params`] order.
    pub grad: Vec<f64>,
    pub log_probs: Vec<Vec<f64>>,
    /// Batch statistics to fold into the running averages.
    pub bn_stats: Option<BatchStats>,
    /// Combined fingerprint of every discrete decision in the batch.
    pub fingerprint: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub kernels: Vec<KernelSet>,
    pub bn: BatchNorm,
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    model: Model,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut kernels = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let mut k = init_kernels(spec.dims, l.f_out, l.f_in, l.n_k, seed.wrapping_add(i as u64))?;
            k.epsilon = spec.covariance_epsilon;
            kernels.push(k);
        }
        let bn = BatchNorm::new(spec.classes);
        Ok(Model { spec, kernels, bn })
    }

    pub fn param_count(&self) -> usize {
        self.kernels.iter().map(|k| k.param_count()).sum::<usize>() + 2 * self.spec.classes
    }

    /// Kernel parameters layer by layer, then batch-norm scale and shift.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for k in &self.kernels {
            p.extend(k.params());
        }
        p.extend(&self.bn.gamma);
        p.extend(&self.bn.beta);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: p.len(),
            });
        }
        let mut at = 0;
        for k in &mut self.kernels {
            let n = k.param_count();
            k.set_params(&p[at..at + n])?;
            at += n;
        }
        let c = self.spec.classes;
        self.bn.gamma.copy_from_slice(&p[at..at + c]);
        self.bn.beta.copy_from_slice(&p[at + c..at + 2 * c]);
        Ok(())
    }

    /// Range of each layer's kernel parameters within [`Model::params`].
    pub fn kernel_param_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut at = 0;
        self.kernels
            .iter()
            .map(|k| {
                let r = at..at + k.param_count();
                at = r.end;
                r
            })
            .collect()
    }

    pub fn materialize_kernels(&self) -> Result<Vec<MixtureBatch>> {
        self.kernels.iter().map(|k| k.materialize()).collect()
    }

    fn check_input(&self, input: &MixtureBatch) -> Result<()> {
        if input.dims() != self.spec.dims {
            return Err(Error::DimensionMismatch {
                expected: self.spec.dims,
                got: input.dims(),
            });
        }
        if input.channels() != self.spec.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} input channels, got {}",
                self.spec.input_channels,
                input.channels()
            )));
        }
        Ok(())
    }

    /// Per-class integrals of one sample (batch of one).
    pub fn sample_integrals(&self, kernels: &[MixtureBatch], sample: MixtureBatch, tape: &mut Tape) -> Result<Vec<f64>> {
        let mut x = sample;
        for (i, l) in self.spec.layers.iter().enumerate() {
            x = gcl_forward(tape, i, x, &kernels[i], l, &self.spec.pipeline)?;
        }
        Ok(tape.integral(x))
    }

    /// Per-class integrals of every sample, computed in parallel.
    pub fn integrals(&self, input: &MixtureBatch) -> Result<Vec<Vec<f64>>> {
        self.check_input(input)?;
        let kernels = self.materialize_kernels()?;
        (0..input.batch())
            .into_par_iter()
            .map(|b| self.sample_integrals(&kernels, input.sample(b)?, &mut Tape::disabled()))
            .collect()
    }

    /// Class log-probabilities with running batch-norm statistics.
    pub fn forward(&self, input: &MixtureBatch) -> Result<Vec<Vec<f64>>> {
        let integrals = self.integrals(input)?;
        let (y, _, _) = self.bn.forward(&integrals, false)?;
        Ok(y.iter().map(|r| log_softmax(r)).collect())
    }

    /// Intermediate mixtures of every layer for sample `b`.
    pub fn stages(&self, input: &MixtureBatch, b: usize) -> Result<Vec<LayerStages>> {
        self.check_input(input)?;
        let kernels = self.materialize_kernels()?;
        let mut x = input.sample(b)?;
        let mut out = Vec::with_capacity(self.spec.layers.len());
        for (i, l) in self.spec.layers.iter().enumerate() {
            let st = gcl_stages(x, &kernels[i], l, &self.spec.pipeline)?;
            x = st.output.clone();
            out.push(st);
        }
        Ok(out)
    }

    /// Loss `NLL + weight_decay · Σ decay` and its gradient. Batch statistics
    /// are used when `training` and the batch has more than one sample.
    pub fn loss_and_grad(
        &self,
        input: &MixtureBatch,
        labels: &[usize],
        training: bool,
        weight_decay: f64,
    ) -> Result<StepOutput> {
        self.check_input(input)?;
        if labels.len() != input.batch() {
            return Err(Error::DimensionMismatch {
                expected: input.batch(),
                got: labels.len(),
            });
        }
        let kernels = self.materialize_kernels()?;
        let forward: Vec<(Vec<f64>, Tape)> = (0..input.batch())
            .into_par_iter()
            .map(|b| {
                let mut tape = Tape::recording();
                let v = self.sample_integrals(&kernels, input.sample(b)?, &mut tape)?;
                Ok((v, tape))
            })
            .collect::<Result<_>>()?;
        let integrals: Vec<Vec<f64>> = forward.iter().map(|(v, _)| v.clone()).collect();
        let (y, cache, bn_stats) = self.bn.forward(&integrals, training)?;
        let log_probs: Vec<Vec<f64>> = y.iter().map(|r| log_softmax(r)).collect();
        let nll = nll_loss(&log_probs, labels)?;
        let dy = nll_log_softmax_backward(&log_probs, labels);
        let (dx, dgamma, dbeta) = self.bn.backward(&cache, &dy);

        let sample_grads: Vec<Vec<MixtureBatch>> = forward
            .par_iter()
            .zip(dx.par_iter())
            .map(|((_, tape), d)| tape.backward(&kernels, d))
            .collect::<Result<_>>()?;
        let fingerprint = combine_fingerprints(forward.iter().map(|(_, t)| t.fingerprint()));
        let mut acc: Vec<MixtureBatch> = kernels.iter().map(|k| k.zeros_like()).collect();
        for per_layer in &sample_grads {
            for (a, g) in acc.iter_mut().zip(per_layer) {
                for (x, y) in a.gaussians_mut().iter_mut().zip(g.gaussians()) {
                    x.add_assign(y);
                }
            }
        }
        let mut grad = Vec::with_capacity(self.param_count());
        let mut decay = 0.0;
        for (k, g) in self.kernels.iter().zip(&acc) {
            let mut pg = k.params_grad(g)?;
            if weight_decay != 0.0 {
                decay += k.weight_decay_loss();
                for (p, d) in pg.iter_mut().zip(k.weight_decay_grad()) {
                    *p += weight_decay * d;
                }
            }
            grad.extend(pg);
        }
        grad.extend(dgamma);
        grad.extend(dbeta);
        Ok(StepOutput {
            loss: nll + weight_decay * decay,
            nll,
            weight_decay: decay,
            grad,
            log_probs,
            bn_stats,
            fingerprint,
        })
    }

    /// Loss of [`Model::loss_and_grad`] without the gradient, with the
    /// fingerprint of the discrete decisions.
    pub fn loss_with_fingerprint(
        &self,
        input: &MixtureBatch,
        labels: &[usize],
        training: bool,
        weight_decay: f64,
    ) -> Result<(f64, u64)> {
        self.check_input(input)?;
        let kernels = self.materialize_kernels()?;
        let forward: Vec<(Vec<f64>, u64)> = (0..input.batch())
            .into_par_iter()
            .map(|b| {
                let mut tape = Tape::recording();
                let v = self.sample_integrals(&kernels, input.sample(b)?, &mut tape)?;
                Ok((v, tape.fingerprint()))
            })
            .collect::<Result<_>>()?;
        let integrals: Vec<Vec<f64>> = forward.iter().map(|(v, _)| v.clone()).collect();
        let (y, _, _) = self.bn.forward(&integrals, training)?;
        let log_probs: Vec<Vec<f64>> = y.iter().map(|r| log_softmax(r)).collect();
        let mut loss = nll_loss(&log_probs, labels)?;
        if weight_decay != 0.0 {
            loss += weight_decay * self.kernels.iter().map(|k| k.weight_decay_loss()).sum::<f64>();
        }
        Ok((loss, combine_fingerprints(forward.iter().map(|(_, f)| *f))))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", file.version)));
        }
        file.model.spec.validate()?;
        Ok(file.model)
    }
}
