//! One Gaussian convolution layer: convolution, activation fit, optional
//! reduction and optional domain rescale.

use serde::{Deserialize, Serialize};

use crate::activation::{fitting_errors, Activation, DenseFitConfig, FittingErrors};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gaussian::MixtureBatch;
use crate::reduce::ReductionConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub f_in: usize,
    pub f_out: usize,
    pub n_k: usize,
    /// Components per output channel after reduction.
    pub n_p: usize,
    pub reduce: bool,
    pub rescale: bool,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.f_in == 0 || self.f_out == 0 || self.n_k == 0 || self.n_p == 0 {
            return Err(Error::InvalidArgument(format!("layer counts must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Components per output channel for `n_in` input components per channel.
    pub fn output_components(&self, n_in: usize) -> usize {
        if self.reduce {
            self.n_p
        } else {
            self.f_in * n_in * self.n_k
        }
    }
}

/// Activation and reduction settings shared by every layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Pipeline {
    pub activation: Activation,
    pub dense_fit: DenseFitConfig,
    pub reduction: ReductionConfig,
}

fn check_input(input: &MixtureBatch, kernels: &MixtureBatch, spec: &LayerSpec) -> Result<()> {
    if input.channels() != spec.f_in {
        return Err(Error::ShapeMismatch(format!(
            "layer expects {} input channels, got {}",
            spec.f_in,
            input.channels()
        )));
    }
    if kernels.shape() != (spec.f_out, spec.f_in, spec.n_k) {
        return Err(Error::ShapeMismatch(format!(
            "kernels {:?} do not match layer {spec:?}",
            kernels.shape()
        )));
    }
    Ok(())
}

fn activate(tape: &mut Tape, x: MixtureBatch, pipeline: &Pipeline) -> Result<MixtureBatch> {
    match pipeline.activation {
        Activation::DenseFit => tape.dense_fit(x, &pipeline.dense_fit),
        Activation::ParameterSpace => tape.parameter_relu(x),
    }
}

/// Runs one layer, recording on `tape` under kernel index `layer`.
pub fn gcl_forward(
    tape: &mut Tape,
    layer: usize,
    input: MixtureBatch,
    kernels: &MixtureBatch,
    spec: &LayerSpec,
    pipeline: &Pipeline,
) -> Result<MixtureBatch> {
    check_input(&input, kernels, spec)?;
    let mut x = tape.convolution(layer, input, kernels)?;
    x = activate(tape, x, pipeline)?;
    if spec.reduce {
        x = tape.reduce(x, spec.n_p, &pipeline.reduction)?;
    }
    if spec.rescale {
        x = tape.rescale(x)?;
    }
    Ok(x)
}

/// Intermediate mixtures of one layer.
#[derive(Clone, Debug)]
pub struct LayerStages {
    pub convolved: MixtureBatch,
    pub activated: MixtureBatch,
    pub reduced: MixtureBatch,
    pub output: MixtureBatch,
}

impl LayerStages {
    /// Fitting errors of channel `(b, c)` at `n` positions drawn from the
    /// convolution output.
    pub fn fitting_errors(&self, b: usize, c: usize, n: usize, seed: u64) -> Result<FittingErrors> {
        fitting_errors(
            self.convolved.channel(b, c)?,
            self.activated.channel(b, c)?,
            self.reduced.channel(b, c)?,
            n,
            seed,
        )
    }
}

pub fn gcl_stages(input: MixtureBatch, kernels: &MixtureBatch, spec: &LayerSpec, pipeline: &Pipeline) -> Result<LayerStages> {
    check_input(&input, kernels, spec)?;
    let mut tape = Tape::disabled();
    let convolved = tape.convolution(0, input, kernels)?;
    let activated = activate(&mut tape, convolved.clone(), pipeline)?;
    let reduced = if spec.reduce {
        tape.reduce(activated.clone(), spec.n_p, &pipeline.reduction)?
    } else {
        activated.clone()
    };
    let output = if spec.rescale {
        tape.rescale(reduced.clone())?
    } else {
        reduced.clone()
    };
    Ok(LayerStages {
        convolved,
        activated,
        reduced,
        output,
    })
}
