//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Perturbation used to look for discrete-structure changes.
    pub boundary_probe: f64,
    /// Floor of the relative-error denominator.
    pub denominator_floor: f64,
    /// Checks whose relative error reaches this also get a five-point
    /// estimate at `wide_step`, which is far less sensitive to rounding.
    pub confirm_above: f64,
    pub wide_step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            boundary_probe: 1e-4,
            denominator_floor: 1e-8,
            confirm_above: 1e-6,
            wide_step: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Five-point estimate at the wide step, when it was taken and the wide
    /// stencil kept the discrete structure.
    pub wide_numeric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: Vec<ParamCheck>,
    /// Parameters whose neighbourhood changes the discrete structure.
    pub skipped: Vec<usize>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checked.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checked.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(numeric: f64, analytic: f64, floor: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` for the parameters
/// in `indices`. `f` returns the loss and a fingerprint of the discrete
/// decisions it took; a parameter is skipped when moving it by the probe or
/// the step changes the fingerprint.
pub fn finite_difference_check<F>(
    f: F,
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, u64)>,
{
    if analytic.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: analytic.len(),
        });
    }
    let (v0, fp0) = f(params)?;
    let (v1, fp1) = f(params)?;
    if v0.to_bits() != v1.to_bits() || fp0 != fp1 {
        return Err(Error::NonDeterministic);
    }
    let mut report = GradCheckReport::default();
    let mut x = params.to_vec();
    for &i in indices {
        if i >= params.len() {
            return Err(Error::IndexOutOfRange(format!("parameter {i} of {}", params.len())));
        }
        let mut at = |delta: f64| -> Result<(f64, u64)> {
            x[i] = params[i] + delta;
            let r = f(&x);
            x[i] = params[i];
            r
        };
        let mut crosses = false;
        for d in [cfg.boundary_probe, -cfg.boundary_probe] {
            if at(d)?.1 != fp0 {
                crosses = true;
            }
        }
        let (plus, fp_plus) = at(cfg.step)?;
        let (minus, fp_minus) = at(-cfg.step)?;
        if crosses || fp_plus != fp0 || fp_minus != fp0 {
            report.skipped.push(i);
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let rel_error = relative_error(numeric, analytic[i], cfg.denominator_floor);
        let mut wide_numeric = None;
        if rel_error >= cfg.confirm_above {
            let h = cfg.wide_step;
            let mut v = [0.0; 4];
            let mut same = true;
            for (slot, d) in v.iter_mut().zip([2.0 * h, h, -h, -2.0 * h]) {
                let (y, fp) = at(d)?;
                same &= fp == fp0;
                *slot = y;
            }
            if same {
                wide_numeric = Some((-v[0] + 8.0 * v[1] - 8.0 * v[2] + v[3]) / (12.0 * h));
            }
        }
        report.checked.push(ParamCheck {
            index: i,
            analytic: analytic[i],
            numeric,
            rel_error,
            wide_numeric,
        });
    }
    Ok(report)
}
