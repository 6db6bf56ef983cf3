//! Classifier head: per-class integrals, batch normalization, log-softmax and
//! negative log-likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel batch normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// What the backward of a normalization needs.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    normalized: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// Batch statistics to fold into the running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &[Vec<f64>]) -> Result<()> {
        for row in x {
            if row.len() != self.channels() {
                return Err(Error::DimensionMismatch {
                    expected: self.channels(),
                    got: row.len(),
                });
            }
        }
        Ok(())
    }

    /// Normalizes `x` (batch × channels). With `training` and more than one
    /// row the batch statistics are used and returned; otherwise the running
    /// statistics are used.
    pub fn forward(&self, x: &[Vec<f64>], training: bool) -> Result<(Vec<Vec<f64>>, BatchNormCache, Option<BatchStats>)> {
        self.check(x)?;
        let c_n = self.channels();
        let b_n = x.len();
        let batch_stats = training && b_n > 1;
        let (mean, var, stats) = if batch_stats {
            let mut mean = vec![0.0; c_n];
            for row in x {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= b_n as f64);
            let mut var = vec![0.0; c_n];
            for row in x {
                for c in 0..c_n {
                    var[c] += (row[c] - mean[c]).powi(2);
                }
            }
            let biased: Vec<f64> = var.iter().map(|v| v / b_n as f64).collect();
            let unbiased: Vec<f64> = var.iter().map(|v| v / (b_n - 1) as f64).collect();
            (
                mean.clone(),
                biased,
                Some(BatchStats {
                    mean,
                    var: unbiased,
                }),
            )
        } else {
            (self.running_mean.clone(), self.running_var.clone(), None)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let normalized: Vec<Vec<f64>> = x
            .iter()
            .map(|row| (0..c_n).map(|c| (row[c] - mean[c]) * inv_std[c]).collect())
            .collect();
        let y = normalized
            .iter()
            .map(|row| (0..c_n).map(|c| self.gamma[c] * row[c] + self.beta[c]).collect())
            .collect();
        Ok((
            y,
            BatchNormCache {
                normalized,
                inv_std,
                batch_stats,
            },
            stats,
        ))
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(&self, cache: &BatchNormCache, dy: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let c_n = self.channels();
        let b_n = dy.len();
        let mut dgamma = vec![0.0; c_n];
        let mut dbeta = vec![0.0; c_n];
        for (row, xh) in dy.iter().zip(&cache.normalized) {
            for c in 0..c_n {
                dgamma[c] += row[c] * xh[c];
                dbeta[c] += row[c];
            }
        }
        let dx = dy
            .iter()
            .zip(&cache.normalized)
            .map(|(row, xh)| {
                (0..c_n)
                    .map(|c| {
                        let g = self.gamma[c] * cache.inv_std[c];
                        if cache.batch_stats {
                            g * (row[c] - dbeta[c] / b_n as f64 - xh[c] * dgamma[c] / b_n as f64)
                        } else {
                            g * row[c]
                        }
                    })
                    .collect()
            })
            .collect();
        (dx, dgamma, dbeta)
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c];
        }
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Mean negative log-likelihood of `labels` under the rows of `log_probs`.
pub fn nll_loss(log_probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if log_probs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: log_probs.len(),
            got: labels.len(),
        });
    }
    let mut s = 0.0;
    for (row, &l) in log_probs.iter().zip(labels) {
        let v = row
            .get(l)
            .ok_or_else(|| Error::IndexOutOfRange(format!("label {l} of {} classes", row.len())))?;
        s -= v;
    }
    Ok(s / labels.len() as f64)
}

/// Gradient of the mean NLL with respect to the logits.
pub fn nll_log_softmax_backward(log_probs: &[Vec<f64>], labels: &[usize]) -> Vec<Vec<f64>> {
    let b = labels.len() as f64;
    log_probs
        .iter()
        .zip(labels)
        .map(|(row, &l)| {
            row.iter()
                .enumerate()
                .map(|(c, lp)| (lp.exp() - if c == l { 1.0 } else { 0.0 }) / b)
                .collect()
        })
        .collect()
}

/// Integrals → batch normalization → log-softmax, row by row.
pub fn classifier_forward(bn: &BatchNorm, integrals: &[Vec<f64>], training: bool) -> Result<Vec<Vec<f64>>> {
    let (y, _, _) = bn.forward(integrals, training)?;
    Ok(y.iter().map(|r| log_softmax(r)).collect())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
