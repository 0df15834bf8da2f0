//! L2-regularized logistic regression trained by iteratively reweighted
//! least squares on standardized features.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LogisticError {
    #[error("training data contains a single class")]
    SingleClass,
    #[error("no training samples")]
    Empty,
    #[error("feature rows have inconsistent length")]
    RaggedFeatures,
    #[error("non-finite feature value in sample {0}")]
    NonFinite(usize),
    #[error("IRLS step stayed singular after regularization increases")]
    Singular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    /// L2 penalty on standardized feature weights; the bias is unpenalized.
    pub lambda: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            max_iterations: 100,
            tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Weights on raw features followed by the bias, so that
    /// `p = logistic(theta . [x, 1])`.
    pub theta: Vec<f64>,
    /// Weights in standardized space, bias last.
    pub standardized_weights: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        let d = self.theta.len() - 1;
        debug_assert_eq!(x.len(), d);
        x.iter().zip(&self.theta[..d]).map(|(a, b)| a * b).sum::<f64>() + self.theta[d]
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        logistic(self.decision(x))
    }

    pub fn dimension(&self) -> usize {
        self.theta.len() - 1
    }
}

/// Fits `p(y=1|x)`. Constant features get unit scale and end up with a zero
/// weight.
pub fn train_logistic(x: &[Vec<f64>], y: &[bool], cfg: &LogisticConfig) -> Result<LogisticModel, LogisticError> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(LogisticError::Empty);
    }
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(LogisticError::SingleClass);
    }
    let d = x[0].len();
    for (i, row) in x.iter().enumerate() {
        if row.len() != d {
            return Err(LogisticError::RaggedFeatures);
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(LogisticError::NonFinite(i));
        }
    }
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    for row in x {
        for j in 0..d {
            scale[j] += (row[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let constant: Vec<bool> = scale.iter().map(|s| s.sqrt() <= 1e-12).collect();
    for (s, &c) in scale.iter_mut().zip(&constant) {
        *s = if c { 1.0 } else { s.sqrt() };
    }
    let z = DMatrix::from_fn(n, d + 1, |i, j| {
        if j == d {
            1.0
        } else if constant[j] {
            0.0
        } else {
            (x[i][j] - mean[j]) / scale[j]
        }
    });
    let target = DVector::from_fn(n, |i, _| if y[i] { 1.0 } else { 0.0 });
    let mut penalty = DVector::from_element(d + 1, cfg.lambda);
    penalty[d] = 0.0;

    let mut w = DVector::zeros(d + 1);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let eta = &z * &w;
        let p = eta.map(logistic);
        let s = p.map(|v| (v * (1.0 - v)).max(1e-12));
        let zs = DMatrix::from_fn(n, d + 1, |i, j| z[(i, j)] * s[i]);
        let mut h = z.transpose() * zs;
        let mut g = z.transpose() * (&target - &p);
        for k in 0..=d {
            h[(k, k)] += penalty[k];
            g[k] -= penalty[k] * w[k];
        }
        let mut extra = cfg.lambda.max(1e-8);
        let mut step = None;
        for _ in 0..10 {
            if let Some(chol) = h.clone().cholesky() {
                step = Some(chol.solve(&g));
                break;
            }
            for k in 0..=d {
                h[(k, k)] += extra;
            }
            extra *= 10.0;
        }
        let step = step.ok_or(LogisticError::Singular)?;
        w += &step;
        if step.norm() < cfg.tolerance {
            converged = true;
            break;
        }
    }
    let mut theta = vec![0.0; d + 1];
    theta[d] = w[d];
    for j in 0..d {
        theta[j] = w[j] / scale[j];
        theta[d] -= w[j] * mean[j] / scale[j];
    }
    Ok(LogisticModel {
        theta,
        standardized_weights: w.iter().copied().collect(),
        feature_mean: mean,
        feature_scale: scale,
        iterations,
        converged,
    })
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
