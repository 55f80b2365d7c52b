//! Effective-number class weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default β for the effective-number weights.
pub const DEFAULT_BETA: f64 = 0.9999;

/// Per-class training-sample counts. Every class must be present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(Vec<usize>);

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("class counts must cover at least one class"));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("class {c} has no training samples")));
        }
        Ok(Self(counts))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Wraps arbitrary nonnegative finite weights.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("empty weight vector"));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!(
                "weight {i} must be finite and nonnegative, got {}",
                weights[i]
            )));
        }
        Ok(Self(weights))
    }

    pub fn uniform(num_classes: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WeightMode {
    #[default]
    Raw,
    /// Rescale so the weights sum to the number of classes.
    MeanOne,
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Raw => "raw",
            WeightMode::MeanOne => "mean-one",
        })
    }
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(WeightMode::Raw),
            "mean-one" => Ok(WeightMode::MeanOne),
            other => Err(Error::invalid(format!("unknown weight mode {other:?} (expected raw or mean-one)"))),
        }
    }
}

/// `ω_i = (1 - β) / (1 - β^{n_i})`.
///
/// The denominator is evaluated as `-expm1(n ln(1 - (1 - β)))` so that β close
/// to one does not lose every significant digit to cancellation.
pub fn effective_number_weights(counts: &ClassCounts, beta: f64) -> Result<WeightVector> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!("beta must lie in (0, 1), got {beta}")));
    }
    let one_minus_beta = 1.0 - beta;
    let ln_beta = (-one_minus_beta).ln_1p();
    let weights = counts
        .as_slice()
        .iter()
        .map(|&n| if n == 1 { 1.0 } else { one_minus_beta / -(n as f64 * ln_beta).exp_m1() })
        .collect();
    Ok(WeightVector(weights))
}

pub fn normalize_weights(weights: &WeightVector, mode: WeightMode) -> WeightVector {
    match mode {
        WeightMode::Raw => weights.clone(),
        WeightMode::MeanOne => {
            let sum: f64 = weights.0.iter().sum();
            let scale = weights.len() as f64 / sum;
            WeightVector(weights.0.iter().map(|w| w * scale).collect())
        }
    }
}

/// Effective-number weights followed by the configured normalization.
pub fn class_weights(counts: &ClassCounts, beta: f64, mode: WeightMode) -> Result<WeightVector> {
    Ok(normalize_weights(&effective_number_weights(counts, beta)?, mode))
}
