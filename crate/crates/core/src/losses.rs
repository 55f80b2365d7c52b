//! Cross-entropy, class-balanced, distillation and balanced-distillation
//! losses. Every loss returns its value together with the analytic gradient
//! with respect to the student logits.
//!
//! The cross-entropy term is always taken at temperature one; only the
//! distillation terms see `T`. Teacher probabilities are constants, so no
//! gradient is ever produced for them. `0 ln 0` is treated as zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_softmax_unchecked, softmax_unchecked, softmax_with_temperature};
use crate::weights::{WeightMode, WeightVector, DEFAULT_BETA};

/// Default distillation temperature.
pub const DEFAULT_TEMPERATURE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// `∂L/∂z`, one entry per class.
    pub grad_logits: Vec<f64>,
}

/// Teacher probabilities `softmax(ẑ / T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSoftTargets {
    probs: Vec<f64>,
}

impl TeacherSoftTargets {
    pub fn from_logits(teacher_logits: &[f64], temperature: f64) -> Result<Self> {
        Ok(Self { probs: softmax_with_temperature(teacher_logits, temperature)? })
    }

    /// Wraps an explicit distribution. Entries must be nonnegative and sum
    /// to one within `1e-9`.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty teacher distribution"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("teacher probabilities must be finite and nonnegative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("teacher probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    /// Weight of the cross-entropy term; `1 - alpha` goes to the KL term.
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { alpha: 0.5, temperature: DEFAULT_TEMPERATURE }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        check_temperature(self.temperature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BkdConfig {
    pub beta: f64,
    pub temperature: f64,
    pub weight_mode: WeightMode,
}

impl Default for BkdConfig {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA, temperature: DEFAULT_TEMPERATURE, weight_mode: WeightMode::Raw }
    }
}

impl BkdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::invalid(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        check_temperature(self.temperature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Ce,
    Cb,
    Kd,
    Bkd,
}

impl LossKind {
    pub fn needs_teacher(self) -> bool {
        matches!(self, LossKind::Kd | LossKind::Bkd)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::Cb => "cb",
            LossKind::Kd => "kd",
            LossKind::Bkd => "bkd",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "cb" => Ok(LossKind::Cb),
            "kd" => Ok(LossKind::Kd),
            "bkd" => Ok(LossKind::Bkd),
            other => Err(Error::invalid(format!("unknown loss {other:?} (expected ce, cb, kd or bkd)"))),
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {t}")))
    }
}

fn check_logits(z: &[f64], label: usize) -> Result<()> {
    if z.is_empty() {
        return Err(Error::invalid("empty logit vector"));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite logit at index {i}")));
    }
    if label >= z.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", z.len())));
    }
    Ok(())
}

fn check_len(what: &str, len: usize, expected: usize) -> Result<()> {
    if len != expected {
        return Err(Error::invalid(format!("{what} has {len} entries, expected {expected}")));
    }
    Ok(())
}

/// `Σ_i target_i (ln target_i - log_p_i)`, skipping zero-mass targets.
fn kl_from_log(target: &[f64], log_p: &[f64]) -> f64 {
    target.iter().zip(log_p).filter(|(&t, _)| t > 0.0).map(|(&t, &lp)| t * (t.ln() - lp)).sum()
}

/// Softmax cross-entropy `-ln p_y`.
pub fn ce_loss(z: &[f64], label: usize) -> Result<LossResult> {
    check_logits(z, label)?;
    Ok(ce_unchecked(z, label))
}

fn ce_unchecked(z: &[f64], label: usize) -> LossResult {
    let log_p = log_softmax_unchecked(z, 1.0);
    let mut grad = softmax_unchecked(z, 1.0);
    grad[label] -= 1.0;
    LossResult { value: -log_p[label], grad_logits: grad }
}

/// Class-balanced cross-entropy `-ω_y ln p_y`.
pub fn cb_loss(z: &[f64], label: usize, weights: &WeightVector) -> Result<LossResult> {
    check_logits(z, label)?;
    check_len("weight vector", weights.len(), z.len())?;
    let w = weights.as_slice()[label];
    let ce = ce_unchecked(z, label);
    Ok(LossResult { value: w * ce.value, grad_logits: ce.grad_logits.into_iter().map(|g| w * g).collect() })
}

/// `α L_CE + (1 - α) T² KL(p̂ ‖ softmax(z / T))`.
pub fn kd_loss(z: &[f64], teacher: &TeacherSoftTargets, label: usize, cfg: &KdConfig) -> Result<LossResult> {
    check_logits(z, label)?;
    check_len("teacher distribution", teacher.probs.len(), z.len())?;
    cfg.validate()?;
    let t = cfg.temperature;
    let alpha = cfg.alpha;

    let ce = ce_unchecked(z, label);
    let log_p_t = log_softmax_unchecked(z, t);
    let p_t = softmax_unchecked(z, t);
    let kl = kl_from_log(&teacher.probs, &log_p_t);

    let grad = ce
        .grad_logits
        .iter()
        .zip(p_t.iter().zip(&teacher.probs))
        .map(|(&g_ce, (&p, &q))| alpha * g_ce + (1.0 - alpha) * t * (p - q))
        .collect();
    Ok(LossResult { value: alpha * ce.value + (1.0 - alpha) * t * t * kl, grad_logits: grad })
}

/// Weighted teacher distribution `q_i = ω_i p̂_i / Σ_j ω_j p̂_j`.
pub fn balanced_targets(teacher: &TeacherSoftTargets, weights: &WeightVector) -> Result<Vec<f64>> {
    check_len("weight vector", weights.len(), teacher.probs.len())?;
    let mut q: Vec<f64> = teacher.probs.iter().zip(weights.as_slice()).map(|(p, w)| p * w).collect();
    let mass: f64 = q.iter().sum();
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::Invariant(format!("weighted teacher mass is {mass}; cannot normalize")));
    }
    for v in &mut q {
        *v /= mass;
    }
    Ok(q)
}

/// Result of [`bkd_loss`] with the two terms kept apart.
#[derive(Debug, Clone, PartialEq)]
pub struct BkdTerms {
    pub ce: f64,
    /// `T² Σ q_i ln(q_i / p_i)`; nonnegative up to rounding.
    pub distill: f64,
    pub result: LossResult,
}

/// `L_CE + T² Σ_i q_i ln(q_i / p_i)` with `q` the normalized class-weighted
/// teacher distribution and `p = softmax(z / T)`.
pub fn bkd_loss(
    z: &[f64],
    teacher: &TeacherSoftTargets,
    label: usize,
    weights: &WeightVector,
    cfg: &BkdConfig,
) -> Result<LossResult> {
    Ok(bkd_loss_terms(z, teacher, label, weights, cfg)?.result)
}

pub fn bkd_loss_terms(
    z: &[f64],
    teacher: &TeacherSoftTargets,
    label: usize,
    weights: &WeightVector,
    cfg: &BkdConfig,
) -> Result<BkdTerms> {
    check_logits(z, label)?;
    check_len("teacher distribution", teacher.probs.len(), z.len())?;
    cfg.validate()?;
    let t = cfg.temperature;

    let q = balanced_targets(teacher, weights)?;
    let ce = ce_unchecked(z, label);
    let log_p_t = log_softmax_unchecked(z, t);
    let p_t = softmax_unchecked(z, t);
    let distill = t * t * kl_from_log(&q, &log_p_t);

    let grad =
        ce.grad_logits.iter().zip(p_t.iter().zip(&q)).map(|(&g_ce, (&p, &qi))| g_ce + t * (p - qi)).collect();
    Ok(BkdTerms {
        ce: ce.value,
        distill,
        result: LossResult { value: ce.value + distill, grad_logits: grad },
    })
}

/// Closed-form class-balanced gradient, written case by case:
/// `ω_y (p_y - 1)` on the label, `ω_y p_k` elsewhere. Diagnostic only.
pub fn cb_grad_formula(z: &[f64], label: usize, weights: &WeightVector) -> Result<Vec<f64>> {
    check_logits(z, label)?;
    check_len("weight vector", weights.len(), z.len())?;
    let w_t = weights.as_slice()[label];
    let p = softmax_unchecked(z, 1.0);
    Ok(p.iter().enumerate().map(|(k, &p_k)| if k == label { w_t * (p_k - 1.0) } else { w_t * p_k }).collect())
}

/// Renormalized mimic target `(ω_k p̂_k + y_k) / Σ_i (ω_i p̂_i + y_i)` used by
/// the gradient analysis at `T = 1`.
pub fn mimic_target(teacher: &TeacherSoftTargets, label: usize, weights: &WeightVector) -> Result<Vec<f64>> {
    let c = teacher.probs.len();
    check_len("weight vector", weights.len(), c)?;
    if label >= c {
        return Err(Error::invalid(format!("label {label} out of range for {c} classes")));
    }
    let mut target: Vec<f64> = teacher.probs.iter().zip(weights.as_slice()).map(|(p, w)| w * p).collect();
    target[label] += 1.0;
    let s: f64 = target.iter().sum();
    for v in &mut target {
        *v /= s;
    }
    Ok(target)
}

/// Gradient analysis form at `T = 1`: `p_k - t_k` with `t` from
/// [`mimic_target`]. Diagnostic only; training uses [`bkd_loss`].
pub fn bkd_grad_formula(
    z: &[f64],
    teacher: &TeacherSoftTargets,
    label: usize,
    weights: &WeightVector,
) -> Result<Vec<f64>> {
    check_logits(z, label)?;
    check_len("teacher distribution", teacher.probs.len(), z.len())?;
    let target = mimic_target(teacher, label, weights)?;
    let p = softmax_unchecked(z, 1.0);
    Ok(p.iter().zip(&target).map(|(p, t)| p - t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;
    use crate::weights::{effective_number_weights, ClassCounts};

    fn fd_grad(f: impl Fn(&[f64]) -> f64, z: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..z.len())
            .map(|k| {
                let mut zp = z.to_vec();
                let mut zm = z.to_vec();
                zp[k] += h;
                zm[k] -= h;
                (f(&zp) - f(&zm)) / (2.0 * h)
            })
            .collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn random_logits(rng: &mut Rng, c: usize) -> Vec<f64> {
        (0..c).map(|_| 3.0 * rng.normal()).collect()
    }

    #[test]
    fn ce_examples() {
        let r = ce_loss(&[0.0; 10], 4).unwrap();
        assert!((r.value - 10f64.ln()).abs() < 1e-12);
        let r = ce_loss(&[0.0, 0.0], 0).unwrap();
        assert_eq!(r.grad_logits, vec![-0.5, 0.5]);
        assert!(ce_loss(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn ce_grad_matches_fd() {
        let mut rng = Rng::new(11);
        let z = random_logits(&mut rng, 5);
        let r = ce_loss(&z, 3).unwrap();
        let fd = fd_grad(|z| ce_loss(z, 3).unwrap().value, &z);
        assert!(max_abs_diff(&r.grad_logits, &fd) < 1e-7);
    }

    #[test]
    fn cb_examples() {
        let ones = WeightVector::uniform(4, 1.0).unwrap();
        let z = [0.3, -1.0, 2.0, 0.1];
        assert_eq!(cb_loss(&z, 2, &ones).unwrap(), ce_loss(&z, 2).unwrap());

        let w = WeightVector::new(vec![0.5, 1.0]).unwrap();
        let r = cb_loss(&[0.0, 0.0], 0, &w).unwrap();
        assert!((r.value - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(r.grad_logits, vec![-0.25, 0.25]);
    }

    #[test]
    fn cb_grad_matches_fd_and_formula() {
        let mut rng = Rng::new(12);
        let z = random_logits(&mut rng, 6);
        let w = WeightVector::new((0..6).map(|_| rng.uniform_range(0.1, 2.0)).collect()).unwrap();
        let r = cb_loss(&z, 1, &w).unwrap();
        let fd = fd_grad(|z| cb_loss(z, 1, &w).unwrap().value, &z);
        assert!(max_abs_diff(&r.grad_logits, &fd) < 1e-7);
        let formula = cb_grad_formula(&z, 1, &w).unwrap();
        assert!(max_abs_diff(&r.grad_logits, &formula) < 1e-12);

        let ones = WeightVector::uniform(2, 1.0).unwrap();
        assert_eq!(cb_grad_formula(&[0.0, 0.0], 0, &ones).unwrap(), vec![-0.5, 0.5]);
    }

    #[test]
    fn kd_examples() {
        let z = [0.4, -0.2, 1.5];
        let cfg = KdConfig { alpha: 0.3, temperature: 2.0 };
        let teacher = TeacherSoftTargets::from_logits(&z, 2.0).unwrap();
        let r = kd_loss(&z, &teacher, 0, &cfg).unwrap();
        let ce = ce_loss(&z, 0).unwrap();
        assert!((r.value - 0.3 * ce.value).abs() < 1e-12);

        let other = TeacherSoftTargets::from_logits(&[3.0, 0.0, -1.0], 2.0).unwrap();
        let alpha_one = KdConfig { alpha: 1.0, temperature: 2.0 };
        assert_eq!(kd_loss(&z, &other, 2, &alpha_one).unwrap(), ce_loss(&z, 2).unwrap());
    }

    #[test]
    fn kd_grad_matches_fd() {
        let mut rng = Rng::new(13);
        let z = random_logits(&mut rng, 5);
        let teacher = TeacherSoftTargets::from_logits(&random_logits(&mut rng, 5), 2.0).unwrap();
        let cfg = KdConfig { alpha: 0.5, temperature: 2.0 };
        let r = kd_loss(&z, &teacher, 4, &cfg).unwrap();
        let fd = fd_grad(|z| kd_loss(z, &teacher, 4, &cfg).unwrap().value, &z);
        assert!(max_abs_diff(&r.grad_logits, &fd) < 1e-7);
    }

    #[test]
    fn kd_rejects_bad_config() {
        let teacher = TeacherSoftTargets::from_probs(vec![0.5, 0.5]).unwrap();
        for cfg in [KdConfig { alpha: 1.5, temperature: 1.0 }, KdConfig { alpha: 0.5, temperature: 0.0 }] {
            assert!(kd_loss(&[0.0, 0.0], &teacher, 0, &cfg).is_err());
        }
    }

    #[test]
    fn bkd_constant_weights_reduce_to_ce_plus_kl() {
        let z = [0.2, 1.1, -0.7, 0.0];
        let teacher = TeacherSoftTargets::from_logits(&[1.0, 0.5, -2.0, 0.3], 2.0).unwrap();
        let w = WeightVector::uniform(4, 0.37).unwrap();
        let cfg = BkdConfig::default();
        let r = bkd_loss(&z, &teacher, 1, &w, &cfg).unwrap();

        let kd = kd_loss(&z, &teacher, 1, &KdConfig { alpha: 0.5, temperature: 2.0 }).unwrap();
        // kd with α = 1/2 is exactly half of the balanced loss here.
        assert!((r.value - 2.0 * kd.value).abs() < 1e-10);
        for (a, b) in r.grad_logits.iter().zip(&kd.grad_logits) {
            assert!((a - 2.0 * b).abs() < 1e-10);
        }
    }

    #[test]
    fn bkd_uniform_everything_is_ln_c() {
        let teacher = TeacherSoftTargets::from_probs(vec![0.2; 5]).unwrap();
        let w = WeightVector::uniform(5, 1.0).unwrap();
        let terms = bkd_loss_terms(&[0.0; 5], &teacher, 3, &w, &BkdConfig::default()).unwrap();
        assert!(terms.distill.abs() < 1e-15);
        assert!((terms.result.value - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bkd_grad_matches_fd() {
        let mut rng = Rng::new(14);
        let counts = ClassCounts::new(vec![100, 50, 20, 8, 2]).unwrap();
        let w = effective_number_weights(&counts, 0.99).unwrap();
        let cfg = BkdConfig { beta: 0.99, temperature: 2.0, weight_mode: WeightMode::Raw };
        let z = random_logits(&mut rng, 5);
        let teacher = TeacherSoftTargets::from_logits(&random_logits(&mut rng, 5), 2.0).unwrap();
        let r = bkd_loss(&z, &teacher, 0, &w, &cfg).unwrap();
        let fd = fd_grad(|z| bkd_loss(z, &teacher, 0, &w, &cfg).unwrap().value, &z);
        assert!(max_abs_diff(&r.grad_logits, &fd) < 1e-7);
    }

    #[test]
    fn bkd_zero_weighted_mass_is_invariant_error() {
        let teacher = TeacherSoftTargets::from_probs(vec![1.0, 0.0]).unwrap();
        let w = WeightVector::new(vec![0.0, 1.0]).unwrap();
        let err = bkd_loss(&[0.0, 0.0], &teacher, 0, &w, &BkdConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn zero_teacher_mass_is_legal() {
        let teacher = TeacherSoftTargets::from_probs(vec![1.0, 0.0, 0.0]).unwrap();
        let w = WeightVector::uniform(3, 1.0).unwrap();
        let r = bkd_loss(&[0.5, 0.1, -0.3], &teacher, 1, &w, &BkdConfig::default()).unwrap();
        assert!(r.value.is_finite());
        assert!(r.grad_logits.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn bkd_grad_formula_examples() {
        let z = [0.3, -0.4, 1.2];
        let teacher = TeacherSoftTargets::from_logits(&[0.1, 2.0, -1.0], 1.0).unwrap();
        let zero = WeightVector::uniform(3, 0.0).unwrap();
        let g = bkd_grad_formula(&z, &teacher, 1, &zero).unwrap();
        let ce = ce_loss(&z, 1).unwrap();
        assert!(max_abs_diff(&g, &ce.grad_logits) < 1e-15);

        let sharp = TeacherSoftTargets::from_probs(vec![0.0, 1.0, 0.0]).unwrap();
        let ones = WeightVector::uniform(3, 1.0).unwrap();
        assert_eq!(mimic_target(&sharp, 1, &ones).unwrap(), vec![0.0, 1.0, 0.0]);
        let g = bkd_grad_formula(&z, &sharp, 1, &ones).unwrap();
        assert!(max_abs_diff(&g, &ce.grad_logits) < 1e-15);
    }

    #[test]
    fn bkd_grad_formula_matches_fd_of_target_loss() {
        let mut rng = Rng::new(15);
        let z = random_logits(&mut rng, 4);
        let teacher = TeacherSoftTargets::from_logits(&random_logits(&mut rng, 4), 1.0).unwrap();
        let w = WeightVector::new(vec![0.01, 0.2, 0.5, 1.0]).unwrap();
        let target = mimic_target(&teacher, 2, &w).unwrap();
        let loss = |z: &[f64]| {
            let lp = log_softmax_unchecked(z, 1.0);
            -target.iter().zip(&lp).map(|(t, l)| t * l).sum::<f64>()
        };
        let g = bkd_grad_formula(&z, &teacher, 2, &w).unwrap();
        assert!(max_abs_diff(&g, &fd_grad(loss, &z)) < 1e-7);
    }

    #[test]
    fn cb_encouraging_gradient_scaled_by_weight() {
        let counts = ClassCounts::new(vec![5000, 500, 50]).unwrap();
        let w = effective_number_weights(&counts, 0.999).unwrap();
        let z = [0.5, 0.2, -0.1];
        let cb = cb_loss(&z, 0, &w).unwrap();
        let ce = ce_loss(&z, 0).unwrap();
        let w0 = w.as_slice()[0];
        assert!(w0 < 1.0);
        let ratio = cb.grad_logits[0] / ce.grad_logits[0];
        assert!((ratio - w0).abs() <= 1e-12 * w0);
        assert!(cb.grad_logits[0].abs() < ce.grad_logits[0].abs());
    }

    #[test]
    fn grad_gap_for_head_classes_is_bounded_by_weight() {
        // Every class is a head class, so max ω ≈ ω_head.
        let counts = ClassCounts::new(vec![1_000_000, 400_000, 200_000, 100_000]).unwrap();
        let w = effective_number_weights(&counts, 0.9999).unwrap();
        let w_head = w.as_slice()[3];
        let mut rng = Rng::new(16);
        for _ in 0..200 {
            let z = random_logits(&mut rng, 4);
            let teacher = TeacherSoftTargets::from_logits(&random_logits(&mut rng, 4), 1.0).unwrap();
            let label = rng.below(4) as usize;
            let g = bkd_grad_formula(&z, &teacher, label, &w).unwrap();
            let ce = ce_loss(&z, label).unwrap();
            assert!(max_abs_diff(&g, &ce.grad_logits) <= 2.0 * w_head);
        }
    }

    #[test]
    fn parse_loss_kind() {
        for k in ["ce", "cb", "kd", "bkd"] {
            assert_eq!(k.parse::<LossKind>().unwrap().to_string(), k);
        }
        assert!("focal".parse::<LossKind>().is_err());
    }
}
