//! Finite-difference verification of every analytic gradient, as run by
//! `bkd gradcheck`.

use std::fmt;

use crate::error::Result;
use crate::losses::{
    bkd_grad_formula, bkd_loss, cb_grad_formula, cb_loss, ce_loss, kd_loss, mimic_target, BkdConfig,
    KdConfig, LossKind, TeacherSoftTargets,
};
use crate::math::{log_softmax_unchecked, Rng};
use crate::mlp::{backward, forward, init_mlp, predict_logits, MlpParams};
use crate::weights::{WeightMode, WeightVector};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
pub const TEMPERATURES: [f64; 3] = [1.0, 2.0, 4.0];

/// Central differences `(f(z + h e_k) - f(z - h e_k)) / 2h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
    let mut probe = z.to_vec();
    (0..z.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let plus = f(&probe);
            probe[k] = orig - h;
            let minus = f(&probe);
            probe[k] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst error seen by one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckSummary {
    pub name: &'static str,
    pub trials: usize,
    pub worst_error: f64,
    pub worst_trial: usize,
}

impl CheckSummary {
    fn new(name: &'static str) -> Self {
        Self { name, trials: 0, worst_error: 0.0, worst_trial: 0 }
    }

    fn record(&mut self, trial: usize, err: f64) {
        self.trials += 1;
        if err > self.worst_error || err.is_nan() {
            self.worst_error = err;
            self.worst_trial = trial;
        }
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.worst_error <= tol
    }
}

impl fmt::Display for CheckSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} trials={:<4} worst={:.3e} (trial {})",
            self.name, self.trials, self.worst_error, self.worst_trial
        )
    }
}

/// One random loss-level problem.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub logits: Vec<f64>,
    pub teacher_logits: Vec<f64>,
    pub label: usize,
    pub weights: WeightVector,
    pub temperature: f64,
    pub alpha: f64,
}

impl LossInstance {
    /// `C ∈ [2, 10]`, `T ∈ {1, 2, 4}`, positive weights in `[0.01, 2)`.
    pub fn random(rng: &mut Rng) -> Self {
        let c = 2 + rng.below(9) as usize;
        let logits = (0..c).map(|_| 2.0 * rng.normal()).collect();
        let teacher_logits = (0..c).map(|_| 2.0 * rng.normal()).collect();
        let weights = (0..c).map(|_| rng.uniform_range(0.01, 2.0)).collect();
        Self {
            logits,
            teacher_logits,
            label: rng.below(c as u64) as usize,
            weights: WeightVector::new(weights).expect("positive weights"),
            temperature: TEMPERATURES[rng.below(3) as usize],
            alpha: rng.uniform(),
        }
    }

    pub fn kd_config(&self) -> KdConfig {
        KdConfig { alpha: self.alpha, temperature: self.temperature }
    }

    pub fn bkd_config(&self) -> BkdConfig {
        BkdConfig { beta: 0.9999, temperature: self.temperature, weight_mode: WeightMode::Raw }
    }

    pub fn soft_targets(&self, temperature: f64) -> TeacherSoftTargets {
        TeacherSoftTargets::from_logits(&self.teacher_logits, temperature).expect("finite teacher logits")
    }

    /// Analytic gradient and its finite-difference estimate for `kind`.
    pub fn loss_gradients(&self, kind: LossKind) -> Result<(Vec<f64>, Vec<f64>)> {
        let z = &self.logits;
        let y = self.label;
        let soft = self.soft_targets(self.temperature);
        let (kd, bkd) = (self.kd_config(), self.bkd_config());
        let value = |z: &[f64]| -> f64 {
            match kind {
                LossKind::Ce => ce_loss(z, y),
                LossKind::Cb => cb_loss(z, y, &self.weights),
                LossKind::Kd => kd_loss(z, &soft, y, &kd),
                LossKind::Bkd => bkd_loss(z, &soft, y, &self.weights, &bkd),
            }
            .expect("valid instance")
            .value
        };
        let analytic = match kind {
            LossKind::Ce => ce_loss(z, y)?,
            LossKind::Cb => cb_loss(z, y, &self.weights)?,
            LossKind::Kd => kd_loss(z, &soft, y, &kd)?,
            LossKind::Bkd => bkd_loss(z, &soft, y, &self.weights, &bkd)?,
        }
        .grad_logits;
        Ok((analytic, central_difference(value, z, FD_STEP)))
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub checks: Vec<CheckSummary>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed(TOLERANCE))
    }

    pub fn worst(&self) -> Option<&CheckSummary> {
        self.checks.iter().max_by(|a, b| a.worst_error.total_cmp(&b.worst_error))
    }
}

/// Sum of `c ⊙ logits` through an MLP; lets one loss gradient drive backward.
fn mlp_param_error(
    params: &MlpParams,
    x: &[f64],
    label: usize,
    kind: LossKind,
    inst: &LossInstance,
) -> Result<f64> {
    let soft = inst.soft_targets(inst.temperature);
    let (kd, bkd) = (inst.kd_config(), inst.bkd_config());
    let loss_of = |z: &[f64]| match kind {
        LossKind::Ce => ce_loss(z, label),
        LossKind::Cb => cb_loss(z, label, &inst.weights),
        LossKind::Kd => kd_loss(z, &soft, label, &kd),
        LossKind::Bkd => bkd_loss(z, &soft, label, &inst.weights, &bkd),
    };
    let (z, cache) = forward(params, x)?;
    let grads = backward(params, &cache, &loss_of(&z)?.grad_logits)?;
    let analytic: Vec<f64> = grads.values().copied().collect();
    let flat: Vec<f64> = params.values().copied().collect();
    let rebuild = |v: &[f64]| {
        let mut p = params.clone();
        p.values_mut().zip(v).for_each(|(d, s)| *d = *s);
        p
    };
    let f = |v: &[f64]| {
        let z = predict_logits(&rebuild(v), x).expect("shape preserved");
        loss_of(&z).expect("valid instance").value
    };
    Ok(max_abs_diff(&analytic, &central_difference(f, &flat, FD_STEP)))
}

/// Runs every loss-level check `trials` times and the network-level checks
/// `min(trials, 20)` times.
pub fn run_gradchecks(trials: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let kinds = [LossKind::Ce, LossKind::Cb, LossKind::Kd, LossKind::Bkd];
    let mut loss_checks: Vec<CheckSummary> =
        ["ce", "cb", "kd", "bkd"].into_iter().map(CheckSummary::new).collect();
    let mut cb_formula = CheckSummary::new("cb-formula");
    let mut bkd_formula = CheckSummary::new("bkd-formula");

    for trial in 0..trials {
        let inst = LossInstance::random(&mut rng);
        for (kind, summary) in kinds.iter().zip(&mut loss_checks) {
            let (analytic, fd) = inst.loss_gradients(*kind)?;
            summary.record(trial, max_abs_diff(&analytic, &fd));
        }

        let cb = cb_loss(&inst.logits, inst.label, &inst.weights)?;
        let closed = cb_grad_formula(&inst.logits, inst.label, &inst.weights)?;
        cb_formula.record(trial, max_abs_diff(&cb.grad_logits, &closed));

        let soft = inst.soft_targets(1.0);
        let target = mimic_target(&soft, inst.label, &inst.weights)?;
        let target_loss = |z: &[f64]| -> f64 {
            -target.iter().zip(log_softmax_unchecked(z, 1.0)).map(|(t, l)| t * l).sum::<f64>()
        };
        let g = bkd_grad_formula(&inst.logits, &soft, inst.label, &inst.weights)?;
        bkd_formula.record(trial, max_abs_diff(&g, &central_difference(target_loss, &inst.logits, FD_STEP)));
    }

    let mut mlp_checks: Vec<CheckSummary> =
        ["mlp-ce", "mlp-cb", "mlp-kd", "mlp-bkd"].into_iter().map(CheckSummary::new).collect();
    for trial in 0..trials.min(20) {
        let params = init_mlp(&[6, 8, 4], rng.next_u64())?;
        let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let mut inst = LossInstance::random(&mut rng);
        inst.teacher_logits.resize(4, 0.3);
        inst.weights = WeightVector::new((0..4).map(|_| rng.uniform_range(0.01, 2.0)).collect())?;
        let label = rng.below(4) as usize;
        for (kind, summary) in kinds.iter().zip(&mut mlp_checks) {
            summary.record(trial, mlp_param_error(&params, &x, label, *kind, &inst)?);
        }
    }

    let mut checks = loss_checks;
    checks.push(cb_formula);
    checks.push(bkd_formula);
    checks.extend(mlp_checks);
    Ok(GradcheckReport { checks })
}
