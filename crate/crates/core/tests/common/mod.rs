//! Test-only oracles, written without touching the library's numeric paths.

#![allow(dead_code, clippy::needless_range_loop)]

use std::io::Write;

use bkd::math::Rng;
use bkd::mlp::MlpParams;

pub const H: f64 = 1e-5;

pub fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[k] += H;
            minus[k] -= H;
            (f(&plus) - f(&minus)) / (2.0 * H)
        })
        .collect()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `log softmax(z / t)` by direct shifted evaluation.
pub fn log_probs(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max) / t;
    let s: f64 = z.iter().map(|v| (v / t - m).exp()).sum();
    z.iter().map(|v| v / t - m - s.ln()).collect()
}

pub fn probs(z: &[f64], t: f64) -> Vec<f64> {
    log_probs(z, t).into_iter().map(f64::exp).collect()
}

/// `KL(target ‖ softmax(z / t))` with `0 ln 0 = 0`.
pub fn kl(target: &[f64], z: &[f64], t: f64) -> f64 {
    target.iter().zip(log_probs(z, t)).filter(|(q, _)| **q > 0.0).map(|(q, lp)| q * (q.ln() - lp)).sum()
}

pub fn random_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

/// Independent MLP forward; also returns the smallest |pre-activation| of
/// the hidden layers so callers can avoid rectifier kinks.
pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> (Vec<f64>, f64) {
    let mut h = x.to_vec();
    let mut closest = f64::INFINITY;
    let n = params.layers.len();
    for (i, l) in params.layers.iter().enumerate() {
        let mut out = vec![0.0; l.fan_out];
        for (o, v) in out.iter_mut().enumerate() {
            let mut s = l.bias[o];
            for j in 0..l.fan_in {
                s += l.weights[o * l.fan_in + j] * h[j];
            }
            if i + 1 < n {
                closest = closest.min(s.abs());
                s = s.max(0.0);
            }
            *v = s;
        }
        h = out;
    }
    (h, closest)
}

pub fn flatten(p: &MlpParams) -> Vec<f64> {
    p.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
}

pub fn unflatten(template: &MlpParams, v: &[f64]) -> MlpParams {
    let mut p = template.clone();
    let mut it = v.iter();
    for l in &mut p.layers {
        for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
            *w = *it.next().unwrap();
        }
    }
    p
}

/// Writes straight to stderr so the line survives libtest's output capture.
pub fn say(line: &str) {
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

/// One line per criterion, then fail the test if it did not hold.
pub fn report(id: &str, name: &str, ok: bool, detail: String) {
    say(&format!("{} {id} {name}: {detail}", if ok { "PASS" } else { "FAIL" }));
    assert!(ok, "{id} {name} failed: {detail}");
}
