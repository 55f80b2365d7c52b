//! Fully connected ReLU network with explicit backward pass, SGD with
//! momentum, learning-rate schedules and the `mlp-v1` parameter file.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Rng;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
const PARAMS_MAGIC: &[u8] = b"mlp-v1";

/// One affine layer. `weights` is row-major `fan_out × fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { fan_in, fan_out, weights: vec![0.0; fan_in * fan_out], bias: vec![0.0; fan_out] }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.bias
            .iter()
            .zip(self.weights.chunks_exact(self.fan_in))
            .map(|(b, row)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

/// Layers chained input to output. Hidden layers use a rectifier; the last
/// layer emits raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Gradients have exactly the shape of the parameters.
pub type MlpGradients = MlpParams;

impl MlpParams {
    /// Checks that layer shapes chain and every entry is finite.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.fan_in == 0 || l.fan_out == 0 {
                return Err(Error::invalid(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.fan_in * l.fan_out || l.bias.len() != l.fan_out {
                return Err(Error::invalid(format!("layer {i} buffers do not match its shape")));
            }
            if i > 0 && self.layers[i - 1].fan_out != l.fan_in {
                return Err(Error::invalid(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    l.fan_in,
                    i - 1,
                    self.layers[i - 1].fan_out
                )));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Layer::zeros(l.fan_in, l.fan_out)).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    /// `[input, hidden..., output]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.fan_out));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Every parameter in layer order, weights before bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.fan_in == b.fan_in && a.fan_out == b.fan_out)
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &MlpParams) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PARAMS_MAGIC.len() + 8 + self.num_params() * 8);
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u64).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.fan_in as u64).to_le_bytes());
            out.extend_from_slice(&(l.fan_out as u64).to_le_bytes());
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses one `mlp-v1` record from the front of `bytes` and returns it
    /// with the number of bytes consumed.
    pub fn from_bytes_prefix(bytes: &[u8]) -> std::result::Result<(Self, usize), String> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(PARAMS_MAGIC.len())? != PARAMS_MAGIC {
            return Err("missing mlp-v1 magic".into());
        }
        let n_layers = r.u64()? as usize;
        if n_layers == 0 || n_layers > 1 << 16 {
            return Err(format!("implausible layer count {n_layers}"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let fan_in = r.u64()? as usize;
            let fan_out = r.u64()? as usize;
            let n_w = fan_in
                .checked_mul(fan_out)
                .filter(|&n| n.saturating_add(fan_out).saturating_mul(8) <= r.remaining())
                .ok_or("layer shape exceeds file size")?;
            let weights = (0..n_w).map(|_| r.f64()).collect::<std::result::Result<_, _>>()?;
            let bias = (0..fan_out).map(|_| r.f64()).collect::<std::result::Result<_, _>>()?;
            layers.push(Layer { fan_in, fan_out, weights, bias });
        }
        let params = MlpParams { layers };
        params.validate().map_err(|e| e.to_string())?;
        Ok((params, r.pos))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (params, used) = Self::from_bytes_prefix(bytes)?;
        if used != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - used));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.remaining() < n {
            return Err("unexpected end of data".into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Weights uniform in `±sqrt(6 / fan_in)`, zero biases.
pub fn init_mlp(dims: &[usize], seed: u64) -> Result<MlpParams> {
    if dims.len() < 2 {
        return Err(Error::invalid(format!("need at least an input and an output dimension, got {dims:?}")));
    }
    if dims.contains(&0) {
        return Err(Error::invalid(format!("layer dimensions must be positive, got {dims:?}")));
    }
    let mut rng = Rng::new(seed);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let weights = (0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
            Layer { fan_in, fan_out, weights, bias: vec![0.0; fan_out] }
        })
        .collect();
    Ok(MlpParams { layers })
}

/// Inputs to every layer; `inputs[0]` is the sample itself and `inputs[i]`
/// for `i > 0` is the rectified output of layer `i - 1`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
}

pub fn forward(params: &MlpParams, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if x.len() != params.input_dim() {
        return Err(Error::invalid(format!(
            "input has {} features, network expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut h = x.to_vec();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut out = layer.affine(&h);
        if i < last {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        inputs.push(h);
        h = out;
    }
    Ok((h, ForwardCache { inputs }))
}

/// Logits only.
pub fn predict_logits(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    forward(params, x).map(|(z, _)| z)
}

/// Adds this sample's parameter gradients into `acc`.
///
/// A hidden unit whose rectified output is zero passes no gradient, which
/// fixes the subgradient at a zero pre-activation to 0.
pub fn backward_into(
    params: &MlpParams,
    cache: &ForwardCache,
    grad_logits: &[f64],
    acc: &mut MlpGradients,
) -> Result<()> {
    if grad_logits.len() != params.output_dim() {
        return Err(Error::invalid(format!(
            "gradient has {} entries, network emits {}",
            grad_logits.len(),
            params.output_dim()
        )));
    }
    if cache.inputs.len() != params.layers.len() || !params.same_shape(acc) {
        return Err(Error::invalid("cache or gradient buffer does not match the network"));
    }
    let mut delta = grad_logits.to_vec();
    for (i, layer) in params.layers.iter().enumerate().rev() {
        let input = &cache.inputs[i];
        let g = &mut acc.layers[i];
        for (o, &d) in delta.iter().enumerate() {
            g.bias[o] += d;
            let row = &mut g.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
            for (gw, &x) in row.iter_mut().zip(input) {
                *gw += d * x;
            }
        }
        if i == 0 {
            break;
        }
        let mut prev = vec![0.0; layer.fan_in];
        for (o, &d) in delta.iter().enumerate() {
            let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
            for (p, &w) in prev.iter_mut().zip(row) {
                *p += d * w;
            }
        }
        for (p, &a) in prev.iter_mut().zip(input) {
            if a <= 0.0 {
                *p = 0.0;
            }
        }
        delta = prev;
    }
    Ok(())
}

pub fn backward(params: &MlpParams, cache: &ForwardCache, grad_logits: &[f64]) -> Result<MlpGradients> {
    let mut grads = params.zeros_like();
    backward_into(params, cache, grad_logits, &mut grads)?;
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub velocity: MlpParams,
}

impl OptimizerState {
    pub fn new(params: &MlpParams, momentum: f64) -> Self {
        Self { momentum, velocity: params.zeros_like() }
    }
}

/// `v ← μ v + g; θ ← θ - lr v` (heavy-ball, not Nesterov).
pub fn sgd_momentum_step(
    params: &mut MlpParams,
    grads: &MlpGradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.velocity) {
        return Err(Error::invalid("parameter, gradient and momentum shapes differ"));
    }
    let mu = state.momentum;
    for ((p, g), v) in params.values_mut().zip(grads.values()).zip(state.velocity.values_mut()) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant {
        base_lr: f64,
    },
    /// Multiply by `factor` from `epoch` onwards, cumulatively.
    Step {
        base_lr: f64,
        milestones: Vec<(usize, f64)>,
    },
    Cosine {
        base_lr: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Step,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "step" => Ok(ScheduleKind::Step),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => {
                Err(Error::invalid(format!("unknown schedule {other:?} (expected constant, step or cosine)")))
            }
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Constant { base_lr } => write!(f, "constant({base_lr})"),
            LrSchedule::Cosine { base_lr } => write!(f, "cosine({base_lr})"),
            LrSchedule::Step { base_lr, milestones } => {
                write!(f, "step({base_lr}")?;
                for (e, m) in milestones {
                    write!(f, ", {e}:{m}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl LrSchedule {
    pub fn base_lr(&self) -> f64 {
        match self {
            LrSchedule::Constant { base_lr }
            | LrSchedule::Step { base_lr, .. }
            | LrSchedule::Cosine { base_lr } => *base_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let base = self.base_lr();
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::invalid(format!("base learning rate must be positive, got {base}")));
        }
        if let LrSchedule::Step { milestones, .. } = self {
            if milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::invalid("step milestones must have strictly increasing epochs"));
            }
            if milestones.iter().any(|(_, f)| !(*f > 0.0 && f.is_finite())) {
                return Err(Error::invalid("step factors must be positive"));
            }
        }
        Ok(())
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize, total_epochs: usize) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::invalid(format!("epoch {epoch} outside a {total_epochs}-epoch run")));
    }
    Ok(match schedule {
        LrSchedule::Constant { base_lr } => *base_lr,
        LrSchedule::Step { base_lr, milestones } => {
            milestones.iter().filter(|(e, _)| *e <= epoch).fold(*base_lr, |lr, (_, f)| lr * f)
        }
        LrSchedule::Cosine { base_lr } => {
            let phase = std::f64::consts::PI * epoch as f64 / total_epochs as f64;
            base_lr * 0.5 * (1.0 + phase.cos())
        }
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    /// Plain nested-loop evaluation kept separate from `forward`.
    fn reference_forward(params: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, l) in params.layers.iter().enumerate() {
            let mut out = vec![0.0; l.fan_out];
            for o in 0..l.fan_out {
                let mut s = 0.0;
                for j in 0..l.fan_in {
                    s += l.weights[o * l.fan_in + j] * h[j];
                }
                s += l.bias[o];
                out[o] = if i + 1 < params.layers.len() && s < 0.0 { 0.0 } else { s };
            }
            h = out;
        }
        h
    }

    fn random_input(rng: &mut Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.normal()).collect()
    }

    #[test]
    fn init_bounds_and_determinism() {
        let p = init_mlp(&[4, 3], 1).unwrap();
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(p.layers[0].weights.iter().all(|w| w.abs() <= bound));
        assert!(p.layers[0].bias.iter().all(|&b| b == 0.0));
        assert_eq!(p, init_mlp(&[4, 3], 1).unwrap());
        assert_ne!(p, init_mlp(&[4, 3], 2).unwrap());
        assert!(init_mlp(&[2], 1).is_err());
        assert!(init_mlp(&[2, 0, 3], 1).is_err());
    }

    #[test]
    fn forward_zero_and_affine() {
        let mut p = init_mlp(&[3, 5, 2], 0).unwrap();
        p.values_mut().for_each(|v| *v = 0.0);
        assert_eq!(predict_logits(&p, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let p = MlpParams {
            layers: vec![Layer {
                fan_in: 2,
                fan_out: 2,
                weights: vec![1.0, 2.0, 3.0, 4.0],
                bias: vec![0.5, -0.5],
            }],
        };
        assert_eq!(predict_logits(&p, &[1.0, -1.0]).unwrap(), vec![-0.5, -1.5]);
        assert!(predict_logits(&p, &[1.0]).is_err());
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = Rng::new(8);
        for seed in 0..10 {
            let p = init_mlp(&[5, 7, 6, 3], seed).unwrap();
            let x = random_input(&mut rng, 5);
            let got = predict_logits(&p, &x).unwrap();
            let want = reference_forward(&p, &x);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_zero_and_affine() {
        let p = init_mlp(&[3, 4, 2], 5).unwrap();
        let (_, cache) = forward(&p, &[0.3, -0.2, 1.0]).unwrap();
        let g = backward(&p, &cache, &[0.0, 0.0]).unwrap();
        assert!(g.values().all(|&v| v == 0.0));

        let p = init_mlp(&[3, 2], 5).unwrap();
        let x = [0.3, -0.2, 1.0];
        let (_, cache) = forward(&p, &x).unwrap();
        let gz = [0.7, -1.1];
        let g = backward(&p, &cache, &gz).unwrap();
        assert_eq!(g.layers[0].bias, gz.to_vec());
        for o in 0..2 {
            for j in 0..3 {
                assert_eq!(g.layers[0].weights[o * 3 + j], gz[o] * x[j]);
            }
        }
        assert!(backward(&p, &cache, &[1.0]).is_err());
    }

    #[test]
    fn backward_matches_fd() {
        // Loss = <c, logits> so ∂L/∂z = c.
        let mut rng = Rng::new(21);
        let p = init_mlp(&[4, 6, 3], 9).unwrap();
        let x = random_input(&mut rng, 4);
        let c = random_input(&mut rng, 3);
        let loss = |p: &MlpParams| -> f64 {
            predict_logits(p, &x).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = forward(&p, &x).unwrap();
        let g = backward(&p, &cache, &c).unwrap();
        let h = 1e-5;
        let analytic: Vec<f64> = g.values().copied().collect();
        for (idx, &a) in analytic.iter().enumerate() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            *plus.values_mut().nth(idx).unwrap() += h;
            *minus.values_mut().nth(idx).unwrap() -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - a).abs() < 1e-6, "param {idx}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn sgd_examples() {
        let mut p = init_mlp(&[2, 2], 3).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.values_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        let mut state = OptimizerState::new(&p, 0.0);
        sgd_momentum_step(&mut p, &g, &mut state, 1.0).unwrap();
        for ((a, b), gv) in p.values().zip(before.values()).zip(g.values()) {
            assert_eq!(*a, b - gv);
        }

        let mut state = OptimizerState::new(&p, 0.9);
        state.velocity.values_mut().for_each(|v| *v = 1.0);
        let before = p.clone();
        let zero = p.zeros_like();
        sgd_momentum_step(&mut p, &zero, &mut state, 0.5).unwrap();
        for (a, b) in p.values().zip(before.values()) {
            assert_eq!(*a, b - 0.5 * 0.9);
        }
    }

    #[test]
    fn sgd_is_deterministic() {
        let run = || {
            let mut p = init_mlp(&[3, 4, 2], 1).unwrap();
            let mut s = OptimizerState::new(&p, 0.9);
            let mut rng = Rng::new(2);
            for _ in 0..20 {
                let mut g = p.zeros_like();
                g.values_mut().for_each(|v| *v = rng.normal());
                sgd_momentum_step(&mut p, &g, &mut s, 0.05).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedules() {
        let cos = LrSchedule::Cosine { base_lr: 0.2 };
        assert_eq!(lr_at(&cos, 0, 100).unwrap(), 0.2);
        assert!((lr_at(&cos, 50, 100).unwrap() - 0.1).abs() < 1e-12);
        assert!(lr_at(&cos, 100, 100).is_err());

        let step = LrSchedule::Step { base_lr: 0.1, milestones: vec![(160, 0.01), (180, 0.01)] };
        assert_eq!(lr_at(&step, 159, 200).unwrap(), 0.1);
        assert!((lr_at(&step, 170, 200).unwrap() - 1e-3).abs() < 1e-15);
        assert!((lr_at(&step, 185, 200).unwrap() - 1e-5).abs() < 1e-17);

        assert_eq!(lr_at(&LrSchedule::Constant { base_lr: 0.3 }, 7, 10).unwrap(), 0.3);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::Constant { base_lr: 0.0 }.validate().is_err());
        let bad = LrSchedule::Step { base_lr: 0.1, milestones: vec![(10, 0.1), (10, 0.1)] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bytes_roundtrip_and_layout() {
        let p = init_mlp(&[3, 4, 2], 17).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..6], b"mlp-v1");
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[22..30].try_into().unwrap()), 4);
        assert_eq!(f64::from_le_bytes(bytes[30..38].try_into().unwrap()), p.layers[0].weights[0]);
        assert_eq!(MlpParams::from_bytes(&bytes).unwrap(), p);
        assert!(MlpParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(MlpParams::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let p = init_mlp(&[5, 8, 3], 4).unwrap();
        p.save(&path).unwrap();
        let q = MlpParams::load(&path).unwrap();
        assert_eq!(p, q);
        let x = [0.1, 0.2, -0.3, 0.4, 0.5];
        assert_eq!(predict_logits(&p, &x).unwrap(), predict_logits(&q, &x).unwrap());
    }
}
