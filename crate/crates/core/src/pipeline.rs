//! Two-phase training: a teacher fit with cross-entropy, then a student fit
//! against the frozen teacher's soft targets.
//!
//! Training is sequential over minibatches. Inside a batch, samples may be
//! spread over worker threads; per-sample gradients are always reduced in
//! sample order, so results do not depend on the worker count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{subset_tags, LabeledDataset, SubsetTags, DEFAULT_FEW_THRESHOLD, DEFAULT_MANY_THRESHOLD};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::{
    bkd_loss, cb_loss, ce_loss, kd_loss, BkdConfig, KdConfig, LossKind, LossResult, TeacherSoftTargets,
};
use crate::math::Rng;
use crate::mlp::{
    backward_into, forward, init_mlp, lr_at, predict_logits, sgd_momentum_step, ByteReader, LrSchedule,
    MlpGradients, MlpParams, OptimizerState, DEFAULT_MOMENTUM,
};
use crate::weights::{class_weights, WeightVector};

const CKPT_MAGIC: &[u8] = b"ckpt-v1";
/// Mixed into the training seed for the minibatch shuffling stream.
const SHUFFLE_STREAM: u64 = 0x6A09_E667_F3BC_C909;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub kd: KdConfig,
    pub bkd: BkdConfig,
    /// Epochs before this one use plain distillation; only with `loss = bkd`.
    pub defer_epoch: Option<usize>,
    pub shuffle: bool,
    pub many_threshold: usize,
    pub few_threshold: usize,
    /// Intra-batch fan-out. Does not affect results and is not part of the
    /// config digest.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Ce,
            epochs: 100,
            batch_size: 64,
            schedule: LrSchedule::Cosine { base_lr: 0.05 },
            momentum: DEFAULT_MOMENTUM,
            weight_decay: 0.0,
            seed: 0,
            hidden: vec![64, 64],
            kd: KdConfig::default(),
            bkd: BkdConfig::default(),
            defer_epoch: None,
            shuffle: true,
            many_threshold: DEFAULT_MANY_THRESHOLD,
            few_threshold: DEFAULT_FEW_THRESHOLD,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if let Some(d) = self.defer_epoch {
            if self.loss != LossKind::Bkd {
                return Err(Error::invalid("defer_epoch is only valid with loss = bkd"));
            }
            if d >= self.epochs {
                return Err(Error::invalid(format!(
                    "defer_epoch {d} must be below the epoch count {}",
                    self.epochs
                )));
            }
        }
        self.schedule.validate()?;
        self.kd.validate()?;
        self.bkd.validate()
    }

    /// SHA-256 over the canonical JSON form of every result-affecting field.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).into()
    }

    fn loss_for_epoch(&self, epoch: usize) -> LossKind {
        match self.defer_epoch {
            Some(d) if epoch < d => LossKind::Kd,
            _ => self.loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub acc_all: f64,
    pub acc_many: Option<f64>,
    pub acc_medium: Option<f64>,
    pub acc_few: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,lr,acc_all,acc_many,acc_medium,acc_few";

    /// Absent subset accuracies are written as empty fields.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.loss,
                r.lr,
                r.acc_all,
                opt(r.acc_many),
                opt(r.acc_medium),
                opt(r.acc_few)
            );
        }
        out
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }
}

/// Mutable part of a run: exactly what a checkpoint stores.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: MlpParams,
    pub optimizer: OptimizerState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub rng: Rng,
    pub log: MetricLog,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: &'a LabeledDataset,
    test: &'a LabeledDataset,
    teacher: Option<&'a MlpParams>,
    weights: WeightVector,
    tags: SubsetTags,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        train: &'a LabeledDataset,
        test: &'a LabeledDataset,
        teacher: Option<&'a MlpParams>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let mut dims = vec![train.dim()];
        dims.extend(&cfg.hidden);
        dims.push(train.num_classes());
        let params = init_mlp(&dims, cfg.seed)?;
        let state = TrainState {
            optimizer: OptimizerState::new(&params, cfg.momentum),
            params,
            epoch: 0,
            rng: Rng::new(cfg.seed ^ SHUFFLE_STREAM),
            log: MetricLog::default(),
        };
        Self::with_state(train, test, teacher, cfg, state)
    }

    fn with_state(
        train: &'a LabeledDataset,
        test: &'a LabeledDataset,
        teacher: Option<&'a MlpParams>,
        cfg: TrainConfig,
        state: TrainState,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
            return Err(Error::invalid(format!(
                "train (C={}, d={}) and test (C={}, d={}) splits disagree",
                train.num_classes(),
                train.dim(),
                test.num_classes(),
                test.dim()
            )));
        }
        if train.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        let needs_teacher = cfg.loss.needs_teacher() || cfg.defer_epoch.is_some();
        match teacher {
            Some(t) => {
                t.validate()?;
                if t.output_dim() != train.num_classes() || t.input_dim() != train.dim() {
                    return Err(Error::invalid(format!(
                        "teacher maps {} -> {} but data has d={} and C={}",
                        t.input_dim(),
                        t.output_dim(),
                        train.dim(),
                        train.num_classes()
                    )));
                }
            }
            None if needs_teacher => {
                return Err(Error::invalid(format!("loss {} needs a teacher model", cfg.loss)));
            }
            None => {}
        }
        if state.params.input_dim() != train.dim() || state.params.output_dim() != train.num_classes() {
            return Err(Error::invalid("model shape does not match the data"));
        }
        // Always from the training split.
        let counts = train.class_counts()?;
        let weights = class_weights(&counts, cfg.bkd.beta, cfg.bkd.weight_mode)?;
        let tags = subset_tags(&counts, cfg.many_threshold, cfg.few_threshold)?;
        Ok(Self { cfg, train, test, teacher, weights, tags, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn params(&self) -> &MlpParams {
        &self.state.params
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    pub fn tags(&self) -> &SubsetTags {
        &self.tags
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    /// Loss and logit gradient for training sample `index` under the current
    /// parameters, using the loss active at `epoch`.
    pub fn sample_loss(&self, epoch: usize, index: usize) -> Result<LossResult> {
        let x = self.train.row(index);
        let z = predict_logits(&self.state.params, x)?;
        self.loss_on(self.cfg.loss_for_epoch(epoch), x, &z, self.train.labels()[index])
    }

    fn loss_on(&self, kind: LossKind, x: &[f64], z: &[f64], label: usize) -> Result<LossResult> {
        let soft_targets = |temperature: f64| -> Result<TeacherSoftTargets> {
            let teacher = self.teacher.expect("teacher presence checked at construction");
            TeacherSoftTargets::from_logits(&predict_logits(teacher, x)?, temperature)
        };
        match kind {
            LossKind::Ce => ce_loss(z, label),
            LossKind::Cb => cb_loss(z, label, &self.weights),
            LossKind::Kd => kd_loss(z, &soft_targets(self.cfg.kd.temperature)?, label, &self.cfg.kd),
            LossKind::Bkd => {
                bkd_loss(z, &soft_targets(self.cfg.bkd.temperature)?, label, &self.weights, &self.cfg.bkd)
            }
        }
    }

    /// Forward, loss and backward for one sample, accumulated into `acc`.
    fn accumulate_sample(
        &self,
        kind: LossKind,
        index: usize,
        epoch: usize,
        acc: &mut MlpGradients,
    ) -> Result<f64> {
        let x = self.train.row(index);
        let (z, cache) = forward(&self.state.params, x)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch, loss: f64::NAN });
        }
        let r = self.loss_on(kind, x, &z, self.train.labels()[index])?;
        if !r.value.is_finite() {
            return Err(Error::Diverged { epoch, loss: r.value });
        }
        backward_into(&self.state.params, &cache, &r.grad_logits, acc)?;
        Ok(r.value)
    }

    /// Summed loss and gradient over `batch`, reduced in sample order.
    fn batch_gradient(&self, kind: LossKind, batch: &[usize], epoch: usize) -> Result<(f64, MlpGradients)> {
        let mut acc = self.state.params.zeros_like();
        let mut loss_sum = 0.0;
        let workers = self.cfg.workers.clamp(1, batch.len().max(1));
        if workers == 1 {
            for &i in batch {
                loss_sum += self.accumulate_sample(kind, i, epoch, &mut acc)?;
            }
            return Ok((loss_sum, acc));
        }
        let chunk = batch.len().div_ceil(workers);
        let per_chunk: Vec<Result<Vec<(f64, MlpGradients)>>> = std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|&i| {
                                let mut g = self.state.params.zeros_like();
                                let l = self.accumulate_sample(kind, i, epoch, &mut g)?;
                                Ok((l, g))
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for part in per_chunk {
            for (l, g) in part? {
                loss_sum += l;
                acc.accumulate(&g);
            }
        }
        Ok((loss_sum, acc))
    }

    /// Runs one epoch and appends its metric row.
    pub fn run_epoch(&mut self) -> Result<&MetricRow> {
        if self.is_finished() {
            return Err(Error::invalid("training already finished"));
        }
        let epoch = self.state.epoch;
        let lr = lr_at(&self.cfg.schedule, epoch, self.cfg.epochs)?;
        let kind = self.cfg.loss_for_epoch(epoch);

        let mut order: Vec<usize> = (0..self.train.len()).collect();
        if self.cfg.shuffle {
            self.state.rng.shuffle(&mut order);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let (loss_sum, mut grads) = self.batch_gradient(kind, batch, epoch)?;
            epoch_loss += loss_sum;
            grads.scale(1.0 / batch.len() as f64);
            if self.cfg.weight_decay > 0.0 {
                let wd = self.cfg.weight_decay;
                for (g, p) in grads.values_mut().zip(self.state.params.values()) {
                    *g += wd * p;
                }
            }
            sgd_momentum_step(&mut self.state.params, &grads, &mut self.state.optimizer, lr)?;
        }
        let mean_loss = epoch_loss / self.train.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean_loss });
        }

        let report = evaluate(&self.state.params, self.test, &self.tags)?;
        self.state.log.rows.push(MetricRow {
            epoch,
            loss: mean_loss,
            lr,
            acc_all: report.overall,
            acc_many: report.many,
            acc_medium: report.medium,
            acc_few: report.few,
        });
        self.state.epoch += 1;
        Ok(self.state.log.rows.last().unwrap())
    }

    /// Runs epochs until `epoch` have completed (capped at the configured
    /// total).
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.state.epoch < epoch.min(self.cfg.epochs) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<(MlpParams, MetricLog)> {
        self.run_until(self.cfg.epochs)?;
        Ok(self.into_parts())
    }

    pub fn into_parts(self) -> (MlpParams, MetricLog) {
        (self.state.params, self.state.log)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        encode_checkpoint(&self.state, &self.cfg.digest())
    }

    /// Atomic write of the `ckpt-v1` container.
    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.checkpoint_bytes())
    }

    /// Restores a run from `path`. `cfg` must match the configuration the
    /// checkpoint was written with, apart from the worker count.
    pub fn resume(
        path: &Path,
        train: &'a LabeledDataset,
        test: &'a LabeledDataset,
        teacher: Option<&'a MlpParams>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (state, digest) = decode_checkpoint(&bytes).map_err(|r| Error::format(path, r))?;
        if digest != cfg.digest() {
            return Err(Error::format(path, "checkpoint was written with a different training config"));
        }
        if state.epoch > cfg.epochs {
            return Err(Error::format(path, "checkpoint epoch exceeds the configured epoch count"));
        }
        Self::with_state(train, test, teacher, cfg, state)
    }
}

fn put_opt(out: &mut Vec<u8>, v: Option<f64>) {
    out.extend_from_slice(&v.unwrap_or(f64::NAN).to_le_bytes());
}

fn encode_checkpoint(state: &TrainState, digest: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(digest);
    out.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    out.extend_from_slice(&state.rng.state().to_le_bytes());
    out.extend_from_slice(&state.params.to_bytes());
    out.extend_from_slice(&state.optimizer.momentum.to_le_bytes());
    out.extend_from_slice(&state.optimizer.velocity.to_bytes());
    out.extend_from_slice(&(state.log.rows.len() as u64).to_le_bytes());
    for r in &state.log.rows {
        out.extend_from_slice(&(r.epoch as u64).to_le_bytes());
        for v in [r.loss, r.lr, r.acc_all] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [r.acc_many, r.acc_medium, r.acc_few] {
            put_opt(&mut out, v);
        }
    }
    let check = Sha256::digest(&out);
    out.extend_from_slice(&check);
    out
}

fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(TrainState, [u8; 32]), String> {
    if bytes.len() < CKPT_MAGIC.len() + 32 || !bytes.starts_with(CKPT_MAGIC) {
        return Err("not a ckpt-v1 file".into());
    }
    let (body, check) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != check {
        return Err("checksum mismatch (truncated or corrupt checkpoint)".into());
    }
    let mut r = ByteReader { bytes: body, pos: CKPT_MAGIC.len() };
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let epoch = r.u64()? as usize;
    let rng = Rng::from_state(r.u64()?);
    let (params, used) = MlpParams::from_bytes_prefix(&body[r.pos..])?;
    r.pos += used;
    let momentum = r.f64()?;
    let (velocity, used) = MlpParams::from_bytes_prefix(&body[r.pos..])?;
    r.pos += used;
    if velocity.dims() != params.dims() {
        return Err("momentum buffers do not match the parameters".into());
    }
    let n_rows = r.u64()? as usize;
    if n_rows != epoch {
        return Err(format!("{n_rows} log rows for {epoch} completed epochs"));
    }
    let opt = |v: f64| (!v.is_nan()).then_some(v);
    let mut rows = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        rows.push(MetricRow {
            epoch: r.u64()? as usize,
            loss: r.f64()?,
            lr: r.f64()?,
            acc_all: r.f64()?,
            acc_many: opt(r.f64()?),
            acc_medium: opt(r.f64()?),
            acc_few: opt(r.f64()?),
        });
    }
    if r.remaining() != 0 {
        return Err("trailing bytes after metric log".into());
    }
    Ok((
        TrainState {
            params,
            optimizer: OptimizerState { momentum, velocity },
            epoch,
            rng,
            log: MetricLog { rows },
        },
        digest,
    ))
}

/// Reads a `ckpt-v1` file without needing the config it was written with.
pub fn read_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map(|(state, _)| state).map_err(|r| Error::format(path, r))
}

/// Loads network parameters from either a `ckpt-v1` checkpoint or a bare
/// `mlp-v1` parameter file.
pub fn load_params(path: &Path) -> Result<MlpParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(CKPT_MAGIC) {
        decode_checkpoint(&bytes).map(|(state, _)| state.params).map_err(|r| Error::format(path, r))
    } else {
        MlpParams::from_bytes(&bytes).map_err(|r| Error::format(path, r))
    }
}

/// Teacher phase: plain cross-entropy regardless of `cfg.loss`.
pub fn train_teacher(
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(MlpParams, MetricLog)> {
    let cfg = TrainConfig { loss: LossKind::Ce, defer_epoch: None, ..cfg.clone() };
    Trainer::new(train, test, None, cfg)?.run()
}

/// Student phase against a frozen teacher. `ce` and `cb` ignore the teacher.
pub fn train_student(
    train: &LabeledDataset,
    test: &LabeledDataset,
    teacher: &MlpParams,
    cfg: &TrainConfig,
) -> Result<(MlpParams, MetricLog)> {
    Trainer::new(train, test, Some(teacher), cfg.clone())?.run()
}
