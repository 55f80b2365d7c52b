//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, unknown keys are errors.
//! Every key has a default, listed in [`ExperimentConfig::default`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{ImbalanceProfile, ProfileKind, DEFAULT_FEW_THRESHOLD, DEFAULT_MANY_THRESHOLD};
use crate::error::{Error, Result};
use crate::losses::{BkdConfig, KdConfig, LossKind, DEFAULT_TEMPERATURE};
use crate::mlp::{LrSchedule, ScheduleKind, DEFAULT_MOMENTUM};
use crate::pipeline::TrainConfig;
use crate::weights::{WeightMode, DEFAULT_BETA};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    /// Gaussian mixture generated from the profile.
    Synthetic,
    /// Downsample `data_dir/train.csv` to the profile; the test split is
    /// copied unchanged.
    Downsample,
}

impl FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataKind::Synthetic),
            "downsample" => Ok(DataKind::Downsample),
            other => {
                Err(Error::invalid(format!("unknown data kind {other:?} (expected synthetic or downsample)")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // dataset
    pub kind: DataKind,
    pub num_classes: usize,
    pub dim: usize,
    pub rho: f64,
    pub n_max: usize,
    pub profile: ProfileKind,
    pub separation: f64,
    pub per_class_test: usize,
    pub data_seed: u64,
    // model
    pub hidden_dims: Vec<usize>,
    // training
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub lr_steps: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub student_seed: Option<u64>,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub weight_mode: WeightMode,
    pub defer_epoch: Option<usize>,
    pub shuffle: bool,
    // eval
    pub many_thresh: usize,
    pub few_thresh: usize,
    // paths
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            num_classes: 10,
            dim: 20,
            rho: 100.0,
            n_max: 500,
            profile: ProfileKind::Exponential,
            separation: 3.0,
            per_class_test: 100,
            data_seed: 0,
            hidden_dims: vec![64, 64],
            loss: LossKind::Bkd,
            epochs: 100,
            batch_size: 64,
            lr: 0.05,
            schedule: ScheduleKind::Cosine,
            lr_steps: Vec::new(),
            momentum: DEFAULT_MOMENTUM,
            weight_decay: 0.0,
            seed: 0,
            student_seed: None,
            alpha: 0.5,
            beta: DEFAULT_BETA,
            temperature: DEFAULT_TEMPERATURE,
            weight_mode: WeightMode::Raw,
            defer_epoch: None,
            shuffle: true,
            many_thresh: DEFAULT_MANY_THRESHOLD,
            few_thresh: DEFAULT_FEW_THRESHOLD,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_steps(key: &str, value: &str) -> Result<Vec<(usize, f64)>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|item| {
            let (e, f) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("{key}: expected epoch:factor, got {item:?}")))?;
            Ok((parse(key, e.trim())?, parse(key, f.trim())?))
        })
        .collect()
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))
}

impl ExperimentConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "kind" => self.kind = parse_enum(key, value)?,
            "C" => self.num_classes = parse(key, value)?,
            "d" => self.dim = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "n_max" => self.n_max = parse(key, value)?,
            "profile" => self.profile = parse_enum(key, value)?,
            "separation" => self.separation = parse(key, value)?,
            "per_class_test" => self.per_class_test = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "hidden_dims" => self.hidden_dims = parse_list(key, value)?,
            "loss" => self.loss = parse_enum(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "schedule" => self.schedule = parse_enum(key, value)?,
            "lr_steps" => self.lr_steps = parse_steps(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "student_seed" => self.student_seed = parse_opt(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "weight_mode" => self.weight_mode = parse_enum(key, value)?,
            "defer_epoch" => self.defer_epoch = parse_opt(key, value)?,
            "shuffle" => self.shuffle = parse(key, value)?,
            "many_thresh" => self.many_thresh = parse(key, value)?,
            "few_thresh" => self.few_thresh = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
            }
            cfg.set(key, value.trim()).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        if self.num_classes < 2 {
            return Err(Error::Config("C must be at least 2".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("d must be at least 2".into()));
        }
        if self.per_class_test == 0 || self.n_max == 0 {
            return Err(Error::Config("per_class_test and n_max must be positive".into()));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config("separation must be finite and nonnegative".into()));
        }
        if !(self.rho >= 1.0 && self.rho.is_finite()) {
            return Err(Error::Config("rho must be >= 1".into()));
        }
        if !(self.many_thresh > self.few_thresh && self.few_thresh > 0) {
            return Err(Error::Config("thresholds must satisfy many_thresh > few_thresh > 0".into()));
        }
        self.student_config().validate().map_err(as_config)?;
        let mut teacher = self.teacher_config();
        teacher.loss = LossKind::Ce;
        teacher.defer_epoch = None;
        teacher.validate().map_err(as_config)
    }

    pub fn profile(&self) -> ImbalanceProfile {
        ImbalanceProfile {
            kind: self.profile,
            rho: self.rho,
            n_max: self.n_max,
            num_classes: self.num_classes,
        }
    }

    fn schedule(&self) -> LrSchedule {
        match self.schedule {
            ScheduleKind::Constant => LrSchedule::Constant { base_lr: self.lr },
            ScheduleKind::Cosine => LrSchedule::Cosine { base_lr: self.lr },
            ScheduleKind::Step => LrSchedule::Step { base_lr: self.lr, milestones: self.lr_steps.clone() },
        }
    }

    fn train_config(&self, seed: u64, loss: LossKind, defer_epoch: Option<usize>) -> TrainConfig {
        TrainConfig {
            loss,
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
            hidden: self.hidden_dims.clone(),
            kd: KdConfig { alpha: self.alpha, temperature: self.temperature },
            bkd: BkdConfig { beta: self.beta, temperature: self.temperature, weight_mode: self.weight_mode },
            defer_epoch,
            shuffle: self.shuffle,
            many_threshold: self.many_thresh,
            few_threshold: self.few_thresh,
            workers: 1,
        }
    }

    /// Teacher phase: cross-entropy, `seed`.
    pub fn teacher_config(&self) -> TrainConfig {
        self.train_config(self.seed, LossKind::Ce, None)
    }

    /// Student phase: configured loss, `student_seed` (falls back to `seed`).
    pub fn student_config(&self) -> TrainConfig {
        self.train_config(self.student_seed.unwrap_or(self.seed), self.loss, self.defer_epoch)
    }

    /// Fully resolved config in the input syntax, one key per line.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let steps = self.lr_steps.iter().map(|(e, f)| format!("{e}:{f}")).collect::<Vec<_>>().join(",");
        let kind = match self.kind {
            DataKind::Synthetic => "synthetic",
            DataKind::Downsample => "downsample",
        };
        let schedule = match self.schedule {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Step => "step",
            ScheduleKind::Cosine => "cosine",
        };
        let entries: Vec<(&str, String)> = vec![
            ("kind", kind.into()),
            ("C", self.num_classes.to_string()),
            ("d", self.dim.to_string()),
            ("rho", self.rho.to_string()),
            ("n_max", self.n_max.to_string()),
            ("profile", self.profile.to_string()),
            ("separation", self.separation.to_string()),
            ("per_class_test", self.per_class_test.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("hidden_dims", list(&self.hidden_dims)),
            ("loss", self.loss.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("schedule", schedule.into()),
            ("lr_steps", if steps.is_empty() { "none".into() } else { steps }),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("student_seed", opt(self.student_seed.map(|s| s.to_string()))),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("temperature", self.temperature.to_string()),
            ("weight_mode", self.weight_mode.to_string()),
            ("defer_epoch", opt(self.defer_epoch.map(|e| e.to_string()))),
            ("shuffle", self.shuffle.to_string()),
            ("many_thresh", self.many_thresh.to_string()),
            ("few_thresh", self.few_thresh.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_hold_the_recipe_values() {
        let cfg = ExperimentConfig::parse_str("").unwrap();
        assert_eq!(cfg.beta, 0.9999);
        assert_eq!(cfg.temperature, 2.0);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_mode, WeightMode::Raw);
        assert_eq!(cfg.defer_epoch, None);
    }

    #[test]
    fn parses_keys_and_comments() {
        let text = "# comment\nloss = kd   # trailing\nC=4\nhidden_dims = 16, 8\n\
                    schedule = step\nlr_steps = 160:0.01, 180:0.01\nepochs = 200\n\
                    defer_epoch = none\nstudent_seed = 9\n";
        let cfg = ExperimentConfig::parse_str(text).unwrap();
        assert_eq!(cfg.loss, LossKind::Kd);
        assert_eq!(cfg.num_classes, 4);
        assert_eq!(cfg.hidden_dims, vec![16, 8]);
        assert_eq!(cfg.lr_steps, vec![(160, 0.01), (180, 0.01)]);
        assert_eq!(cfg.student_config().seed, 9);
        assert_eq!(cfg.teacher_config().seed, 0);
        assert_eq!(cfg.teacher_config().loss, LossKind::Ce);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "bogus = 1",
            "loss = focal",
            "C = ten",
            "just a line",
            "seed = 1\nseed = 2",
            "beta = 1.5",
            "loss = kd\ndefer_epoch = 5",
            "defer_epoch = 100\nepochs = 100",
            "many_thresh = 10\nfew_thresh = 20",
        ] {
            let err = ExperimentConfig::parse_str(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text:?} gave {err}");
        }
    }

    #[test]
    fn resolved_text_reparses_to_the_same_config() {
        let text = "loss = bkd\ndefer_epoch = 50\nschedule = step\nlr_steps = 40:0.1\nseparation = 1.25\n";
        let cfg = ExperimentConfig::parse_str(text).unwrap();
        let again = ExperimentConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);
    }
}
