//! `bkd`: data generation, teacher/student training, evaluation, gradient
//! checks and temperature sweeps driven by a flat config file.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bkd::config::{DataKind, ExperimentConfig};
use bkd::data::{
    downsample_to_profile, make_longtail_counts, read_dataset, subset_tags, synth_gaussian_mixture,
    write_dataset, LabeledDataset,
};
use bkd::eval::{accuracy_report, confusion_matrix, predict, sweep_csv, temperature_sweep};
use bkd::gradcheck::{run_gradchecks, TOLERANCE};
use bkd::pipeline::{load_params, train_teacher, Trainer};
use bkd::{write_atomic, Error, Result};

#[derive(Parser)]
#[command(name = "bkd", version, about = "Balanced knowledge distillation for long-tailed data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Role {
    Teacher,
    Student,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build train/test splits in longtail-csv format.
    MakeData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a teacher (cross-entropy) or a student (configured loss).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        role: Role,
        /// Teacher checkpoint or parameter file; required for students.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Output directory (defaults to the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs (checkpoint is still written).
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Evaluate a model: report JSON plus confusion matrices.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training split used for Many/Medium/Few tags (defaults to
        /// data_dir/train.csv).
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train one student per temperature and tabulate test accuracy.
    SweepTemp {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        temps: Vec<f64>,
        /// Teacher to share across runs; trained from the config if absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    write_atomic(path, contents.as_bytes())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| bkd::Error::Io { path: path.to_path_buf(), source: e })
}

fn load_splits(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    Ok((read_dataset(&cfg.data_dir.join("train.csv"))?, read_dataset(&cfg.data_dir.join("test.csv"))?))
}

fn make_data(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let out = out.unwrap_or_else(|| cfg.data_dir.clone());
    let counts = make_longtail_counts(&cfg.profile()).map_err(|e| Error::Config(e.to_string()))?;
    let (train, test) = match cfg.kind {
        DataKind::Synthetic => {
            synth_gaussian_mixture(&counts, cfg.dim, cfg.separation, cfg.data_seed, cfg.per_class_test)?
        }
        DataKind::Downsample => {
            let (source, test) = load_splits(&cfg)?;
            (downsample_to_profile(&source, &counts, cfg.data_seed)?, test)
        }
    };
    create_dir(&out)?;
    write_dataset(&train, &out.join("train.csv"))?;
    write_dataset(&test, &out.join("test.csv"))?;
    let mut summary = String::from("class,train,test\n");
    for (c, (n_train, n_test)) in train.label_histogram().iter().zip(test.label_histogram()).enumerate() {
        summary.push_str(&format!("{c},{n_train},{n_test}\n"));
    }
    write_file(&out.join("counts.csv"), &summary)?;
    let s = counts.as_slice();
    println!(
        "wrote {} train / {} test samples to {} (max/min = {})",
        train.len(),
        test.len(),
        out.display(),
        s[0] as f64 / s[s.len() - 1] as f64
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: &Path,
    role: Role,
    teacher_path: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    stop_after: Option<usize>,
    workers: usize,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let teacher = match (role, teacher_path) {
        (Role::Student, None) => {
            return Err(Error::Config("--role student requires --teacher <ckpt>".into()));
        }
        (Role::Student, Some(p)) => Some(load_params(&p)?),
        (Role::Teacher, _) => None,
    };
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    let (train, test) = load_splits(&cfg)?;
    let mut train_cfg = match role {
        Role::Teacher => cfg.teacher_config(),
        Role::Student => cfg.student_config(),
    };
    train_cfg.workers = workers.max(1);

    let mut trainer = match resume {
        Some(path) => Trainer::resume(&path, &train, &test, teacher.as_ref(), train_cfg)?,
        None => Trainer::new(&train, &test, teacher.as_ref(), train_cfg)?,
    };
    let target = stop_after.unwrap_or(usize::MAX);
    while !trainer.is_finished() && trainer.state().epoch < target {
        let row = trainer.run_epoch()?;
        eprintln!(
            "[{}] epoch {:>4}  loss {:.5}  lr {:.5}  acc {:.4}",
            role.name(),
            row.epoch,
            row.loss,
            row.lr,
            row.acc_all
        );
    }

    create_dir(&out)?;
    let name = role.name();
    write_file(&out.join(format!("{name}.config")), &cfg.to_text())?;
    trainer.checkpoint(&out.join(format!("{name}.ckpt")))?;
    trainer.params().save(&out.join(format!("{name}.params")))?;
    write_file(&out.join(format!("{name}_metrics.csv")), &trainer.state().log.to_csv())?;
    let preds = predict(trainer.params(), &test)?;
    let report = accuracy_report(&preds, test.labels(), trainer.tags())?;
    write_file(&out.join(format!("{name}_report.json")), &report.to_json())?;
    let cm = confusion_matrix(&preds, test.labels(), test.num_classes())?;
    write_file(&out.join(format!("{name}_confusion.csv")), &cm.to_csv())?;
    print!("{}", report.to_json());
    Ok(())
}

fn eval(
    ckpt: &Path,
    data: &Path,
    config: Option<PathBuf>,
    train_data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => ExperimentConfig::load(&p)?,
        None => ExperimentConfig::default(),
    };
    let params = load_params(ckpt)?;
    let test = read_dataset(data)?;
    let train_path = train_data.unwrap_or_else(|| cfg.data_dir.join("train.csv"));
    let counts = read_dataset(&train_path)?.class_counts()?;
    let tags = subset_tags(&counts, cfg.many_thresh, cfg.few_thresh)?;
    let preds = predict(&params, &test)?;
    let report = accuracy_report(&preds, test.labels(), &tags)?;
    let cm = confusion_matrix(&preds, test.labels(), test.num_classes())?;
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    create_dir(&out)?;
    write_file(&out.join("eval_report.json"), &report.to_json())?;
    write_file(&out.join("confusion.csv"), &cm.to_csv())?;
    write_file(&out.join("confusion_normalized.csv"), &cm.to_normalized_csv())?;
    print!("{}", report.to_json());
    Ok(())
}

/// Returns whether every check passed.
fn gradcheck(trials: usize, seed: u64) -> Result<bool> {
    let report = run_gradchecks(trials, seed)?;
    for c in &report.checks {
        let verdict = if c.passed(TOLERANCE) { "ok" } else { "FAIL" };
        println!("{c}  {verdict}");
    }
    if let Some(worst) = report.worst() {
        println!("worst: {} at {:.3e} (tolerance {TOLERANCE:e})", worst.name, worst.worst_error);
    }
    Ok(report.passed())
}

fn sweep_temp(
    config: &Path,
    temps: &[f64],
    teacher: Option<PathBuf>,
    out: Option<PathBuf>,
    workers: usize,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    if temps.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::Config("temperatures must be positive".into()));
    }
    let (train, test) = load_splits(&cfg)?;
    let teacher = match teacher {
        Some(p) => load_params(&p)?,
        None => {
            let mut tcfg = cfg.teacher_config();
            tcfg.workers = workers.max(1);
            train_teacher(&train, &test, &tcfg)?.0
        }
    };
    let mut base = cfg.student_config();
    base.workers = workers.max(1);
    let rows = temperature_sweep(&train, &test, &teacher, &base, temps)?;
    let csv = sweep_csv(&rows);
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    create_dir(&out)?;
    write_file(&out.join("sweep_temp.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::MakeData { config, out } => make_data(&config, out),
        Command::Train { config, role, teacher, out, resume, stop_after, workers } => {
            train(&config, role, teacher, out, resume, stop_after, workers)
        }
        Command::Eval { ckpt, data, config, train_data, out } => eval(&ckpt, &data, config, train_data, out),
        Command::Gradcheck { trials, seed } => match gradcheck(trials, seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
        Command::SweepTemp { config, temps, teacher, out, workers } => {
            sweep_temp(&config, &temps, teacher, out, workers)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
