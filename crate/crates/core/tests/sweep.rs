use bkd::data::{subset_tags, synth_gaussian_mixture};
use bkd::eval::{evaluate, sweep_csv, temperature_sweep};
use bkd::losses::LossKind;
use bkd::pipeline::{train_student, train_teacher, TrainConfig};
use bkd::weights::ClassCounts;

fn setup() -> (bkd::data::LabeledDataset, bkd::data::LabeledDataset, TrainConfig) {
    let counts = ClassCounts::new(vec![80, 40, 20, 10]).unwrap();
    let (train, test) = synth_gaussian_mixture(&counts, 6, 3.0, 5, 25).unwrap();
    let cfg = TrainConfig {
        loss: LossKind::Bkd,
        epochs: 8,
        batch_size: 16,
        hidden: vec![16],
        seed: 11,
        ..TrainConfig::default()
    };
    (train, test, cfg)
}

#[test]
fn single_temperature_matches_standalone_run() {
    let (train, test, cfg) = setup();
    let (teacher, _) = train_teacher(&train, &test, &cfg).unwrap();
    let rows = temperature_sweep(&train, &test, &teacher, &cfg, &[3.0]).unwrap();

    let mut standalone = cfg.clone();
    standalone.bkd.temperature = 3.0;
    standalone.kd.temperature = 3.0;
    let (student, _) = train_student(&train, &test, &teacher, &standalone).unwrap();
    let tags = subset_tags(&train.class_counts().unwrap(), cfg.many_threshold, cfg.few_threshold).unwrap();
    assert_eq!(rows, vec![(3.0, evaluate(&student, &test, &tags).unwrap().overall)]);
}

#[test]
fn repeated_temperatures_agree_and_csv_has_one_row_each() {
    let (train, test, cfg) = setup();
    let (teacher, _) = train_teacher(&train, &test, &cfg).unwrap();
    let rows = temperature_sweep(&train, &test, &teacher, &cfg, &[2.0, 1.0, 2.0]).unwrap();
    assert_eq!(rows[0], rows[2]);
    assert_eq!(rows[1].0, 1.0);
    let csv = sweep_csv(&rows);
    assert_eq!(csv.lines().count(), 4);
    assert!(temperature_sweep(&train, &test, &teacher, &cfg, &[]).is_err());
}
