use std::path::Path;

use svbrdf_core::datagen::{build_dataset, DatasetManifest, DatasetOptions, Split, MANIFEST_FILE};
use svbrdf_core::losses::CSV_HEADER;
use svbrdf_core::optim::{Adam, AdamConfig};
use svbrdf_core::train::{epoch_dir, train, SampleSet, TrainConfig, GENERATOR_CKPT, LOSS_CSV};

#[test]
fn adam_ignores_zero_gradients() {
    let mut adam = Adam::<f64>::new([3], AdamConfig::default()).unwrap();
    let mut p = vec![0.5, -1.0, 2.0];
    for _ in 0..3 {
        adam.step(&mut [&mut p], &[&[0.0; 3]], 1e-2).unwrap();
    }
    assert_eq!(p, [0.5, -1.0, 2.0]);
}

#[test]
fn adam_first_step_moves_by_lr_against_the_gradient() {
    let mut adam = Adam::<f64>::new([4], AdamConfig::default()).unwrap();
    let mut p = vec![0.0; 4];
    let g = [3.0, -0.2, 1e-3, -50.0];
    adam.step(&mut [&mut p], &[&g], 2e-4).unwrap();
    for (pi, gi) in p.iter().zip(g) {
        // bias correction makes m/sqrt(v) = sign(g) up to eps
        assert!((pi + 2e-4 * gi.signum()).abs() < 1e-8, "{pi} for gradient {gi}");
    }
    assert!(adam.step(&mut [&mut p], &[&[f64::NAN, 0.0, 0.0, 0.0]], 1e-3).is_err());
    assert_eq!(adam.steps(), 1);
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut adam = Adam::<f32>::new([2], AdamConfig::default()).unwrap();
        let mut p = vec![1.0f32, -1.0];
        for k in 0..20 {
            let g = [p[0] * 0.3 + k as f32 * 0.01, p[1] - 0.5];
            adam.step(&mut [&mut p], &[&g], 1e-2).unwrap();
        }
        p
    };
    assert_eq!(run(), run());
}

fn tiny_dataset(dir: &Path) {
    let opts = DatasetOptions {
        env_lights: 4,
        ..DatasetOptions::toy(2)
    };
    build_dataset(&opts, dir, 5).unwrap();
}

fn tiny_config(steps: usize) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        steps_per_epoch: steps,
        batch_size: 2,
        width_scale: 0.0625,
        ..TrainConfig::toy()
    }
}

#[test]
fn one_step_writes_one_csv_row_and_checkpoints() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path());
    let out = tempfile::tempdir().unwrap();
    let outcome = train(&tiny_config(1), data.path(), out.path()).unwrap();
    assert_eq!(outcome.reports.len(), 1);
    assert!(outcome.reports[0].is_finite());
    let csv = std::fs::read_to_string(out.path().join(LOSS_CSV)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], CSV_HEADER);
    assert!(lines[1].starts_with("1,"));
    assert!(epoch_dir(out.path(), 0).join(GENERATOR_CKPT).exists());
    assert!(epoch_dir(out.path(), 1).join(GENERATOR_CKPT).exists());
    assert!(out.path().join(GENERATOR_CKPT).exists());
}

#[test]
fn content_only_training_is_a_quarter_of_the_content_terms() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path());
    let mut cfg = tiny_config(2);
    cfg.weights.enable_a = false;
    cfg.weights.enable_f = false;
    let out = tempfile::tempdir().unwrap();
    let outcome = train(&cfg, data.path(), out.path()).unwrap();
    for r in &outcome.reports {
        assert!(r.l_p > 0.0 && r.l_r > 0.0);
        assert_eq!((r.l_a_g, r.l_a_d, r.l_f, r.total_d), (0.0, 0.0, 0.0, 0.0));
        assert!((r.total_g - 0.25 * (r.l_p + r.l_r)).abs() <= 1e-6 * r.total_g);
    }
}

#[test]
fn loss_log_is_deterministic() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&tiny_config(2), data.path(), a.path()).unwrap();
    train(&tiny_config(2), data.path(), b.path()).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), LOSS_CSV), read(b.path(), LOSS_CSV));
    assert_eq!(read(a.path(), GENERATOR_CKPT), read(b.path(), GENERATOR_CKPT));
}

#[test]
fn mismatched_resolution_is_rejected() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path());
    let m = DatasetManifest::read(&data.path().join(MANIFEST_FILE)).unwrap();
    let set = SampleSet::<f32>::load(data.path(), &m, Split::Train).unwrap();
    let cfg = TrainConfig {
        resolution: 128,
        ..tiny_config(1)
    };
    let out = tempfile::tempdir().unwrap();
    assert!(svbrdf_core::train::train_on(&cfg, &set, out.path()).is_err());
}
