use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cytoset::data::Split;
use cytoset::metrics::evaluate;
use cytoset::models::{build_from_spec, forward, Architecture, Model, ModelConfig, ModelSpec};
use cytoset::synth::{generate_dataset, generate_sample, SynthConfig};
use cytoset::tensor::{ParamGrads, Tensor};
use cytoset::training::{
    adamw_step, cosine_lr, make_batch, smooth_labels, train, AdamW, AdamWParams, Schedule, TrainConfig, BEST_DIR, LOG_FILE,
};
use cytoset::Error;

fn small_synth(n_events: usize) -> SynthConfig {
    SynthConfig {
        n_events,
        blast_fraction: 0.05,
        ..SynthConfig::default()
    }
}

fn model_for(arch: Architecture, markers: &[String], seed: u64) -> Model {
    let spec = ModelSpec::new(ModelConfig::new(arch).with_seed(seed), markers.to_vec(), vec![]).unwrap();
    build_from_spec(spec).unwrap()
}

#[test]
fn cosine_schedule_values() {
    let cfg = TrainConfig::default();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
    assert!(close(cosine_lr(0, &cfg), 0.001));
    assert!(close(cosine_lr(5, &cfg), 0.0006));
    assert!(close(cosine_lr(10, &cfg), 0.001));
    assert!(close(cosine_lr(25, &cfg), cosine_lr(5, &cfg)));
    let clamped = TrainConfig {
        schedule: Schedule::Clamped,
        ..TrainConfig::default()
    };
    assert!(close(cosine_lr(10, &clamped), 0.0002));
    assert!(close(cosine_lr(149, &clamped), 0.0002));
    assert!(close(cosine_lr(5, &clamped), 0.0006));
    for t in 0..40 {
        let lr = cosine_lr(t, &cfg);
        assert!((0.0002..=0.001).contains(&lr));
    }
}

#[test]
fn batch_clamps_smooths_and_keeps_events_without_jitter() {
    let s = generate_sample(&small_synth(1000), 3).unwrap();
    let labels = s.labels.clone().unwrap();
    let cfg = TrainConfig {
        jitter_scale: 0.0,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = make_batch(&[(0, &s.events, &labels)], &cfg, &mut rng).unwrap();
    assert_eq!(batch[0].rows, (0..1000).collect::<Vec<_>>());
    assert_eq!(batch[0].events, s.events);
    assert!(batch[0].covers_sample(1000));
    for (t, &l) in batch[0].targets.iter().zip(&labels) {
        assert_eq!(*t, if l == 1 { 0.95 } else { 0.05 });
    }
    assert_eq!(smooth_labels(&[0, 1], 0.1), vec![0.05, 0.95]);
}

#[test]
fn subsample_is_distinct_and_jitter_is_small() {
    let s = generate_sample(&small_synth(1000), 4).unwrap();
    let labels = s.labels.clone().unwrap();
    let cfg = TrainConfig {
        events_per_sample: 300,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = make_batch(&[(0, &s.events, &labels)], &cfg, &mut rng).unwrap().remove(0);
    let b = make_batch(&[(0, &s.events, &labels)], &cfg, &mut rng).unwrap().remove(0);
    assert_eq!(a.rows.len(), 300);
    assert!(a.rows.windows(2).all(|w| w[0] < w[1]));
    assert_ne!(a.rows, b.rows, "subsample is redrawn");
    assert_eq!(a.clean, s.events.select_rows(&a.rows));
    let diffs: Vec<f64> = a
        .events
        .data()
        .iter()
        .zip(a.clean.data())
        .map(|(x, y)| (x - y) as f64)
        .collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
    assert!(mean.abs() < 1e-3 && (sd - 0.01).abs() < 1e-3, "mean {mean} sd {sd}");
    for (t, &r) in a.targets.iter().zip(&a.rows) {
        assert_eq!(*t, if labels[r] == 1 { 0.95 } else { 0.05 });
    }
}

#[test]
fn empty_sample_is_rejected() {
    let empty = Tensor::zeros(0, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(make_batch(&[(0, &empty, &[])], &TrainConfig::default(), &mut rng).is_err());
}

fn frozen_loss(model: &mut Model, events: &Tensor, targets: &[f32]) -> (f32, ParamGrads) {
    let graph = model.build_graph(events).unwrap();
    let input = model.prepare(events, graph).unwrap();
    let (mut s, body, head) = model.session(false, 0);
    let y = forward(&mut s, body, head, &input).unwrap();
    let loss = s.tape.bce_with_logits(y, Arc::new(targets.to_vec())).unwrap();
    let l = s.value(loss).item();
    (l, s.param_grads(loss).unwrap())
}

#[test]
fn one_small_step_decreases_the_loss() {
    let archs = [Architecture::Mlp, Architecture::St, Architecture::Gin, Architecture::StNoAtt, Architecture::Gcn];
    for trial in 0..10u64 {
        let arch = archs[trial as usize % archs.len()];
        let s = generate_sample(&small_synth(64), 100 + trial).unwrap();
        let mut model = model_for(arch, &s.markers, trial);
        let targets = smooth_labels(s.labels.as_deref().unwrap(), 0.1);
        let (before, grads) = frozen_loss(&mut model, &s.events, &targets);
        let mut opt = AdamW::new(&model.store);
        adamw_step(&mut model.store, &grads, &mut opt, 1e-5, &AdamWParams::default()).unwrap();
        let (after, _) = frozen_loss(&mut model, &s.events, &targets);
        assert!(after < before, "trial {trial} ({arch}): {before} -> {after}");
    }
}

fn tiny_dataset(seed: u64) -> cytoset::data::FcmDataset {
    generate_dataset(&small_synth(200), 8, seed).unwrap()
}

/// No per-sample shift and a blast population far from every healthy one.
fn separable_dataset() -> cytoset::data::FcmDataset {
    let cfg = SynthConfig {
        n_events: 500,
        blast_fraction: 0.05,
        population_shift_scale: 0.0,
        blast_offset_sigma: [8.0, 10.0],
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, 40, 11).unwrap()
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn fixed_seed_gives_identical_reports() {
    let data = tiny_dataset(1);
    let run = || {
        let mut m = model_for(Architecture::Gat, &data.markers, 2);
        train(&mut m, &data, &quick_cfg(3), None).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn logged_learning_rates_follow_the_schedule() {
    let data = tiny_dataset(2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_cfg(11);
    let mut m = model_for(Architecture::Mlp, &data.markers, 0);
    let report = train(&mut m, &data, &cfg, Some(dir.path())).unwrap();
    assert_eq!(report.epochs.len(), 11);
    for t in [0, 5, 10] {
        assert_eq!(report.epochs[t].lr, cosine_lr(t, &cfg));
    }
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[5]["lr"].as_f64().unwrap(), cosine_lr(5, &cfg));
    assert_eq!(lines[3]["epoch"].as_u64().unwrap(), 3);
}

#[test]
fn best_checkpoint_reproduces_logged_validation_f1() {
    let data = separable_dataset();
    let dir = tempfile::tempdir().unwrap();
    let mut m = model_for(Architecture::Mlp, &data.markers, 1);
    let report = train(&mut m, &data, &quick_cfg(12), Some(dir.path())).unwrap();
    let best = report
        .epochs
        .iter()
        .map(|r| r.val_mean_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(best > 0.0);
    assert_eq!(report.best_val_f1, best);
    assert_eq!(report.epochs[report.best_epoch].val_mean_f1, best);
    assert!(report.epochs[..report.best_epoch].iter().all(|r| r.val_mean_f1 < best));
    assert_eq!(report.checkpoint.as_deref(), Some(dir.path().join(BEST_DIR).as_path()));

    let mut reloaded = Model::load(&dir.path().join(BEST_DIR)).unwrap();
    let val = evaluate(&mut reloaded, &data, Some(Split::Val)).unwrap();
    assert!((val.f1.mean - best).abs() <= 1e-6, "{} vs {best}", val.f1.mean);
    let in_memory = evaluate(&mut m, &data, Some(Split::Val)).unwrap();
    assert_eq!(in_memory.f1.mean, val.f1.mean);
}

#[test]
fn separable_data_is_learned() {
    let data = separable_dataset();
    let mut m = model_for(Architecture::Mlp, &data.markers, 0);
    let report = train(&mut m, &data, &quick_cfg(30), None).unwrap();
    assert!(report.best_val_f1 >= 0.99, "best val F1 {}", report.best_val_f1);
}

#[test]
fn divergence_names_epoch_and_batch() {
    let data = tiny_dataset(4);
    let cfg = TrainConfig {
        lr: 1e30,
        lr_min: 1e30,
        epochs: 3,
        ..TrainConfig::default()
    };
    let mut m = model_for(Architecture::Mlp, &data.markers, 0);
    match train(&mut m, &data, &cfg, None) {
        Err(Error::Diverged { epoch, batch }) => assert!(epoch < 3 && batch < 2),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let data = tiny_dataset(5);
    let mut m = model_for(Architecture::Mlp, &data.markers, 0);
    for cfg in [
        TrainConfig { batch_size: 0, ..quick_cfg(1) },
        TrainConfig { lr_min: 1.0, ..quick_cfg(1) },
        TrainConfig { label_smoothing_eps: 1.0, ..quick_cfg(1) },
    ] {
        assert!(matches!(train(&mut m, &data, &cfg, None), Err(Error::Config(_))));
    }
}
