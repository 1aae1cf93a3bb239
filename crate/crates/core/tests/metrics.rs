use proptest::prelude::*;

use cytoset::data::{FcmDataset, Split};
use cytoset::metrics::{cross_lab_eval, evaluate, masked_feature_eval, sample_metrics, summarize_runs, Confusion, Summary};
use cytoset::models::{build_from_spec, Architecture, Model, ModelConfig, ModelSpec};
use cytoset::synth::{generate_dataset, shift_dataset, SynthConfig};
use cytoset::training::{train, TrainConfig};

fn dataset() -> FcmDataset {
    let cfg = SynthConfig {
        n_events: 400,
        blast_fraction: 0.05,
        population_shift_scale: 0.0,
        blast_offset_sigma: [8.0, 10.0],
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, 16, 21).unwrap()
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 12,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn trained(data: &FcmDataset) -> Model {
    let spec = ModelSpec::new(ModelConfig::new(Architecture::Mlp).with_seed(3), data.markers.clone(), vec![]).unwrap();
    let mut m = build_from_spec(spec).unwrap();
    train(&mut m, data, &train_cfg(), None).unwrap();
    m
}

fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    std::fs::read(dir.path().join(cytoset::models::PARAMS_FILE)).unwrap()
}

#[test]
fn cross_lab_behaviour() {
    let data = dataset();
    let mut model = trained(&data);
    let before = checkpoint_bytes(&model);
    let in_domain = evaluate(&mut model, &data, Some(Split::Test)).unwrap();
    assert!(in_domain.f1.mean > 0.5, "model did not learn: {}", in_domain.f1.mean);

    let same = shift_dataset(&data, &[0.0; 10]).unwrap();
    let far = shift_dataset(&data, &[6.0; 10]).unwrap();
    let reports = cross_lab_eval(&mut model, &[&same, &far], Some(Split::Test)).unwrap();
    assert_eq!(reports[0], in_domain);
    assert!(
        reports[1].f1.mean < in_domain.f1.mean - 0.1,
        "shifted F1 {} vs {}",
        reports[1].f1.mean,
        in_domain.f1.mean
    );
    assert_eq!(checkpoint_bytes(&model), before, "evaluation changed the parameters");
}

#[test]
fn marker_mismatch_is_an_error() {
    let data = dataset();
    let mut model = trained(&data);
    let mut other = data.clone();
    other.markers.swap(0, 1);
    assert!(cross_lab_eval(&mut model, &[&other], None).is_err());
}

#[test]
fn aggregates_are_recomputable() {
    let data = dataset();
    let mut model = trained(&data);
    let r = evaluate(&mut model, &data, None).unwrap();
    assert_eq!(r.samples.len(), data.len());
    let f1: Vec<f64> = r.samples.iter().filter(|s| s.included).map(|s| s.f1).collect();
    let again = Summary::of(&f1);
    assert!((again.mean - r.f1.mean).abs() <= 1e-12);
    assert!((again.median - r.f1.median).abs() <= 1e-12);
    assert!((again.std - r.f1.std).abs() <= 1e-12);
    for s in &r.samples {
        for v in [s.precision, s.f1] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(json["samples"].as_array().unwrap().len(), data.len());
    assert!(r.to_table().contains("mean"));
}

#[test]
fn masking_nothing_matches_plain_training() {
    let data = dataset();
    let base = ModelConfig::new(Architecture::Mlp);
    let cfg = TrainConfig {
        epochs: 3,
        ..train_cfg()
    };
    let masked = masked_feature_eval(&[Architecture::Mlp], &base, &data, &[], &cfg, &[3]).unwrap();

    let spec = ModelSpec::new(ModelConfig::new(Architecture::Mlp).with_seed(3), data.markers.clone(), vec![]).unwrap();
    let mut m = build_from_spec(spec).unwrap();
    train(&mut m, &data, &cfg, None).unwrap();
    let plain = evaluate(&mut m, &data, Some(Split::Test)).unwrap();
    assert_eq!(masked[0].1[0], plain);
}

#[test]
fn run_summary_averages_over_seeds() {
    let data = dataset();
    let base = ModelConfig::new(Architecture::Mlp);
    let cfg = TrainConfig {
        epochs: 2,
        ..train_cfg()
    };
    let masked = vec!["m0".to_string()];
    let bad = masked_feature_eval(&[Architecture::Mlp], &base, &data, &masked, &cfg, &[0]);
    assert!(bad.is_err(), "unknown marker must be rejected");

    let runs = masked_feature_eval(&[Architecture::Mlp], &base, &data, &data.markers[..2], &cfg, &[0, 1]).unwrap();
    let reports = &runs[0].1;
    let summary = summarize_runs("mlp", reports);
    let means: Vec<f64> = reports.iter().map(|r| r.f1.mean).collect();
    assert_eq!(summary.runs, 2);
    assert!((summary.avg_f1 - (means[0] + means[1]) / 2.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn f1_is_the_harmonic_mean_identity(pairs in proptest::collection::vec((0u8..2, 0u8..2), 1..200)) {
        let (labels, preds): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let tp = labels.iter().zip(&preds).filter(|(&l, &p)| l == 1 && p == 1).count();
        let fp = labels.iter().zip(&preds).filter(|(&l, &p)| l == 0 && p == 1).count();
        let fn_ = labels.iter().zip(&preds).filter(|(&l, &p)| l == 1 && p == 0).count();
        let (p, r, f1) = sample_metrics(&labels, &preds).unwrap();
        let want = if 2 * tp + fp + fn_ == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        prop_assert_eq!(f1, want);
        prop_assert_eq!(Confusion::count(&labels, &preds).unwrap().f1(), want);
        if p + r > 0.0 {
            prop_assert!((f1 - 2.0 * p * r / (p + r)).abs() <= 1e-12);
        } else {
            prop_assert_eq!(f1, 0.0);
        }
    }
}
