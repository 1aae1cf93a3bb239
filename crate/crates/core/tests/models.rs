use std::sync::Arc;

use cytoset::data::FcmSample;
use cytoset::models::{build_from_spec, build_model, forward, Architecture, Family, Model, ModelConfig, ModelSpec};
use cytoset::synth::{generate_sample, SynthConfig};
use cytoset::tensor::Tensor;

fn small_sample(n: usize, seed: u64) -> FcmSample {
    let cfg = SynthConfig {
        n_events: n,
        blast_fraction: 0.05,
        ..SynthConfig::default()
    };
    generate_sample(&cfg, seed).unwrap()
}

fn spec(arch: Architecture, markers: &[String]) -> ModelSpec {
    ModelSpec::new(ModelConfig::new(arch).with_seed(3), markers.to_vec(), vec![]).unwrap()
}

#[test]
fn every_architecture_runs_forward_and_backward() {
    let sample = small_sample(64, 1);
    let labels: Vec<f32> = sample.labels.as_ref().unwrap().iter().map(|&l| l as f32).collect();
    for arch in Architecture::ALL {
        let mut model = build_from_spec(spec(arch, &sample.markers)).unwrap();
        let input = model.prepare(&sample.events, None).unwrap();
        let (mut s, body, head) = model.session(true, 7);
        let y = forward(&mut s, body, head, &input).unwrap();
        assert_eq!(s.value(y).shape(), [64, 1], "{arch}");
        let loss = s.tape.bce_with_logits(y, Arc::new(labels.clone())).unwrap();
        assert!(s.value(loss).item().is_finite(), "{arch}");
        let grads = s.param_grads(loss).unwrap();
        assert!(grads.is_finite(), "{arch}");
        drop(s);
        let logits = model.predict(&sample.events, None, 0).unwrap();
        assert_eq!(logits.len(), 64, "{arch}");
        assert!(logits.iter().all(|v| v.is_finite()), "{arch}");
    }
}

#[test]
fn architecture_names_round_trip() {
    for arch in Architecture::ALL {
        assert_eq!(arch.name().parse::<Architecture>().unwrap(), arch);
    }
    assert!("transformer".parse::<Architecture>().is_err());
}

#[test]
fn set_transformer_layout() {
    let m = build_model(&ModelConfig::new(Architecture::St), 10).unwrap();
    let cytoset::models::Body::SetTransformer { blocks, .. } = &m.body else { panic!("wrong body") };
    assert_eq!(blocks.len(), 4);
    for b in blocks {
        assert!(matches!(b.inducing, cytoset::layers::InducingSource::Learned { m: 16, .. }));
    }
    let m = build_model(&ModelConfig::new(Architecture::St150i), 10).unwrap();
    let cytoset::models::Body::SetTransformer { blocks, .. } = &m.body else { panic!("wrong body") };
    assert!(matches!(blocks[0].inducing, cytoset::layers::InducingSource::Learned { m: 150, .. }));

    let m = build_model(&ModelConfig::new(Architecture::GinStFps), 10).unwrap();
    let cytoset::models::Body::GnnStFps { gnn, blocks, merge, .. } = &m.body else { panic!("wrong body") };
    assert_eq!(gnn.kind(), cytoset::layers::GnnKind::Gin);
    assert_eq!(blocks.len(), 3);
    assert_eq!(merge.d_in, 64);
    assert!(blocks
        .iter()
        .all(|b| matches!(b.inducing, cytoset::layers::InducingSource::FpsSampled { .. })));
}

#[test]
fn asap_uses_two_pooling_stages() {
    let cfg = ModelConfig::new(Architecture::GatAsap);
    assert_eq!(cfg.asap_targets, [100, 50]);
    let m = build_model(&cfg, 10).unwrap();
    let cytoset::models::Body::GnnAsap { before, between, .. } = &m.body else { panic!("wrong body") };
    assert_eq!((before.len(), between.len()), (2, 2));
}

#[test]
fn identical_config_gives_identical_parameters() {
    for arch in [Architecture::St, Architecture::GinStFps, Architecture::GatAsap] {
        let a = build_model(&ModelConfig::new(arch).with_seed(11), 10).unwrap();
        let b = build_model(&ModelConfig::new(arch).with_seed(11), 10).unwrap();
        assert_eq!(a.store.checksum(), b.store.checksum());
        let c = build_model(&ModelConfig::new(arch).with_seed(12), 10).unwrap();
        assert_ne!(a.store.checksum(), c.store.checksum());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ModelConfig::new(Architecture::St);
    cfg.heads = 5;
    assert!(build_model(&cfg, 10).is_err());
    let mut cfg = ModelConfig::new(Architecture::Gin);
    cfg.k = Some(0);
    assert!(build_model(&cfg, 10).is_err());
}

fn swap_rows(t: &Tensor, i: usize, j: usize) -> Tensor {
    let mut idx: Vec<usize> = (0..t.rows()).collect();
    idx.swap(i, j);
    t.select_rows(&idx)
}

#[test]
fn mlp_logits_ignore_other_events_and_context_models_do_not() {
    let sample = small_sample(48, 2);
    let mut altered = sample.events.clone();
    // Replace every event except 0 with a different sample's events.
    let other = small_sample(48, 9);
    for i in 1..48 {
        altered.row_mut(i).copy_from_slice(other.events.row(i));
    }
    let mut mlp = build_from_spec(spec(Architecture::Mlp, &sample.markers)).unwrap();
    let a = mlp.predict(&sample.events, None, 0).unwrap();
    let b = mlp.predict(&altered, None, 0).unwrap();
    assert_eq!(a[0], b[0]);
    let swapped = swap_rows(&sample.events, 3, 7);
    let c = mlp.predict(&swapped, None, 0).unwrap();
    assert_eq!(a[0], c[0]);

    for arch in Architecture::ALL.into_iter().filter(|a| a.family() != Family::NoContext) {
        let mut m = build_from_spec(spec(arch, &sample.markers)).unwrap();
        let a = m.predict(&sample.events, None, 0).unwrap();
        let b = m.predict(&altered, None, 0).unwrap();
        assert_ne!(a[0], b[0], "{arch} ignored its context");
    }
}

#[test]
fn mlp_duplicates_get_identical_logits() {
    let sample = small_sample(32, 4);
    let mut ev = sample.events.clone();
    let first = ev.row(0).to_vec();
    ev.row_mut(5).copy_from_slice(&first);
    let mut m = build_from_spec(spec(Architecture::Mlp, &sample.markers)).unwrap();
    let y = m.predict(&ev, None, 0).unwrap();
    assert_eq!(y[0], y[5]);
}

#[test]
fn masked_markers_leave_node_inputs_but_not_the_graph() {
    let sample = small_sample(80, 5);
    let masked: Vec<String> = ["CD10", "CD19", "CD45"].iter().map(|s| s.to_string()).collect();
    let spec = ModelSpec::new(ModelConfig::new(Architecture::GinStFps), sample.markers.clone(), masked).unwrap();
    let model = build_from_spec(spec).unwrap();
    assert_eq!(model.in_features(), 7);
    let input = model.prepare(&sample.events, None).unwrap();
    assert_eq!(input.features.cols(), 7);
    for name in ["CD10", "CD19", "CD45"] {
        assert!(!model.input_columns.contains(&sample.marker_index(name).unwrap()));
    }
    // The graph equals the one built on all ten features.
    let full = model.build_graph(&sample.events).unwrap().unwrap();
    assert_eq!(input.graph.unwrap(), full);
    let reduced = cytoset::geometry::knn_graph(&input.features, 10).unwrap();
    assert_ne!(full, cytoset::layers::MessageGraph::from_knn(&reduced));

    let bad = ModelSpec::new(
        ModelConfig::new(Architecture::St),
        sample.markers.clone(),
        vec!["CD99".to_string()],
    );
    assert!(bad.is_err());
}

#[test]
fn single_event_sample_runs() {
    let base = small_sample(8, 6);
    let sample = FcmSample::new("one", base.markers.clone(), base.events.select_rows(&[0]), None).unwrap();
    for arch in [Architecture::StFps, Architecture::GinStFps, Architecture::GinAsap, Architecture::Gat] {
        let mut m = build_from_spec(spec(arch, &sample.markers)).unwrap();
        let y = m.predict(&sample.events, None, 0).unwrap();
        assert_eq!(y.len(), 1);
        assert!(y[0].is_finite());
    }
}

#[test]
fn save_and_load_reproduce_predictions() {
    let sample = small_sample(40, 8);
    let dir = tempfile::tempdir().unwrap();
    let masked = vec!["CD45".to_string()];
    let spec = ModelSpec::new(ModelConfig::new(Architecture::GatStFps), sample.markers.clone(), masked).unwrap();
    let mut m = build_from_spec(spec).unwrap();
    m.save(dir.path()).unwrap();
    let mut back = Model::load(dir.path()).unwrap();
    assert_eq!(back.spec, m.spec);
    assert_eq!(
        m.predict(&sample.events, None, 0).unwrap(),
        back.predict(&sample.events, None, 0).unwrap()
    );
}
