use proptest::prelude::*;

use cytoset::data::{build_dataset, Split};
use cytoset::synth::{generate_dataset, generate_sample, write_dataset, SynthConfig, SynthTemplate};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blast_fraction_is_exact(n in 2usize..3000, frac in 0.0001f64..0.5, seed in any::<u64>()) {
        let cfg = SynthConfig { n_events: n, n_features: 4, blast_fraction: frac, ..SynthConfig::default() };
        match cfg.blast_count() {
            Ok(b) => {
                prop_assert_eq!(b, ((frac * n as f64).round() as usize).max(1));
                let s = generate_sample(&cfg, seed).unwrap();
                prop_assert_eq!(s.positives(), b);
                prop_assert_eq!(s.n_events(), n);
            }
            Err(_) => prop_assert!(((frac * n as f64).round() as usize).max(1) >= n),
        }
    }
}

/// With no shift and widely separated populations, assigning each event to
/// the nearest population mean recovers the generated labels exactly.
#[test]
fn nearest_mean_classifier_recovers_labels() {
    for seed in 0..5u64 {
        let cfg = SynthConfig {
            n_events: 4000,
            blast_fraction: 0.05,
            population_shift_scale: 0.0,
            healthy_min_separation: 40.0,
            blast_offset_sigma: [20.0, 24.0],
            seed,
            ..SynthConfig::default()
        };
        let t = SynthTemplate::new(&cfg).unwrap();
        // Every pair of means is at least 6 sigma apart along the line joining them.
        let means: Vec<&Vec<f64>> = t.healthy_means.iter().chain([&t.blast_mean]).collect();
        let sigmas: Vec<&Vec<f64>> = t.healthy_sigmas.iter().chain([&t.blast_sigma]).collect();
        for a in 0..means.len() {
            for b in 0..a {
                let d: f64 = means[a].iter().zip(means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                let s = sigmas[a].iter().chain(sigmas[b]).cloned().fold(0.0, f64::max);
                assert!(d >= 6.0 * s, "means {a} and {b} are {d} apart with sigma {s}");
            }
        }
        let s = generate_sample(&cfg, 100 + seed).unwrap();
        let labels = s.labels.as_ref().unwrap();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for i in 0..s.n_events() {
            let row = s.events.row(i);
            let nearest = (0..means.len())
                .min_by(|&a, &b| {
                    let d = |m: &Vec<f64>| row.iter().zip(m).map(|(&x, y)| (x as f64 - y).powi(2)).sum::<f64>();
                    d(means[a]).partial_cmp(&d(means[b])).unwrap()
                })
                .unwrap();
            let pred = u8::from(nearest == means.len() - 1);
            match (pred, labels[i]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        assert_eq!(f1, 1.0, "seed {seed}: tp {tp} fp {fp} fn {fn_}");
    }
}

#[test]
fn dataset_build_is_reproducible_and_train_split_is_standardized() {
    let cfg = SynthConfig {
        n_events: 800,
        ..SynthConfig::default()
    };
    let generated = generate_dataset(&cfg, 12, 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&generated, dir.path()).unwrap();
    let a = build_dataset(&manifest, 1).unwrap();
    let b = build_dataset(&manifest, 1).unwrap();
    assert_eq!(a.split, b.split);
    assert_eq!(a.split, generated.split);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.standardization.mean), bits(&b.standardization.mean));
    assert_eq!(bits(&a.standardization.std), bits(&b.standardization.std));
    for (x, y) in a.samples.iter().zip(&generated.samples) {
        assert_eq!(x.events, y.events, "CSV round trip changed sample {}", x.id);
    }

    let f = a.markers.len();
    let (mut sum, mut sumsq, mut count) = (vec![0.0f64; f], vec![0.0f64; f], 0usize);
    for i in a.indices(Split::Train) {
        let z = a.standardized(i).unwrap();
        for r in 0..z.rows() {
            for (j, &v) in z.row(r).iter().enumerate() {
                sum[j] += v as f64;
                sumsq[j] += (v as f64).powi(2);
            }
        }
        count += z.rows();
    }
    for j in 0..f {
        let mean = sum[j] / count as f64;
        let sd = (sumsq[j] / count as f64 - mean * mean).sqrt();
        assert!(mean.abs() <= 1e-4, "feature {j} mean {mean}");
        assert!((sd - 1.0).abs() <= 1e-3, "feature {j} std {sd}");
    }
}
