//! Synthetic cytometry-like samples: a Gaussian mixture of healthy
//! populations plus one rare blast population sitting next to a healthy one.
//!
//! A dataset seed fixes the population layout (the [`SynthTemplate`]); each
//! sample seed draws a joint translation of all populations, the event
//! counts and the events themselves.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::data::{random_split, write_csv_sample, FcmDataset, FcmSample, Manifest, SampleEntry};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const PANEL: [&str; 10] = ["FSC-A", "SSC-A", "CD20", "CD10", "CD45", "CD34", "CD19", "CD38", "CD58", "SY41"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_events: usize,
    pub n_features: usize,
    pub n_healthy_clusters: usize,
    pub blast_fraction: f64,
    /// Radius of the ball from which each sample's joint translation is drawn.
    pub population_shift_scale: f64,
    /// Number of axes carrying the large blast offset.
    pub n_discriminative: usize,
    /// Blast offset on discriminative axes, in units of the anchor's per-axis sigma.
    pub blast_offset_sigma: [f64; 2],
    /// Blast offset on the remaining axes, same units.
    pub minor_offset_sigma: [f64; 2],
    /// Minimum Euclidean distance between healthy population means.
    pub healthy_min_separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_events: 5000,
            n_features: 10,
            n_healthy_clusters: 6,
            blast_fraction: 0.01,
            population_shift_scale: 1.0,
            n_discriminative: 3,
            blast_offset_sigma: [2.0, 4.0],
            minor_offset_sigma: [0.5, 1.0],
            healthy_min_separation: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_events == 0 || self.n_features == 0 || self.n_healthy_clusters == 0 {
            return bad("event, feature and cluster counts must be positive".into());
        }
        if !(0.0001..=0.5).contains(&self.blast_fraction) {
            return bad(format!("blast_fraction {} outside [0.0001, 0.5]", self.blast_fraction));
        }
        if !(self.population_shift_scale >= 0.0) {
            return bad("population_shift_scale must be non-negative".into());
        }
        if self.n_discriminative > self.n_features {
            return bad("more discriminative axes than features".into());
        }
        for r in [self.blast_offset_sigma, self.minor_offset_sigma] {
            if !(r[0] >= 0.0 && r[0] <= r[1]) {
                return bad(format!("offset range {r:?} must satisfy 0 <= lo <= hi"));
            }
        }
        Ok(())
    }

    /// Blast events per sample: `round(fraction * n)`, at least 1.
    pub fn blast_count(&self) -> Result<usize> {
        let b = ((self.blast_fraction * self.n_events as f64).round() as usize).max(1);
        if b >= self.n_events {
            return Err(Error::InvalidArgument(format!(
                "{b} blast events leave no healthy events out of {}",
                self.n_events
            )));
        }
        Ok(b)
    }

    pub fn marker_names(&self) -> Vec<String> {
        (0..self.n_features)
            .map(|j| PANEL.get(j).map_or_else(|| format!("M{j:02}"), |s| s.to_string()))
            .collect()
    }
}

/// Population layout shared by all samples of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTemplate {
    pub healthy_means: Vec<Vec<f64>>,
    pub healthy_sigmas: Vec<Vec<f64>>,
    pub healthy_weights: Vec<f64>,
    /// Healthy population the blasts sit next to.
    pub anchor: usize,
    pub blast_mean: Vec<f64>,
    pub blast_sigma: Vec<f64>,
    /// Axes with the large blast offset, ascending.
    pub discriminative: Vec<usize>,
}

impl SynthTemplate {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x7e3a));
        let f = config.n_features;
        let c = config.n_healthy_clusters;
        let half_range = 6.0f64.max(config.healthy_min_separation);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(c);
        let mut attempts = 0;
        while means.len() < c {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::InvalidArgument(format!(
                    "cannot place {c} populations {} apart in {f} dimensions",
                    config.healthy_min_separation
                )));
            }
            let m: Vec<f64> = (0..f).map(|_| rng.gen_range(-half_range..=half_range)).collect();
            let ok = means.iter().all(|o| {
                let d2: f64 = o.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= config.healthy_min_separation
            });
            if ok {
                means.push(m);
            }
        }
        let sigmas: Vec<Vec<f64>> = (0..c).map(|_| (0..f).map(|_| rng.gen_range(0.5..=1.5)).collect()).collect();
        let weights: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..=1.5)).collect();
        let anchor = rng.gen_range(0..c);
        let mut axes: Vec<usize> = (0..f).collect();
        axes.shuffle(&mut rng);
        let mut discriminative = axes[..config.n_discriminative].to_vec();
        discriminative.sort_unstable();
        let mut blast_mean = means[anchor].clone();
        for j in 0..f {
            let [lo, hi] = if discriminative.contains(&j) {
                config.blast_offset_sigma
            } else {
                config.minor_offset_sigma
            };
            let mag = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            blast_mean[j] += sign * mag * sigmas[anchor][j];
        }
        Ok(SynthTemplate {
            blast_sigma: sigmas[anchor].clone(),
            healthy_means: means,
            healthy_sigmas: sigmas,
            healthy_weights: weights,
            anchor,
            blast_mean,
            discriminative,
        })
    }
}

/// One sample with template `SynthTemplate::new(config)` and variation from `sample_seed`.
pub fn generate_sample(config: &SynthConfig, sample_seed: u64) -> Result<FcmSample> {
    let template = SynthTemplate::new(config)?;
    sample_from_template(config, &template, sample_seed, &format!("s{sample_seed}"))
}

fn sample_from_template(config: &SynthConfig, t: &SynthTemplate, sample_seed: u64, id: &str) -> Result<FcmSample> {
    let n = config.n_events;
    let f = config.n_features;
    let n_blast = config.blast_count()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);

    // Uniform in a ball: Gaussian direction, radius scale * U^(1/F).
    let mut shift: Vec<f64> = (0..f).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = shift.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let radius = config.population_shift_scale * rng.gen::<f64>().powf(1.0 / f as f64);
    shift.iter_mut().for_each(|v| *v *= radius / norm);

    let pick = WeightedIndex::new(&t.healthy_weights).expect("positive weights");
    let mut rows: Vec<(Vec<f32>, u8)> = Vec::with_capacity(n);
    let draw = |rng: &mut ChaCha8Rng, mean: &[f64], sigma: &[f64]| -> Vec<f32> {
        (0..f)
            .map(|j| {
                let z: f64 = rng.sample(StandardNormal);
                (mean[j] + shift[j] + sigma[j] * z) as f32
            })
            .collect()
    };
    for _ in 0..n_blast {
        rows.push((draw(&mut rng, &t.blast_mean, &t.blast_sigma), 1));
    }
    for _ in n_blast..n {
        let c = pick.sample(&mut rng);
        rows.push((draw(&mut rng, &t.healthy_means[c], &t.healthy_sigmas[c]), 0));
    }
    rows.shuffle(&mut rng);
    let labels = rows.iter().map(|r| r.1).collect();
    let data = rows.into_iter().flat_map(|r| r.0).collect();
    FcmSample::new(id, config.marker_names(), Tensor::from_vec(n, f, data), Some(labels))
}

/// `n_samples` samples sharing the template drawn from `seed`, split 50/25/25.
pub fn generate_dataset(config: &SynthConfig, n_samples: usize, seed: u64) -> Result<FcmDataset> {
    if n_samples < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 samples, got {n_samples}")));
    }
    let config = SynthConfig { seed, ..config.clone() };
    let template = SynthTemplate::new(&config)?;
    let samples = (0..n_samples)
        .map(|i| sample_from_template(&config, &template, derive_seed(seed, 1000 + i as u64), &format!("s{i:03}")))
        .collect::<Result<Vec<_>>>()?;
    FcmDataset::new(
        format!("synth-{seed}"),
        config.marker_names(),
        samples,
        random_split(n_samples, derive_seed(seed, 0x5b1)),
    )
}

/// The same dataset with every event translated by `offset` (one value per
/// feature). Standardization statistics are left untouched.
pub fn shift_dataset(dataset: &FcmDataset, offset: &[f32]) -> Result<FcmDataset> {
    if offset.len() != dataset.markers.len() {
        return Err(Error::InvalidArgument(format!(
            "offset has {} entries for {} features",
            offset.len(),
            dataset.markers.len()
        )));
    }
    let mut out = dataset.clone();
    for s in &mut out.samples {
        for i in 0..s.n_events() {
            for (v, o) in s.events.row_mut(i).iter_mut().zip(offset) {
                *v += o;
            }
        }
    }
    Ok(out)
}

/// Writes each sample as `<id>.csv` (with a `label` column) and a manifest
/// recording the split; returns the manifest path.
pub fn write_dataset(dataset: &FcmDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (s, sp) in dataset.samples.iter().zip(&dataset.split) {
        let file = format!("{}.csv", s.id);
        let path = dir.join(&file);
        std::fs::write(&path, write_csv_sample(s, "label")).map_err(|e| Error::io(&path, e))?;
        entries.push(SampleEntry {
            id: s.id.clone(),
            path: file.into(),
            labels: None,
            split: Some(*sp),
        });
    }
    let manifest = Manifest {
        name: dataset.name.clone(),
        markers: dataset.markers.clone(),
        label_column: Some("label".into()),
        samples: entries,
        ..Manifest::default()
    };
    let path = dir.join("manifest.toml");
    std::fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, frac: f64) -> SynthConfig {
        SynthConfig {
            n_events: n,
            blast_fraction: frac,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn blast_count_rounding() {
        assert_eq!(generate_sample(&cfg(1000, 0.01), 1).unwrap().positives(), 10);
        assert_eq!(generate_sample(&cfg(5000, 0.0001), 1).unwrap().positives(), 1);
    }

    #[test]
    fn too_many_blasts() {
        assert!(generate_sample(&cfg(1, 0.5), 1).is_err());
        assert!(generate_sample(&cfg(10, 0.00001), 1).is_err());
    }

    #[test]
    fn deterministic() {
        let c = cfg(200, 0.05);
        assert_eq!(generate_sample(&c, 4).unwrap(), generate_sample(&c, 4).unwrap());
        assert_ne!(generate_sample(&c, 4).unwrap(), generate_sample(&c, 5).unwrap());
    }

    #[test]
    fn dataset_split_and_seeds() {
        let c = cfg(100, 0.05);
        let d = generate_dataset(&c, 40, 3).unwrap();
        assert_eq!(d.split_counts(), (20, 10, 10));
        let d2 = generate_dataset(&c, 40, 3).unwrap();
        assert_eq!(d.samples, d2.samples);
        assert_eq!(d.split, d2.split);
        assert!(generate_dataset(&c, 3, 3).is_err());
    }

    #[test]
    fn templates_differ_by_seed() {
        let a = SynthTemplate::new(&SynthConfig { seed: 1, ..SynthConfig::default() }).unwrap();
        let b = SynthTemplate::new(&SynthConfig { seed: 2, ..SynthConfig::default() }).unwrap();
        assert_ne!(a.blast_mean, b.blast_mean);
        assert_eq!(a.discriminative.len(), 3);
    }
}
