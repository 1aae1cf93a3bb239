//! Per-sample precision, recall and F1; aggregation across samples and runs;
//! cross-dataset and feature-masking evaluation; PCA export of features.

mod pca;

pub use pca::{pca_features_export, pca_project, PcaProjection};

use serde::{Deserialize, Serialize};

use crate::data::{FcmDataset, Split};
use crate::error::{Error, Result};
use crate::models::{build_from_spec, Architecture, Model, ModelConfig, ModelSpec};
use crate::training::{train, TrainConfig};

/// Conventions recorded with every report.
pub const CONVENTIONS: [&str; 3] = [
    "prediction is positive when sigmoid(logit) >= 0.5",
    "precision is 0 when nothing is predicted positive",
    "samples without positive events are excluded from aggregates",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn count(labels: &[u8], predictions: &[u8]) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut c = Confusion::default();
        for (&l, &p) in labels.iter().zip(predictions) {
            match (l != 0, p != 0) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `None` when the sample has no positives.
    pub fn recall(&self) -> Option<f64> {
        (self.tp + self.fn_ > 0).then(|| ratio(self.tp, self.tp + self.fn_))
    }

    /// `2tp / (2tp + fp + fn)`, 0 when undefined.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(precision, recall, F1)` of binary predictions.
pub fn sample_metrics(labels: &[u8], predictions: &[u8]) -> Result<(f64, f64, f64)> {
    let c = Confusion::count(labels, predictions)?;
    Ok((c.precision(), c.recall().unwrap_or(0.0), c.f1()))
}

/// Thresholds logits at 0, the same as sigmoid at 0.5.
pub fn predictions_from_logits(logits: &[f32]) -> Vec<u8> {
    logits.iter().map(|&z| u8::from(z >= 0.0)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two values.
    pub std: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Summary { mean, std, median }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub n_events: usize,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False for samples without positives.
    pub included: bool,
}

impl SampleMetrics {
    pub fn new(id: impl Into<String>, labels: &[u8], predictions: &[u8]) -> Result<Self> {
        let confusion = Confusion::count(labels, predictions)?;
        Ok(SampleMetrics {
            id: id.into(),
            n_events: labels.len(),
            precision: confusion.precision(),
            recall: confusion.recall().unwrap_or(0.0),
            f1: confusion.f1(),
            included: confusion.recall().is_some(),
            confusion,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub architecture: Option<String>,
    pub seed: Option<u64>,
    pub samples: Vec<SampleMetrics>,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
    pub conventions: Vec<String>,
}

impl MetricsReport {
    pub fn from_samples(dataset: impl Into<String>, samples: Vec<SampleMetrics>) -> Self {
        let pick = |f: fn(&SampleMetrics) -> f64| -> Vec<f64> { samples.iter().filter(|s| s.included).map(f).collect() };
        MetricsReport {
            dataset: dataset.into(),
            architecture: None,
            seed: None,
            precision: Summary::of(&pick(|s| s.precision)),
            recall: Summary::of(&pick(|s| s.recall)),
            f1: Summary::of(&pick(|s| s.f1)),
            samples,
            conventions: CONVENTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_run(mut self, architecture: Architecture, seed: u64) -> Self {
        self.architecture = Some(architecture.name().to_string());
        self.seed = Some(seed);
        self
    }

    pub fn included(&self) -> usize {
        self.samples.iter().filter(|s| s.included).count()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("cannot serialize report: {e}")))
    }

    /// Aligned per-sample table followed by the aggregate line.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16} {:>8} {:>8} {:>8} {:>8}\n", "sample", "events", "p", "r", "F1");
        for s in &self.samples {
            let mark = if s.included { "" } else { " (excluded)" };
            out.push_str(&format!(
                "{:<16} {:>8} {:>8.4} {:>8.4} {:>8.4}{mark}\n",
                s.id, s.n_events, s.precision, s.recall, s.f1
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>8} {:>8.4} {:>8.4} {:>8.4}  (std {:.4}, median {:.4})\n",
            "mean",
            self.included(),
            self.precision.mean,
            self.recall.mean,
            self.f1.mean,
            self.f1.std,
            self.f1.median
        ));
        out
    }
}

/// Summary over runs (seeds) of one configuration, in the layout
/// `p, r, avg F1 +- std, med F1 +- std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub runs: usize,
    pub precision: f64,
    pub recall: f64,
    pub avg_f1: f64,
    pub avg_f1_std: f64,
    pub med_f1: f64,
    pub med_f1_std: f64,
}

pub fn summarize_runs(label: impl Into<String>, reports: &[MetricsReport]) -> RunSummary {
    let col = |f: fn(&MetricsReport) -> f64| -> Summary { Summary::of(&reports.iter().map(f).collect::<Vec<_>>()) };
    let avg = col(|r| r.f1.mean);
    let med = col(|r| r.f1.median);
    RunSummary {
        label: label.into(),
        runs: reports.len(),
        precision: col(|r| r.precision.mean).mean,
        recall: col(|r| r.recall.mean).mean,
        avg_f1: avg.mean,
        avg_f1_std: avg.std,
        med_f1: med.mean,
        med_f1_std: med.std,
    }
}

pub fn runs_table(rows: &[RunSummary]) -> String {
    let mut out = format!(
        "{:<18} {:>4} {:>8} {:>8} {:>18} {:>18}\n",
        "model", "runs", "p", "r", "avg F1", "med F1"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<18} {:>4} {:>8.4} {:>8.4} {:>9.4} +- {:<6.4} {:>9.4} +- {:<6.4}\n",
            r.label, r.runs, r.precision, r.recall, r.avg_f1, r.avg_f1_std, r.med_f1, r.med_f1_std
        ));
    }
    out
}

/// Per-sample metrics of `model` on the samples of `split` (all samples when
/// `None`), in evaluation mode on every event. Events are standardized with
/// the model's training statistics, falling back to the dataset's own.
pub fn evaluate(model: &mut Model, dataset: &FcmDataset, split: Option<Split>) -> Result<MetricsReport> {
    if dataset.markers != model.spec.markers {
        return Err(Error::Data(format!(
            "dataset `{}` markers {:?} differ from the model's {:?}",
            dataset.name, dataset.markers, model.spec.markers
        )));
    }
    let indices: Vec<usize> = match split {
        Some(sp) => dataset.indices(sp),
        None => (0..dataset.len()).collect(),
    };
    if indices.is_empty() {
        return Err(Error::Data(format!("dataset `{}` has no samples to evaluate", dataset.name)));
    }
    let stats = model.spec.standardization.clone().unwrap_or_else(|| dataset.standardization.clone());
    let mut rows = Vec::with_capacity(indices.len());
    for i in indices {
        let sample = &dataset.samples[i];
        let labels = sample
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample `{}` has no labels", sample.id)))?;
        let events = stats.apply(&sample.events)?;
        let logits = model.predict(&events, None, 0)?;
        rows.push(SampleMetrics::new(&sample.id, labels, &predictions_from_logits(&logits))?);
    }
    let report = MetricsReport::from_samples(&dataset.name, rows);
    Ok(report.with_run(model.architecture(), model.spec.config.seed))
}

/// Evaluates one trained model on other datasets without retraining.
pub fn cross_lab_eval(model: &mut Model, targets: &[&FcmDataset], split: Option<Split>) -> Result<Vec<MetricsReport>> {
    targets.iter().map(|d| evaluate(model, d, split)).collect()
}

/// Trains and tests each architecture with `masked` markers removed from
/// the node inputs, once per seed.
pub fn masked_feature_eval(
    architectures: &[Architecture],
    base: &ModelConfig,
    dataset: &FcmDataset,
    masked: &[String],
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<(Architecture, Vec<MetricsReport>)>> {
    let mut out = Vec::new();
    for &arch in architectures {
        let mut runs = Vec::new();
        for &seed in seeds {
            let config = ModelConfig {
                architecture: arch,
                seed,
                ..base.clone()
            };
            let spec = ModelSpec::new(config, dataset.markers.clone(), masked.to_vec())?;
            let mut model = build_from_spec(spec)?;
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            train(&mut model, dataset, &cfg, None)?;
            runs.push(evaluate(&mut model, dataset, Some(Split::Test))?);
        }
        out.push((arch, runs));
    }
    Ok(out)
}
