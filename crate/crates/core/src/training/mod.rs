//! Training recipe: per-epoch event subsampling with jitter, label-smoothed
//! binary cross-entropy, AdamW with cosine annealing and best-checkpoint
//! selection on validation mean F1.

mod optim;

pub use optim::{adamw_step, AdamW, AdamWParams};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{FcmDataset, Split};
use crate::error::{Error, Result};
use crate::layers::MessageGraph;
use crate::metrics::{predictions_from_logits, MetricsReport, SampleMetrics};
use crate::models::{forward, Model};
use crate::seed::derive_seed;
use crate::tensor::{ParamGrads, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `t mod T`: warm restarts every `T` epochs.
    #[default]
    Restart,
    /// `min(t, T)`: stays at the minimum after `T` epochs.
    Clamped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub events_per_sample: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub cosine_t: usize,
    pub schedule: Schedule,
    pub jitter_scale: f64,
    pub label_smoothing_eps: f64,
    pub gat_weight_decay: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            events_per_sample: 50_000,
            epochs: 150,
            lr: 1e-3,
            lr_min: 2e-4,
            cosine_t: 10,
            schedule: Schedule::Restart,
            jitter_scale: 0.01,
            label_smoothing_eps: 0.1,
            gat_weight_decay: 0.2,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.events_per_sample == 0 || self.cosine_t == 0 {
            return Err(Error::Config(
                "batch_size, events_per_sample and cosine_t must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config(format!("need 0 <= lr_min <= lr, got {} and {}", self.lr_min, self.lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing_eps) || self.jitter_scale < 0.0 {
            return Err(Error::Config("label_smoothing_eps must be in [0, 1) and jitter_scale >= 0".into()));
        }
        Ok(())
    }
}

/// `lr_min + (lr - lr_min)(1 + cos(pi t' / T)) / 2` with `t'` per the schedule.
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> f64 {
    let period = cfg.cosine_t.max(1);
    let tt = match cfg.schedule {
        Schedule::Restart => t % period,
        Schedule::Clamped => t.min(period),
    };
    let phase = std::f64::consts::PI * tt as f64 / period as f64;
    cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + phase.cos())
}

/// Maps `{0, 1}` to `{eps/2, 1 - eps/2}`.
pub fn smooth_labels(labels: &[u8], eps: f64) -> Vec<f32> {
    let (lo, hi) = ((eps / 2.0) as f32, (1.0 - eps / 2.0) as f32);
    labels.iter().map(|&l| if l != 0 { hi } else { lo }).collect()
}

/// One sample's contribution to a batch.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub sample: usize,
    /// Sorted distinct row indices into the sample.
    pub rows: Vec<usize>,
    /// Subsampled rows before jitter; graphs are built on these.
    pub clean: Tensor,
    /// Subsampled rows with jitter.
    pub events: Tensor,
    pub targets: Vec<f32>,
}

impl BatchItem {
    pub fn covers_sample(&self, n: usize) -> bool {
        self.rows.len() == n
    }
}

/// Subsamples (without replacement), jitters and smooths one batch. Each
/// entry of `samples` is `(index, standardized events, labels)`.
pub fn make_batch(
    samples: &[(usize, &Tensor, &[u8])],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchItem>> {
    let noise = Normal::new(0.0, cfg.jitter_scale.max(0.0))
        .map_err(|e| Error::Config(format!("invalid jitter scale: {e}")))?;
    samples
        .iter()
        .map(|&(index, events, labels)| {
            let n = events.rows();
            if n == 0 {
                return Err(Error::Data(format!("sample {index} has no events")));
            }
            if labels.len() != n {
                return Err(Error::Data(format!("sample {index}: {} labels for {n} events", labels.len())));
            }
            let rows: Vec<usize> = if n <= cfg.events_per_sample {
                (0..n).collect()
            } else {
                let mut r = rand::seq::index::sample(rng, n, cfg.events_per_sample).into_vec();
                r.sort_unstable();
                r
            };
            let clean = if rows.len() == n { events.clone() } else { events.select_rows(&rows) };
            let mut jittered = clean.clone();
            if cfg.jitter_scale > 0.0 {
                jittered.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng) as f32);
            }
            let sub: Vec<u8> = rows.iter().map(|&i| labels[i]).collect();
            Ok(BatchItem {
                sample: index,
                rows,
                clean,
                events: jittered,
                targets: smooth_labels(&sub, cfg.label_smoothing_eps),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mean_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub checkpoint: Option<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_DIR: &str = "best";

/// Per-sample graphs and standardized events of one dataset.
struct Prepared {
    events: Vec<Tensor>,
    graphs: HashMap<usize, MessageGraph>,
}

/// Trains `model` on the train split and leaves it holding the parameters
/// of the epoch with the best validation mean F1. When `out` is given, the
/// log and the best checkpoint are written there.
pub fn train(model: &mut Model, dataset: &FcmDataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.markers != model.spec.markers {
        return Err(Error::Data(format!(
            "dataset `{}` markers differ from the model's",
            dataset.name
        )));
    }
    let train_idx = dataset.indices(Split::Train);
    let val_idx = dataset.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Data(format!("dataset `{}` needs non-empty train and val splits", dataset.name)));
    }
    for &i in train_idx.iter().chain(&val_idx) {
        if dataset.samples[i].labels.is_none() {
            return Err(Error::Data(format!("sample `{}` has no labels", dataset.samples[i].id)));
        }
    }
    model.spec.standardization = Some(dataset.standardization.clone());
    let mut prep = Prepared {
        events: dataset
            .samples
            .iter()
            .map(|s| dataset.standardization.apply(&s.events))
            .collect::<Result<_>>()?,
        graphs: HashMap::new(),
    };

    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(LOG_FILE);
            Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7a1));
    let mut opt = AdamW::new(&model.store);
    let hyper = AdamWParams {
        weight_decay: cfg.weight_decay,
        gat_weight_decay: cfg.gat_weight_decay,
        ..AdamWParams::default()
    };
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, crate::tensor::ParamStore)> = None;
    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let entries: Vec<(usize, &Tensor, &[u8])> = chunk
                .iter()
                .map(|&i| (i, &prep.events[i], dataset.samples[i].labels.as_deref().unwrap_or(&[])))
                .collect();
            let items = make_batch(&entries, cfg, &mut rng)?;
            let mut grads = ParamGrads::new(&model.store);
            let mut batch_loss = 0.0f64;
            let step_seed = derive_seed(cfg.seed, ((epoch as u64) << 24) | b as u64);
            for (j, item) in items.iter().enumerate() {
                let n = prep.events[item.sample].rows();
                let graph = if !model.needs_graph() {
                    None
                } else if item.covers_sample(n) {
                    Some(cached_graph(model, &mut prep, item.sample)?)
                } else {
                    model.build_graph(&item.clean)?
                };
                let full = model.prepare(&item.events, graph)?;
                let (mut s, body, head) = model.session(true, derive_seed(step_seed, j as u64));
                let y = forward(&mut s, body, head, &full)?;
                let loss = s.tape.bce_with_logits(y, Arc::new(item.targets.clone()))?;
                let l = s.value(loss).item() as f64;
                if !l.is_finite() {
                    return Err(Error::Diverged { epoch, batch: b });
                }
                batch_loss += l;
                let g = s.param_grads(loss)?;
                grads.accumulate(&g, 1.0 / items.len() as f32);
            }
            if !grads.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            adamw_step(&mut model.store, &grads, &mut opt, lr, &hyper)?;
            loss_sum += batch_loss / items.len() as f64;
        }
        let n_batches = order.len().div_ceil(cfg.batch_size);
        let train_loss = loss_sum / n_batches as f64;
        let val = validate(model, dataset, &val_idx, &mut prep)?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_mean_f1: val.f1.mean,
        };
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(out.unwrap_or(Path::new(".")), e))?;
        }
        if best.as_ref().is_none_or(|(_, f, _)| rec.val_mean_f1 > *f) {
            best = Some((epoch, rec.val_mean_f1, model.store.clone()));
        }
        records.push(rec);
    }
    if let Some(w) = log.as_mut() {
        w.flush().map_err(|e| Error::io(out.unwrap_or(Path::new(".")), e))?;
    }
    let (best_epoch, best_val_f1) = match best {
        Some((e, f, store)) => {
            model.store = store;
            (e, f)
        }
        None => (0, 0.0),
    };
    let checkpoint = match out {
        Some(dir) => {
            let p = dir.join(BEST_DIR);
            model.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainReport {
        epochs: records,
        best_epoch,
        best_val_f1,
        checkpoint,
    })
}

fn cached_graph(model: &Model, prep: &mut Prepared, i: usize) -> Result<MessageGraph> {
    if let Some(g) = prep.graphs.get(&i) {
        return Ok(g.clone());
    }
    let g = model
        .build_graph(&prep.events[i])?
        .ok_or_else(|| Error::InvalidArgument("graph requested for a graph-free model".into()))?;
    prep.graphs.insert(i, g.clone());
    Ok(g)
}

fn validate(model: &mut Model, dataset: &FcmDataset, idx: &[usize], prep: &mut Prepared) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(idx.len());
    for &i in idx {
        let graph = if model.needs_graph() {
            Some(cached_graph(model, prep, i)?)
        } else {
            None
        };
        let logits = model.predict(&prep.events[i], graph, 0)?;
        let sample = &dataset.samples[i];
        let labels = sample.labels.as_deref().unwrap_or(&[]);
        rows.push(SampleMetrics::new(&sample.id, labels, &predictions_from_logits(&logits))?);
    }
    Ok(MetricsReport::from_samples(&dataset.name, rows))
}
