//! Samples, datasets, splits and standardization.

pub mod csv_io;
pub mod fcs;
pub mod manifest;

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use csv_io::{load_csv_sample, write_csv_sample};
pub use fcs::{parse_fcs, ByteOrder, FcsWriter};
pub use manifest::{build_dataset, build_dataset_with, BuildOptions, Manifest, SampleEntry};

/// One measured sample: `n x F` events, marker names and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FcmSample {
    pub id: String,
    pub markers: Vec<String>,
    pub events: Tensor,
    /// 1 marks a blast.
    pub labels: Option<Vec<u8>>,
}

impl FcmSample {
    pub fn new(id: impl Into<String>, markers: Vec<String>, events: Tensor, labels: Option<Vec<u8>>) -> Result<Self> {
        let id = id.into();
        let (n, f) = events.dims();
        if n == 0 || f == 0 {
            return Err(Error::Data(format!("sample `{id}` has shape {n}x{f}")));
        }
        if markers.len() != f {
            return Err(Error::Data(format!("sample `{id}`: {} marker names for {f} columns", markers.len())));
        }
        let mut seen = HashSet::new();
        for m in &markers {
            if !seen.insert(m.as_str()) {
                return Err(Error::Data(format!("sample `{id}`: duplicate marker `{m}`")));
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Data(format!("sample `{id}`: {} labels for {n} events", l.len())));
            }
        }
        Ok(FcmSample { id, markers, events, labels })
    }

    pub fn n_events(&self) -> usize {
        self.events.rows()
    }

    pub fn n_features(&self) -> usize {
        self.events.cols()
    }

    pub fn marker_index(&self, name: &str) -> Option<usize> {
        self.markers.iter().position(|m| m == name)
    }

    pub fn positives(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| l.iter().filter(|&&v| v == 1).count())
    }

    /// Columns reordered to `markers`; errors name the first missing marker.
    pub fn select_markers(&self, markers: &[String]) -> Result<FcmSample> {
        let idx = markers
            .iter()
            .map(|m| {
                self.marker_index(m).ok_or_else(|| Error::MissingMarker {
                    sample: self.id.clone(),
                    marker: m.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FcmSample {
            id: self.id.clone(),
            markers: markers.to_vec(),
            events: self.events.select_cols(&idx),
            labels: self.labels.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

/// Split sizes for `n` samples: cumulative boundaries at `round(n/2)` and
/// `round(3n/4)`, so 8 gives 4/2/2 and 519 gives 260/129/130.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train_end = (n as f64 * 0.5).round() as usize;
    let val_end = (n as f64 * 0.75).round() as usize;
    (train_end, val_end - train_end, n - val_end)
}

/// Seeded shuffle of `0..n` followed by the 50/25/25 partition.
pub fn random_split(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, va, _) = split_sizes(n);
    let mut split = vec![Split::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        split[i] = if pos < tr {
            Split::Train
        } else if pos < tr + va {
            Split::Val
        } else {
            Split::Test
        };
    }
    split
}

/// Per-feature z-score parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Mean and population std over all rows of all `samples`.
    /// Constant features get std 1.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sumsq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut tensors = Vec::new();
        for t in samples {
            if sum.is_empty() {
                sum = vec![0.0; t.cols()];
                sumsq = vec![0.0; t.cols()];
            }
            if t.cols() != sum.len() {
                return Err(Error::Data("standardization inputs differ in width".into()));
            }
            for i in 0..t.rows() {
                for (s, &v) in sum.iter_mut().zip(t.row(i)) {
                    *s += v as f64;
                }
            }
            count += t.rows();
            tensors.push(t);
        }
        if count == 0 {
            return Err(Error::Data("no events to standardize from".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        // Second pass about the mean for accuracy.
        for t in tensors {
            for i in 0..t.rows() {
                for ((s, &v), m) in sumsq.iter_mut().zip(t.row(i)).zip(&mean) {
                    let d = v as f64 - m;
                    *s += d * d;
                }
            }
        }
        let std = sumsq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardization { mean, std })
    }

    pub fn apply(&self, events: &Tensor) -> Result<Tensor> {
        let (n, f) = events.dims();
        if f != self.mean.len() {
            return Err(Error::Data(format!(
                "standardization fitted on {} features, events have {f}",
                self.mean.len()
            )));
        }
        let mut out = events.clone();
        for i in 0..n {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = ((*v as f64 - self.mean[j]) / self.std[j]) as f32;
            }
        }
        Ok(out)
    }
}

/// Samples mapped to a canonical marker order, with split and train-only
/// standardization statistics. Events are stored after any intensity
/// transform but before standardization.
#[derive(Clone, Debug)]
pub struct FcmDataset {
    pub name: String,
    pub markers: Vec<String>,
    pub samples: Vec<FcmSample>,
    pub split: Vec<Split>,
    pub standardization: Standardization,
}

impl FcmDataset {
    /// Validates marker order and fits standardization on the train split.
    pub fn new(name: impl Into<String>, markers: Vec<String>, samples: Vec<FcmSample>, split: Vec<Split>) -> Result<Self> {
        let name = name.into();
        if samples.len() != split.len() {
            return Err(Error::Data(format!("{} samples but {} split entries", samples.len(), split.len())));
        }
        for s in &samples {
            if s.markers != markers {
                return Err(Error::Data(format!("sample `{}` is not in canonical marker order", s.id)));
            }
        }
        let train: Vec<&Tensor> = samples
            .iter()
            .zip(&split)
            .filter(|(_, &sp)| sp == Split::Train)
            .map(|(s, _)| &s.events)
            .collect();
        if train.is_empty() {
            return Err(Error::Data(format!("dataset `{name}` has an empty train split")));
        }
        let standardization = Standardization::fit(train)?;
        Ok(FcmDataset {
            name,
            markers,
            samples,
            split,
            standardization,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let c = |s| self.split.iter().filter(|&&x| x == s).count();
        (c(Split::Train), c(Split::Val), c(Split::Test))
    }

    pub fn standardized(&self, i: usize) -> Result<Tensor> {
        self.standardization.apply(&self.samples[i].events)
    }

    /// Same samples standardized with another dataset's statistics.
    pub fn with_standardization(&self, stats: Standardization) -> FcmDataset {
        FcmDataset {
            standardization: stats,
            ..self.clone()
        }
    }
}
