//! Dataset manifests (TOML).
//!
//! ```toml
//! name = "lab-a"
//! markers = ["CD10", "CD19", "CD45"]
//! label_column = "label"        # optional; CSV column or FCS parameter
//! arcsinh_cofactor = 150.0      # optional; applied to every marker
//!
//! [arcsinh_cofactors]           # optional per-marker overrides
//! CD45 = 5.0
//!
//! [[samples]]
//! id = "p001"
//! path = "p001.fcs"             # relative to the manifest
//! labels = "p001.labels"        # optional; one 0/1 per line
//! split = "train"               # optional; all samples or none
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{random_split, FcmDataset, FcmSample, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub name: String,
    pub markers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arcsinh_cofactor: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub arcsinh_cofactors: BTreeMap<String, f64>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Clone, Debug, Default)]
pub struct BuildOptions {
    /// Canonical markers removed from the dataset entirely; samples need not contain them.
    pub drop_markers: Vec<String>,
}

fn read_labels(path: &Path, n: usize, id: &str) -> Result<Vec<u8>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let labels = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<f64>()
                .map(|v| u8::from(v != 0.0))
                .map_err(|_| Error::Csv { row: i + 1, detail: format!("label `{l}` is not numeric") })
        })
        .collect::<Result<Vec<u8>>>()?;
    if labels.len() != n {
        return Err(Error::Data(format!("sample `{id}`: {} labels for {n} events", labels.len())));
    }
    Ok(labels)
}

/// Loads one sample file (`.fcs` or CSV) with its labels.
pub fn load_sample(entry: &SampleEntry, base: &Path, label_column: Option<&str>) -> Result<FcmSample> {
    let path = base.join(&entry.path);
    let is_fcs = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("fcs"));
    let mut sample = if is_fcs {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut s = super::parse_fcs(&bytes, &entry.id)?;
        if let Some(col) = label_column {
            if let Some(j) = s.marker_index(col) {
                let labels = (0..s.n_events()).map(|i| u8::from(s.events.get(i, j) != 0.0)).collect();
                let keep: Vec<usize> = (0..s.n_features()).filter(|&c| c != j).collect();
                let markers = keep.iter().map(|&c| s.markers[c].clone()).collect();
                s = FcmSample::new(&entry.id, markers, s.events.select_cols(&keep), Some(labels))?;
            }
        }
        s
    } else {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header_has_label = label_column.is_some_and(|c| {
            text.lines()
                .next()
                .is_some_and(|h| h.split(',').any(|x| x.trim() == c))
        });
        super::load_csv_sample(&text, label_column.filter(|_| header_has_label), &entry.id)?
    };
    if let Some(lp) = &entry.labels {
        let labels = read_labels(&base.join(lp), sample.n_events(), &entry.id)?;
        sample.labels = Some(labels);
    }
    sample.markers = sample.markers.iter().map(|m| m.trim().to_string()).collect();
    Ok(sample)
}

fn cofactor_for(manifest: &Manifest, marker: &str) -> Option<f64> {
    manifest.arcsinh_cofactors.get(marker).copied().or(manifest.arcsinh_cofactor)
}

/// Loads every sample listed in the manifest at `path`, maps it to the
/// canonical markers, and splits with `seed` unless the manifest fixes it.
pub fn build_dataset(path: &Path, seed: u64) -> Result<FcmDataset> {
    build_dataset_with(path, seed, &BuildOptions::default())
}

pub fn build_dataset_with(path: &Path, seed: u64, opts: &BuildOptions) -> Result<FcmDataset> {
    let manifest = Manifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    from_manifest(&manifest, base, seed, opts)
}

pub fn from_manifest(manifest: &Manifest, base: &Path, seed: u64, opts: &BuildOptions) -> Result<FcmDataset> {
    if manifest.samples.is_empty() {
        return Err(Error::Data("manifest lists no samples".into()));
    }
    let markers: Vec<String> = manifest
        .markers
        .iter()
        .map(|m| m.trim().to_string())
        .filter(|m| !opts.drop_markers.contains(m))
        .collect();
    if markers.is_empty() {
        return Err(Error::Data("no canonical markers left".into()));
    }
    let explicit = manifest.samples.iter().filter(|s| s.split.is_some()).count();
    let split = if explicit == manifest.samples.len() {
        manifest.samples.iter().map(|s| s.split.unwrap()).collect()
    } else if explicit == 0 {
        random_split(manifest.samples.len(), seed)
    } else {
        return Err(Error::Data(format!(
            "{explicit} of {} samples have an explicit split; give all or none",
            manifest.samples.len()
        )));
    };
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let raw = load_sample(entry, base, manifest.label_column.as_deref())?;
        let mut s = raw.select_markers(&markers)?;
        for (j, m) in markers.iter().enumerate() {
            if let Some(c) = cofactor_for(manifest, m) {
                if !(c > 0.0) {
                    return Err(Error::Config(format!("arcsinh cofactor for `{m}` must be positive")));
                }
                for i in 0..s.n_events() {
                    let v = s.events.get(i, j) as f64;
                    s.events.set(i, j, (v / c).asinh() as f32);
                }
            }
        }
        samples.push(s);
    }
    let name = if manifest.name.is_empty() { "dataset".to_string() } else { manifest.name.clone() };
    FcmDataset::new(name, markers, samples, split)
}
