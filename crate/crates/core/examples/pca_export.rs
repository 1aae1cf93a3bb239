//! Trains a model, then projects the pre-head activations of one test sample
//! onto two principal components and writes them as CSV.
//!
//! ```text
//! cargo run --release --example pca_export -- [arch] [epochs] [out.csv]
//! ```

use cytoset::data::Split;
use cytoset::metrics::pca_features_export;
use cytoset::models::{build_from_spec, Architecture, ModelConfig, ModelSpec};
use cytoset::synth::{generate_dataset, SynthConfig};
use cytoset::training::{train, TrainConfig};

fn main() -> cytoset::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arch: Architecture = args.first().map(String::as_str).unwrap_or("gin-st-fps").parse()?;
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let out = args.get(2).cloned().unwrap_or_else(|| "pca.csv".into());

    let cfg = SynthConfig {
        n_events: 2000,
        blast_fraction: 0.02,
        ..SynthConfig::default()
    };
    let dataset = generate_dataset(&cfg, 12, 0)?;
    let mut model = build_from_spec(ModelSpec::new(ModelConfig::new(arch), dataset.markers.clone(), vec![])?)?;
    train(&mut model, &dataset, &TrainConfig { epochs, ..TrainConfig::default() }, None)?;

    let i = dataset.indices(Split::Test)[0];
    let events = dataset.standardized(i)?;
    let labels = dataset.samples[i].labels.clone().unwrap_or_default();
    let proj = pca_features_export(&mut model, &events, &labels)?;
    // Centroid separation between blasts and the rest along the two components.
    let centroid = |want: u8| {
        let pts: Vec<_> = proj.coords.iter().zip(&proj.labels).filter(|(_, &l)| l == want).map(|(c, _)| c).collect();
        let n = pts.len().max(1) as f64;
        [pts.iter().map(|c| c[0]).sum::<f64>() / n, pts.iter().map(|c| c[1]).sum::<f64>() / n]
    };
    let (b, h) = (centroid(1), centroid(0));
    println!("sample {}: blast centroid ({:.2}, {:.2}), other ({:.2}, {:.2})", dataset.samples[i].id, b[0], b[1], h[0], h[1]);
    std::fs::write(&out, proj.to_csv()?).map_err(|e| cytoset::Error::Io { path: out.clone().into(), source: e })?;
    println!("wrote {out}");
    Ok(())
}
