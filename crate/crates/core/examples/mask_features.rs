//! Hides the most discriminative synthetic markers from the node inputs and
//! compares architectures. Graph models still build their kNN graph on the
//! full panel, so they can recover the hidden information from neighbors.
//!
//! ```text
//! cargo run --release --example mask_features -- [arch,arch,..] [epochs] [seeds]
//! ```

use cytoset::metrics::{masked_feature_eval, runs_table, summarize_runs};
use cytoset::models::{Architecture, ModelConfig};
use cytoset::synth::{generate_dataset, SynthConfig, SynthTemplate};
use cytoset::training::TrainConfig;

fn main() -> cytoset::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let archs = args
        .first()
        .map(String::as_str)
        .unwrap_or("gin-st-fps,st")
        .split(',')
        .map(str::parse)
        .collect::<cytoset::Result<Vec<Architecture>>>()?;
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

    let synth = SynthConfig::default();
    let dataset = generate_dataset(&synth, 40, 0)?;
    let template = SynthTemplate::new(&SynthConfig { seed: 0, ..synth.clone() })?;
    let masked: Vec<String> = template.discriminative.iter().map(|&j| dataset.markers[j].clone()).collect();
    println!("masking {}", masked.join(", "));

    let train = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let results = masked_feature_eval(&archs, &ModelConfig::default(), &dataset, &masked, &train, &seeds)?;
    let rows: Vec<_> = results.iter().map(|(a, runs)| summarize_runs(a.to_string(), runs)).collect();
    print!("{}", runs_table(&rows));
    Ok(())
}
