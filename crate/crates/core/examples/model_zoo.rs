//! Trains every architecture briefly on a small dataset and prints one
//! consolidated table.
//!
//! ```text
//! cargo run --release --example model_zoo -- [epochs] [seeds]
//! ```

use cytoset::metrics::{masked_feature_eval, runs_table, summarize_runs};
use cytoset::models::{Architecture, ModelConfig};
use cytoset::synth::{generate_dataset, SynthConfig};
use cytoset::training::TrainConfig;

fn main() -> cytoset::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(5);
    let n_seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);

    let cfg = SynthConfig {
        n_events: 1500,
        blast_fraction: 0.03,
        ..SynthConfig::default()
    };
    let dataset = generate_dataset(&cfg, 12, 0)?;
    let train = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let runs = masked_feature_eval(&Architecture::ALL, &ModelConfig::default(), &dataset, &[], &train, &seeds)?;
    let rows: Vec<_> = runs.iter().map(|(a, r)| summarize_runs(a.to_string(), r)).collect();
    print!("{}", runs_table(&rows));
    Ok(())
}
