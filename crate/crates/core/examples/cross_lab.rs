//! Trains on one synthetic "lab" and evaluates on others whose populations
//! sit at different offsets.
//!
//! ```text
//! cargo run --release --example cross_lab -- [arch] [epochs]
//! ```

use cytoset::data::Split;
use cytoset::metrics::{cross_lab_eval, evaluate};
use cytoset::models::{build_from_spec, Architecture, ModelConfig, ModelSpec};
use cytoset::synth::{generate_dataset, shift_dataset, SynthConfig};
use cytoset::training::{train, TrainConfig};

fn main() -> cytoset::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arch: Architecture = args.first().map(String::as_str).unwrap_or("st").parse()?;
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);

    let cfg = SynthConfig {
        n_events: 2000,
        blast_fraction: 0.02,
        ..SynthConfig::default()
    };
    let home = generate_dataset(&cfg, 16, 0)?;
    let mut model = build_from_spec(ModelSpec::new(ModelConfig::new(arch), home.markers.clone(), vec![])?)?;
    let train_cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    train(&mut model, &home, &train_cfg, None)?;
    let own = evaluate(&mut model, &home, Some(Split::Test))?;
    println!("{:<24} avg F1 {:.4}", "home (test split)", own.f1.mean);

    // A uniform instrument offset, and an independent lab with stronger per-sample variation.
    let f = home.markers.len();
    let offset = shift_dataset(&home, &vec![0.75; f])?;
    let noisy = generate_dataset(&SynthConfig { population_shift_scale: 3.0, ..cfg }, 16, 0)?;
    let reports = cross_lab_eval(&mut model, &[&offset, &noisy], None)?;
    for (name, r) in ["offset +0.75 (all)", "shift scale 3 (all)"].iter().zip(&reports) {
        println!("{name:<24} avg F1 {:.4}", r.f1.mean);
    }
    Ok(())
}
