//! Trains one architecture on a generated dataset and reports test metrics.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [arch] [epochs] [seed] [shift-scale]
//! ```

use std::time::Instant;

use cytoset::data::Split;
use cytoset::metrics::evaluate;
use cytoset::models::{build_from_spec, Architecture, ModelConfig, ModelSpec};
use cytoset::synth::{generate_dataset, SynthConfig};
use cytoset::training::{train, TrainConfig};

fn main() -> cytoset::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arch: Architecture = args.first().map(String::as_str).unwrap_or("gin-st-fps").parse()?;
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let shift: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let synth = SynthConfig {
        population_shift_scale: shift,
        ..SynthConfig::default()
    };
    let dataset = generate_dataset(&synth, 40, seed)?;
    let (tr, va, te) = dataset.split_counts();
    println!("dataset {}: {tr} train / {va} val / {te} test samples", dataset.name);

    let spec = ModelSpec::new(ModelConfig::new(arch).with_seed(seed), dataset.markers.clone(), vec![])?;
    let mut model = build_from_spec(spec)?;
    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let report = train(&mut model, &dataset, &cfg, None)?;
    for r in &report.epochs {
        println!(
            "epoch {:>3}  lr {:.6}  loss {:.4}  val F1 {:.4}",
            r.epoch, r.lr, r.train_loss, r.val_mean_f1
        );
    }
    println!(
        "best epoch {} (val F1 {:.4}), {:.1}s",
        report.best_epoch,
        report.best_val_f1,
        start.elapsed().as_secs_f64()
    );
    let test = evaluate(&mut model, &dataset, Some(Split::Test))?;
    print!("{}", test.to_table());
    Ok(())
}
