//! Builds the kNN graph and a farthest point sample on one synthetic sample.
//!
//! ```text
//! cargo run --release --example knn_fps -- [k] [ratio]
//! ```

use std::time::Instant;

use cytoset::data::Standardization;
use cytoset::geometry::{fps_select, knn_graph};
use cytoset::synth::{generate_sample, SynthConfig};

fn main() -> cytoset::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let k: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(10);
    let ratio: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.01);

    let sample = generate_sample(&SynthConfig::default(), 1)?;
    let events = Standardization::fit([&sample.events])?.apply(&sample.events)?;
    let labels = sample.labels.as_deref().unwrap_or(&[]);

    let start = Instant::now();
    let graph = knn_graph(&events, k)?;
    println!("{}-NN graph on {} events: {} edges in {:.2?}", k, events.rows(), graph.n_edges(), start.elapsed());
    // How often a blast's neighbors are blasts too.
    let (mut same, mut total) = (0, 0);
    for i in (0..events.rows()).filter(|&i| labels[i] == 1) {
        same += graph.neighbors(i).iter().filter(|&&j| labels[j] == 1).count();
        total += k;
    }
    println!("blast neighbor purity {:.3}", same as f64 / total.max(1) as f64);

    let start = Instant::now();
    let sel = fps_select(&events, ratio, 16, 7)?;
    let blasts = sel.indices.iter().filter(|&&i| labels[i] == 1).count();
    println!(
        "FPS picked {} points ({} blasts, {:.1}% vs {:.1}% overall) in {:.2?}",
        sel.indices.len(),
        blasts,
        100.0 * blasts as f64 / sel.indices.len() as f64,
        100.0 * sample.positives() as f64 / events.rows() as f64,
        start.elapsed()
    );
    Ok(())
}
