//! Runs the randomized gradient-check suite over every op kind and layer.
//!
//! Usage: cargo run --release --example gradcheck [instances] [seed]

use std::time::Instant;

use cytoset::gradsuite::{all_cases, run_suite, suite_table, SuiteConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = SuiteConfig::default();
    if let Some(n) = args.get(1) {
        cfg.instances = n.parse().expect("instances must be an integer");
    }
    if let Some(s) = args.get(2) {
        cfg.seed = s.parse().expect("seed must be an integer");
    }
    let start = Instant::now();
    let results = run_suite(&all_cases(), &cfg);
    print!("{}", suite_table(&results));
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} cases, {failed} failed, {:.1}s", results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
