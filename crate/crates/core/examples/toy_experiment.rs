//! Trains and evaluates a toy streaming recogniser.
//!
//! cargo run --release -p streamasr --example toy_experiment -- OUT_DIR [key=value ...]

use std::path::PathBuf;
use std::time::Instant;

use streamasr::harness::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy-run".into()));
    let overrides: Vec<String> = args.collect();
    let mut cfg = ExperimentConfig::default();
    cfg.apply(&overrides)?;
    let start = Instant::now();
    let s = run_experiment(&cfg, &out)?;
    for m in &s.metrics {
        println!("{}", serde_json::to_string(m)?);
    }
    println!("{}", serde_json::to_string(&s.eval)?);
    if let Some(b) = &s.delays.stats {
        println!("delay median {} ms, IQR [{}, {}] over {} words", b.median, b.q1, b.q3, s.delays.count);
    }
    println!("elapsed {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}
