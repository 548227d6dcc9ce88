//! Desk-scale module ablation on two synthetic domains.
//!
//! Trains the toy network with each module switched on in turn and prints
//! the target-domain D1 per configuration and seed.
//!
//! ```text
//! cargo run --release --example ablation -- [iterations] [seeds]
//! ```

use std::time::Instant;

use stereo_adapt::ablation::{self, DeskBenchmark, ROWS};

fn main() -> stereo_adapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(3000);
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);

    let bench = DeskBenchmark::generate()?;
    for (name, switches) in ROWS {
        let mut d1s = Vec::new();
        for seed in 0..seeds {
            let start = Instant::now();
            let report = ablation::run(&bench, switches, iterations, seed)?;
            println!(
                "{name:10} seed {seed}: target D1 {:6.2}%  EPE {:5.2}  ({:.1}s)",
                report.aggregate.d1_percent,
                report.aggregate.epe,
                start.elapsed().as_secs_f64()
            );
            d1s.push(report.aggregate.d1_percent);
        }
        println!("{name:10} mean D1 {:6.2}%", d1s.iter().sum::<f64>() / d1s.len() as f64);
    }
    Ok(())
}
