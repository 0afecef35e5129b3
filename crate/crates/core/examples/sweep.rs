//! Runs a small ablation grid over loss modes and masking methods on a short
//! stream, in parallel, and prints one row per arm in grid order.
//!
//! cargo run --release --example sweep -- [samples per domain]

use m2a::harness::{prepare_source, run_sweep, ExperimentConfig, Method, SweepGrid};
use m2a::objectives::LossMode;

fn main() -> anyhow::Result<()> {
    let samples: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let mut base = ExperimentConfig::default();
    base.stream.samples_per_domain = samples;
    let grid = SweepGrid {
        method: vec![Method::M2aSpatialPatch, Method::M2aSpatialPixel, Method::M2aFreqAll],
        loss_mode: vec![LossMode::MclEml, LossMode::Mcl, LossMode::Eml],
        ..SweepGrid::default()
    };
    let source = prepare_source(&base.source)?;
    println!("{:<18} {:<8} {:>8} {:>8} {:>8}", "method", "loss", "mean%", "source%", "gain");
    for arm in run_sweep(&base, &grid, &source) {
        match arm.outcome {
            Ok(r) => println!(
                "{:<18} {:<8} {:>8.2} {:>8.2} {:>+8.2}",
                r.method, arm.config.loss_mode, r.mean_error, r.source_mean_error, r.gain
            ),
            Err(e) => println!("{:<18} {:<8} failed: {e}", arm.config.method, arm.config.loss_mode),
        }
    }
    Ok(())
}
