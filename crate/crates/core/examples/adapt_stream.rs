//! Trains the source classifier, then runs the default continual episode for
//! the source-frozen arm and an M2A method side by side.
//!
//! cargo run --release --example adapt_stream -- [method] [seed]

use m2a::harness::{prepare_source, run_episode, ExperimentConfig, Method};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let method: Method = args.next().as_deref().unwrap_or("m2a-spatial-patch").parse()?;
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let cfg = ExperimentConfig {
        method,
        seed,
        ..ExperimentConfig::default()
    };
    let t = std::time::Instant::now();
    let source = prepare_source(&cfg.source)?;
    let pre = source.pretrain.as_ref().expect("freshly trained");
    println!(
        "source: train acc {:.4}, clean held-out acc {:.4}, loss curve {:?} ({:.1}s)",
        pre.train_accuracy,
        pre.heldout_accuracy.unwrap_or(f64::NAN),
        pre.loss_curve,
        t.elapsed().as_secs_f64()
    );
    let report = run_episode(&cfg, &source)?;
    println!("{:<16} {:>8} {:>8} {:>8}", "domain", "error%", "mcl", "eml");
    for (i, d) in report.domains.iter().enumerate() {
        println!(
            "{:<16} {:>8.2} {:>8.4} {:>8.4}",
            d, report.domain_error[i], report.domain_mcl[i], report.domain_eml[i]
        );
    }
    println!(
        "{}: mean {:.2}%  source {:.2}%  gain {:+.2}  relative {:.1}%  ({:.1}s)",
        method,
        report.mean_error,
        report.source_mean_error,
        report.gain,
        100.0 * report.gain / report.source_mean_error,
        report.wall_clock_secs
    );
    Ok(())
}
