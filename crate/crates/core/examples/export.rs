//! Runs two short episodes, writes their reports as CSV and JSON lines, and
//! parses both files back.
//!
//! cargo run --release --example export -- [output dir]

use m2a::harness::{export_report, parse_reports, prepare_source, run_episode, ExperimentConfig, ExportFormat, Method};

fn main() -> anyhow::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("m2a-export"));
    let mut base = ExperimentConfig::default();
    base.stream.samples_per_domain = 100;
    let source = prepare_source(&base.source)?;
    let mut reports = Vec::new();
    for method in [Method::SourceFrozen, Method::M2aSpatialPatch] {
        let cfg = ExperimentConfig { method, ..base.clone() };
        let mut r = run_episode(&cfg, &source)?;
        // wall-clock time is not part of the exported schema
        r.wall_clock_secs = 0.0;
        reports.push(r);
    }
    for format in [ExportFormat::Csv, ExportFormat::JsonLines] {
        let path = export_report(&reports, format, &dir, "example")?;
        let back = parse_reports(&std::fs::read(&path)?, format)?;
        println!("{} ({} rows), parsed back identical: {}", path.display(), back.len(), back == reports);
    }
    println!("\n{}", std::fs::read_to_string(dir.join("example.csv"))?.lines().next().unwrap_or(""));
    Ok(())
}
