//! Command-line driver: `pretrain`, `run`, `sweep`, `export`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use m2a::archive;
use m2a::data::save_split;
use m2a::harness::{
    export_report, load_source, parse_reports, prepare_source, render_reports, run_sweep, trace_episode,
    ExperimentConfig, ExportFormat, Labels, Method, SourceConfig, SourceModel, SweepGrid,
};
use m2a::objectives::LossMode;

#[derive(Parser)]
#[command(name = "m2a", version, about = "Continual test-time adaptation with masked views")]
struct Cli {
    /// Results directory. Overrides `M2A_OUTPUT_ROOT` and the config's `output_dir`.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and train the source classifier.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one continual adaptation episode.
    Run {
        #[command(flatten)]
        opts: RunOpts,
        /// Report file name without extension (default `<method>-seed<seed>`).
        #[arg(long)]
        name: Option<String>,
    },
    /// Run every point of an ablation grid.
    Sweep {
        #[command(flatten)]
        opts: RunOpts,
        /// TOML file with list-valued axes (method, loss_mode, n, alpha, lr,
        /// steps_per_batch, batch, seed).
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "sweep")]
        name: String,
    },
    /// Convert a report file between CSV and JSON lines.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: ExportFormat,
        /// Destination file (default: input with the new extension).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunOpts {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long, value_parser = parse_loss_mode)]
    loss_mode: Option<LossMode>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps_per_batch: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    severity: Option<u8>,
    #[arg(long)]
    samples_per_domain: Option<usize>,
    #[arg(long, value_parser = parse_format, default_value = "csv")]
    format: ExportFormat,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: m2a::Error| e.to_string())
}

fn parse_loss_mode(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: m2a::Error| e.to_string())
}

fn parse_format(s: &str) -> Result<ExportFormat, String> {
    s.parse().map_err(|e: m2a::Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
    }
}

impl RunOpts {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = load_config(self.config.as_deref())?;
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),*) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(method => method, loss_mode => loss_mode, n => n, alpha => alpha, lr => lr,
             steps_per_batch => steps_per_batch, batch => batch, seed => seed,
             severity => stream.severity, samples_per_domain => stream.samples_per_domain);
        Ok(c)
    }
}

/// Flag, then environment, then config file, then `./m2a-output`.
fn output_root(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os("M2A_OUTPUT_ROOT").map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("m2a-output"))
}

fn source_dir(root: &Path, cfg: &SourceConfig) -> PathBuf {
    let json = serde_json::to_string(cfg).expect("source config serializes");
    let hash = Sha256::digest(json.as_bytes());
    let tag: String = hash[..8].iter().map(|b| format!("{b:02x}")).collect();
    root.join("source").join(tag)
}

fn pretrain(root: &Path, cfg: &SourceConfig) -> anyhow::Result<SourceModel> {
    let dir = source_dir(root, cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let started = std::time::Instant::now();
    let source = prepare_source(cfg)?;
    archive::save(&source.model, &dir.join("model.m2ap"))?;
    save_split(&source.dataset.train, cfg.dataset.classes, &dir.join("train.m2ad"))?;
    save_split(&source.dataset.stream, cfg.dataset.classes, &dir.join("stream.m2ad"))?;
    let echo = toml::to_string(cfg).context("serializing source config")?;
    std::fs::write(dir.join("source.toml"), echo)?;
    let report = serde_json::to_string_pretty(&source.pretrain)?;
    std::fs::write(dir.join("pretrain.json"), report)?;
    let pre = source.pretrain.as_ref().expect("fresh source has a report");
    eprintln!(
        "source trained in {:.1}s: train acc {:.4}, clean held-out acc {:.4} -> {}",
        started.elapsed().as_secs_f64(),
        pre.train_accuracy,
        pre.heldout_accuracy.unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(source)
}

/// Loads the cached source for this config, training it first if needed.
fn source_for(root: &Path, cfg: &SourceConfig) -> anyhow::Result<SourceModel> {
    let path = source_dir(root, cfg).join("model.m2ap");
    if path.exists() {
        Ok(load_source(cfg, &path)?)
    } else {
        pretrain(root, cfg)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain { config } => {
            let cfg = load_config(config.as_deref())?;
            let root = output_root(cli.output_root.as_deref(), &cfg);
            pretrain(&root, &cfg.source)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { opts, name } => {
            let cfg = opts.config()?;
            cfg.validate()?;
            let root = output_root(cli.output_root.as_deref(), &cfg);
            let source = source_for(&root, &cfg.source)?;
            let trace = trace_episode(&cfg, &source, Labels::Real)?;
            let r = &trace.report;
            let stem = name.unwrap_or_else(|| format!("{}-seed{}", cfg.method, cfg.seed));
            let dir = root.join("runs");
            let path = export_report(std::slice::from_ref(r), opts.format, &dir, &stem)?;
            let mut log = csv::Writer::from_writer(Vec::new());
            for b in &trace.batches {
                log.serialize(b)?;
            }
            write_bytes(&dir.join(format!("{stem}-batches.csv")), &log.into_inner()?)?;
            for (d, e) in r.domains.iter().zip(&r.domain_error) {
                eprintln!("{d:<16} {e:6.2}%");
            }
            eprintln!(
                "{}: mean {:.2}% source {:.2}% gain {:+.2} ({:.1}s) -> {}",
                r.method,
                r.mean_error,
                r.source_mean_error,
                r.gain,
                r.wall_clock_secs,
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { opts, grid, name } => {
            let base = opts.config()?;
            let text = std::fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let grid: SweepGrid = toml::from_str(&text).with_context(|| format!("parsing {}", grid.display()))?;
            let root = output_root(cli.output_root.as_deref(), &base);
            let source = source_for(&root, &base.source)?;
            let arms = run_sweep(&base, &grid, &source);
            let mut reports = Vec::new();
            let mut failures = Vec::new();
            for arm in arms {
                match arm.outcome {
                    Ok(r) => {
                        eprintln!(
                            "{:<18} {:<8} n={} alpha={} lr={} steps={} batch={} seed={}: mean {:.2}% gain {:+.2}",
                            r.method,
                            arm.config.loss_mode,
                            arm.config.n,
                            arm.config.alpha,
                            arm.config.lr,
                            arm.config.steps_per_batch,
                            arm.config.batch,
                            r.seed,
                            r.mean_error,
                            r.gain
                        );
                        reports.push(r);
                    }
                    Err(e) => {
                        eprintln!("arm failed ({} seed {}): {e}", arm.config.method, arm.config.seed);
                        let line = serde_json::json!({ "error": e, "config": arm.config });
                        failures.push(line.to_string());
                    }
                }
            }
            let dir = root.join("sweeps");
            let path = export_report(&reports, opts.format, &dir, &name)?;
            eprintln!("{} rows -> {}", reports.len(), path.display());
            if failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                let fpath = dir.join(format!("{name}-failures.jsonl"));
                write_bytes(&fpath, (failures.join("\n") + "\n").as_bytes())?;
                eprintln!("{} arm(s) failed -> {}", failures.len(), fpath.display());
                Ok(ExitCode::from(2))
            }
        }
        Command::Export { input, format, output } => {
            let from = match input.extension().and_then(|e| e.to_str()) {
                Some("csv") => ExportFormat::Csv,
                Some("jsonl") => ExportFormat::JsonLines,
                _ => bail!("{}: expected a .csv or .jsonl report", input.display()),
            };
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let reports = parse_reports(&bytes, from)?;
            let out = output.unwrap_or_else(|| input.with_extension(format.extension()));
            write_bytes(&out, &render_reports(&reports, format)?)?;
            eprintln!("{} rows -> {}", reports.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
