//! Adaptation episodes over the continual stream, ablation sweeps and report
//! export.
//!
//! The adaptation side only ever sees [`StreamBatch`]es, which carry pixels
//! and positions but no labels. Scoring goes through a separate
//! [`LabelLedger`] after the adapter has produced its predictions.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::data::{
    build_stream, derive_seed, generate_source, DatasetSpec, LabelLedger, StreamBatch, StreamSpec, SyntheticDataset,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::masking::{make_schedule, make_views, Band, MaskPolicy, MaskSchedule};
use crate::model::{argmax_rows, Classifier, ClassifierConfig, ParamRole, Trainable};
use crate::objectives::{total_loss, LossMode, Orientation, ViewPredictions};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Tape, Tensor};
use crate::train::{pretrain_source, PretrainConfig, PretrainReport};

const STREAM_TAG: u64 = 0x5354;
const MASK_TAG: u64 = 0x4d41;

/// The adaptation method of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SourceFrozen,
    M2aSpatialPatch,
    M2aSpatialPixel,
    M2aFreqAll,
    M2aFreqLow,
    M2aFreqHigh,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::SourceFrozen,
        Method::M2aSpatialPatch,
        Method::M2aSpatialPixel,
        Method::M2aFreqAll,
        Method::M2aFreqLow,
        Method::M2aFreqHigh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SourceFrozen => "source-frozen",
            Method::M2aSpatialPatch => "m2a-spatial-patch",
            Method::M2aSpatialPixel => "m2a-spatial-pixel",
            Method::M2aFreqAll => "m2a-freq-all",
            Method::M2aFreqLow => "m2a-freq-low",
            Method::M2aFreqHigh => "m2a-freq-high",
        }
    }

    pub fn adapts(self) -> bool {
        self != Method::SourceFrozen
    }

    /// Mask policy used to build views. The frozen arm still builds patch
    /// views so that its loss traces are comparable.
    pub fn policy(self, patch_side: Option<usize>) -> MaskPolicy {
        let freq = |band| MaskPolicy::Frequency { band, symmetric: false };
        match self {
            Method::SourceFrozen | Method::M2aSpatialPatch => MaskPolicy::Patch { side: patch_side },
            Method::M2aSpatialPixel => MaskPolicy::Pixel,
            Method::M2aFreqAll => freq(Band::All),
            Method::M2aFreqLow => freq(Band::Low),
            Method::M2aFreqHigh => freq(Band::High),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Unknown {
                what: "method",
                name: s.into(),
            })
    }
}

/// Which output is scored as the online prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionView {
    /// The unmasked view `p^(0)`.
    #[default]
    Anchor,
    /// The average of all view probabilities.
    MeanOfViews,
}

/// Everything needed to rebuild the source model deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ClassifierConfig,
    pub pretrain: PretrainConfig,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            seed: 0,
            dataset: DatasetSpec::default(),
            model: ClassifierConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        let (d, m) = (&self.dataset, &self.model);
        if (d.classes, d.channels, d.height, d.width) != (m.classes, m.channels, m.height, m.width) {
            return Err(Error::Config(format!(
                "dataset geometry K={} {}x{}x{} does not match model K={} {}x{}x{}",
                d.classes, d.channels, d.height, d.width, m.classes, m.channels, m.height, m.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub loss_mode: LossMode,
    pub orientation: Orientation,
    pub n: usize,
    pub alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps_per_batch: usize,
    pub batch: usize,
    pub seed: u64,
    /// Patch side for spatial-patch views; `None` means `⌈H/8⌉`.
    pub patch_side: Option<usize>,
    pub prediction: PredictionView,
    pub stream: StreamSpec,
    pub source: SourceConfig,
    /// Where the CLI writes results; not used by the library itself.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::M2aSpatialPatch,
            loss_mode: LossMode::MclEml,
            orientation: Orientation::TargetWeighted,
            n: 3,
            alpha: 0.1,
            lr: 1e-3,
            weight_decay: 0.0,
            steps_per_batch: 1,
            batch: 20,
            seed: 0,
            patch_side: None,
            prediction: PredictionView::Anchor,
            stream: StreamSpec::default(),
            source: SourceConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn policy(&self) -> MaskPolicy {
        self.method.policy(self.patch_side)
    }

    /// Schedule and policy checks. Runs before any adaptation.
    pub fn validate(&self) -> Result<MaskSchedule> {
        self.source.validate()?;
        let schedule = make_schedule(self.n, self.alpha)?;
        let (h, w) = (self.source.model.height, self.source.model.width);
        let last = *schedule.levels().last().expect("n >= 2");
        self.policy().check_level(last, h, w)?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be finite and non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.method.adapts() && self.steps_per_batch == 0 {
            return Err(Error::Config("steps_per_batch must be positive".into()));
        }
        if self.stream.order.is_empty() {
            return Err(Error::Config("stream order is empty".into()));
        }
        if self.stream.severity > 5 {
            return Err(Error::Config(format!("severity {} outside 0..=5", self.stream.severity)));
        }
        if self.stream.samples_per_domain > self.source.dataset.stream_size {
            return Err(Error::Config(format!(
                "samples_per_domain {} exceeds the clean stream split of {}",
                self.stream.samples_per_domain, self.source.dataset.stream_size
            )));
        }
        Ok(schedule)
    }
}

/// The trained source classifier together with the data it came from.
#[derive(Clone, Debug)]
pub struct SourceModel {
    pub config: SourceConfig,
    pub dataset: SyntheticDataset,
    pub model: Classifier,
    pub pretrain: Option<PretrainReport>,
}

/// Generates the dataset and trains the source classifier.
pub fn prepare_source(cfg: &SourceConfig) -> Result<SourceModel> {
    cfg.validate()?;
    let dataset = generate_source(&cfg.dataset, cfg.seed)?;
    let mut model = Classifier::new(cfg.model, derive_seed(cfg.seed, 3));
    let report = pretrain_source(&mut model, &dataset.train, Some(&dataset.stream), &cfg.pretrain)?;
    Ok(SourceModel {
        config: cfg.clone(),
        dataset,
        model,
        pretrain: Some(report),
    })
}

/// Regenerates the dataset and takes the classifier from an archive.
pub fn load_source(cfg: &SourceConfig, archive_path: &Path) -> Result<SourceModel> {
    cfg.validate()?;
    let model = archive::load(archive_path)?;
    if *model.config() != cfg.model {
        return Err(Error::Config(format!(
            "{} holds a model with {:?}, config expects {:?}",
            archive_path.display(),
            model.config(),
            cfg.model
        )));
    }
    Ok(SourceModel {
        config: cfg.clone(),
        dataset: generate_source(&cfg.dataset, cfg.seed)?,
        model,
        pretrain: None,
    })
}

/// What the adapter reports for one batch. Contains no label information.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome {
    pub predictions: Vec<usize>,
    /// Loss values of the first step, before this batch's update.
    pub mcl: f64,
    pub eml: f64,
    pub total: f64,
}

/// Online M2A adapter. Owns its model exclusively for the whole episode.
pub struct Adapter {
    model: Classifier,
    opt: AdamState,
    schedule: MaskSchedule,
    policy: MaskPolicy,
    loss_mode: LossMode,
    orientation: Orientation,
    prediction: PredictionView,
    steps: usize,
    update: bool,
    rng: ChaCha8Rng,
}

impl Adapter {
    pub fn new(source: &Classifier, cfg: &ExperimentConfig) -> Result<Self> {
        let schedule = cfg.validate()?;
        let model = source.clone();
        let opt = AdamState::new(
            &model,
            Trainable::Adaptable,
            AdamConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            },
        );
        Ok(Adapter {
            model,
            opt,
            schedule,
            policy: cfg.policy(),
            loss_mode: cfg.loss_mode,
            orientation: cfg.orientation,
            prediction: cfg.prediction,
            steps: cfg.steps_per_batch,
            update: cfg.method.adapts(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, MASK_TAG)),
        })
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }

    pub fn into_model(self) -> Classifier {
        self.model
    }

    /// Predict-then-adapt on one unlabeled batch.
    pub fn observe(&mut self, batch: &StreamBatch) -> Result<BatchOutcome> {
        let mut outcome = None;
        for _ in 0..self.steps.max(1) {
            let step = self.step(&batch.images)?;
            outcome.get_or_insert(step);
        }
        Ok(outcome.expect("at least one step"))
    }

    fn step(&mut self, images: &ImageTensor) -> Result<BatchOutcome> {
        let views = make_views(images, &self.schedule, &self.policy, &mut self.rng)?;
        let rows = images.batch();
        let stacked = ImageTensor::concat(&views.views.iter().collect::<Vec<_>>())?;
        let trainable = if self.update {
            Trainable::Adaptable
        } else {
            Trainable::None
        };
        let mut tape = Tape::new();
        let (bound, logits) = self.model.forward(&mut tape, &stacked, trainable)?;
        let probs = tape.softmax(logits)?;
        let per_view = (0..self.schedule.n())
            .map(|t| tape.rows(probs, t * rows, (t + 1) * rows))
            .collect::<Result<Vec<_>>>()?;
        let predictions = match self.prediction {
            PredictionView::Anchor => argmax_rows(tape.value(per_view[0])),
            PredictionView::MeanOfViews => {
                let k = tape.value(probs).last_dim();
                let mut mean = vec![0.0; rows * k];
                for &v in &per_view {
                    for (m, p) in mean.iter_mut().zip(tape.value(v).data()) {
                        *m += p;
                    }
                }
                argmax_rows(&Tensor::new(vec![rows, k], mean)?)
            }
        };
        let preds = ViewPredictions::new(&tape, per_view)?;
        let terms = total_loss(&mut tape, &preds, self.loss_mode, self.orientation)?;
        let outcome = BatchOutcome {
            predictions,
            mcl: tape.value(terms.mcl).item(),
            eml: tape.value(terms.eml).item(),
            total: tape.value(terms.total).item(),
        };
        if self.update {
            let grads = tape.backward(terms.total)?;
            let pairs: Vec<_> = bound.leaves().map(|(i, v)| (i, grads.wrt(v))).collect();
            self.opt.step(&mut self.model, &pairs)?;
        }
        Ok(outcome)
    }
}

/// SHA-256 over the adaptable parameters only; frozen ones never move.
pub fn adaptable_digest(model: &Classifier) -> String {
    let mut h = Sha256::new();
    for p in model.params().iter().filter(|p| p.role == ParamRole::Adaptable) {
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One row of the per-batch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub domain: usize,
    pub index: usize,
    pub size: usize,
    pub errors: usize,
    pub mcl: f64,
    pub eml: f64,
    pub total: f64,
    /// Adaptable-parameter digest after this batch's update.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub method: Method,
    pub seed: u64,
    /// Domain names in stream order.
    pub domains: Vec<String>,
    /// Online error per domain, in percent.
    pub domain_error: Vec<f64>,
    pub mean_error: f64,
    /// Mean error of the source-frozen arm on the same stream.
    pub source_mean_error: f64,
    /// `source_mean_error - mean_error`, in percentage points.
    pub gain: f64,
    /// Running mean of the per-batch MCL / EML within each domain.
    pub domain_mcl: Vec<f64>,
    pub domain_eml: Vec<f64>,
    /// Full parameter digest at the end of the episode.
    pub final_digest: String,
    /// Kept out of exported files so that reports stay reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
    pub config: ExperimentConfig,
}

/// A report together with its per-batch log.
#[derive(Clone, Debug)]
pub struct EpisodeTrace {
    pub report: EpisodeReport,
    pub batches: Vec<BatchLog>,
}

/// Which labels the evaluator scores against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Labels {
    Real,
    /// Every label replaced by this value.
    Sentinel(usize),
}

impl Labels {
    fn apply(self, ledger: LabelLedger) -> LabelLedger {
        match self {
            Labels::Real => ledger,
            Labels::Sentinel(s) => ledger.with_sentinel(s),
        }
    }
}

fn percent(errors: usize, total: usize) -> f64 {
    100.0 * errors as f64 / total.max(1) as f64
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Per-domain online error of the unchanged source model on the stream of
/// `cfg`.
pub fn evaluate_frozen(cfg: &ExperimentConfig, source: &SourceModel) -> Result<Vec<f64>> {
    frozen_errors(cfg, source, Labels::Real)
}

fn frozen_errors(cfg: &ExperimentConfig, source: &SourceModel, labels: Labels) -> Result<Vec<f64>> {
    let (stream, ledger) = build_stream(
        &source.dataset.stream,
        &cfg.stream,
        cfg.batch,
        derive_seed(cfg.seed, STREAM_TAG),
    )?;
    let ledger = labels.apply(ledger);
    let mut errors = vec![0usize; stream.domains().len()];
    let mut counts = vec![0usize; stream.domains().len()];
    for batch in stream.batches() {
        let batch = batch?;
        let pred = source.model.predict(&batch.images)?;
        errors[batch.domain] += ledger.errors(batch.domain, batch.index, &pred);
        counts[batch.domain] += pred.len();
    }
    Ok(errors.iter().zip(&counts).map(|(e, c)| percent(*e, *c)).collect())
}

pub fn run_episode(cfg: &ExperimentConfig, source: &SourceModel) -> Result<EpisodeReport> {
    Ok(trace_episode(cfg, source, Labels::Real)?.report)
}

/// Runs one continual episode and keeps the per-batch log.
pub fn trace_episode(cfg: &ExperimentConfig, source: &SourceModel, labels: Labels) -> Result<EpisodeTrace> {
    let started = Instant::now();
    if source.config.model != cfg.source.model || source.config.dataset != cfg.source.dataset {
        return Err(Error::Config("source model was prepared for a different source config".into()));
    }
    let mut adapter = Adapter::new(&source.model, cfg)?;
    let (stream, ledger) = build_stream(
        &source.dataset.stream,
        &cfg.stream,
        cfg.batch,
        derive_seed(cfg.seed, STREAM_TAG),
    )?;
    let ledger = labels.apply(ledger);
    let domains = stream.domains().len();
    let mut errors = vec![0usize; domains];
    let mut counts = vec![0usize; domains];
    let mut mcl_sum = vec![0.0; domains];
    let mut eml_sum = vec![0.0; domains];
    let mut batches = vec![0usize; domains];
    let mut log = Vec::with_capacity(stream.total_batches());
    for batch in stream.batches() {
        let batch = batch?;
        let out = adapter.observe(&batch)?;
        let wrong = ledger.errors(batch.domain, batch.index, &out.predictions);
        let d = batch.domain;
        errors[d] += wrong;
        counts[d] += out.predictions.len();
        mcl_sum[d] += out.mcl;
        eml_sum[d] += out.eml;
        batches[d] += 1;
        log.push(BatchLog {
            domain: d,
            index: batch.index,
            size: out.predictions.len(),
            errors: wrong,
            mcl: out.mcl,
            eml: out.eml,
            total: out.total,
            digest: adaptable_digest(adapter.model()),
        });
    }
    let domain_error: Vec<f64> = errors.iter().zip(&counts).map(|(e, c)| percent(*e, *c)).collect();
    let mean_error = mean(&domain_error);
    let source_errors = if cfg.method.adapts() {
        frozen_errors(cfg, source, labels)?
    } else {
        domain_error.clone()
    };
    let source_mean_error = mean(&source_errors);
    let report = EpisodeReport {
        method: cfg.method,
        seed: cfg.seed,
        domains: stream.domains().iter().map(|op| op.kind.name().to_string()).collect(),
        domain_error,
        mean_error,
        source_mean_error,
        gain: source_mean_error - mean_error,
        domain_mcl: mcl_sum.iter().zip(&batches).map(|(s, b)| s / (*b).max(1) as f64).collect(),
        domain_eml: eml_sum.iter().zip(&batches).map(|(s, b)| s / (*b).max(1) as f64).collect(),
        final_digest: adapter.model().digest(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    Ok(EpisodeTrace { report, batches: log })
}

/// Axes of an ablation grid. An empty axis keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub method: Vec<Method>,
    pub loss_mode: Vec<LossMode>,
    pub n: Vec<usize>,
    pub alpha: Vec<f64>,
    pub lr: Vec<f64>,
    pub steps_per_batch: Vec<usize>,
    pub batch: Vec<usize>,
    pub seed: Vec<u64>,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl SweepGrid {
    /// Every grid point, with the last-listed axis (seed) varying fastest.
    pub fn expand(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let mut out = vec![base.clone()];
        macro_rules! cross {
            ($field:ident) => {
                out = out
                    .into_iter()
                    .flat_map(|c| {
                        axis(&self.$field, c.$field.clone()).into_iter().map(move |v| {
                            let mut c = c.clone();
                            c.$field = v;
                            c
                        })
                    })
                    .collect();
            };
        }
        cross!(method);
        cross!(loss_mode);
        cross!(n);
        cross!(alpha);
        cross!(lr);
        cross!(steps_per_batch);
        cross!(batch);
        cross!(seed);
        out
    }
}

/// One grid point's result. Failed arms keep their config and message.
#[derive(Clone, Debug)]
pub struct SweepArm {
    pub config: ExperimentConfig,
    pub outcome: std::result::Result<EpisodeReport, String>,
}

/// Runs every grid point from a fresh copy of the source model. Arms execute
/// in parallel; results come back in grid order.
pub fn run_sweep(base: &ExperimentConfig, grid: &SweepGrid, source: &SourceModel) -> Vec<SweepArm> {
    grid.expand(base)
        .into_par_iter()
        .map(|config| {
            let outcome = run_episode(&config, source).map_err(|e| e.to_string());
            SweepArm { config, outcome }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportFormat {
    Csv,
    JsonLines,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::JsonLines => "jsonl",
        }
    }
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json-lines" | "jsonl" => Ok(ExportFormat::JsonLines),
            _ => Err(Error::Unknown {
                what: "export format",
                name: s.into(),
            }),
        }
    }
}

/// Domain names shared by every report, or the default order when there are
/// no reports.
fn shared_domains(reports: &[EpisodeReport]) -> Result<Vec<String>> {
    let Some(first) = reports.first() else {
        return Ok(StreamSpec::default().order.iter().map(|k| k.name().to_string()).collect());
    };
    if let Some(other) = reports.iter().find(|r| r.domains != first.domains) {
        return Err(Error::Config(format!(
            "reports disagree on domain order: {:?} vs {:?}",
            first.domains, other.domains
        )));
    }
    Ok(first.domains.clone())
}

/// Column names: identity, per-domain errors in stream order, mean, gain,
/// per-domain MCL then EML traces, digest and the config echo.
pub fn csv_header(domains: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["method", "loss_mode", "n", "alpha", "lr", "steps_per_batch", "batch", "seed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(domains.iter().map(|d| format!("err:{d}")));
    h.extend(["mean_error", "source_mean_error", "gain"].map(String::from));
    h.extend(domains.iter().map(|d| format!("mcl:{d}")));
    h.extend(domains.iter().map(|d| format!("eml:{d}")));
    h.extend(["final_digest", "config"].map(String::from));
    h
}

fn csv_row(r: &EpisodeReport) -> Vec<String> {
    let c = &r.config;
    let mut row = vec![
        r.method.name().to_string(),
        c.loss_mode.to_string(),
        c.n.to_string(),
        c.alpha.to_string(),
        c.lr.to_string(),
        c.steps_per_batch.to_string(),
        c.batch.to_string(),
        r.seed.to_string(),
    ];
    row.extend(r.domain_error.iter().map(f64::to_string));
    row.extend([r.mean_error, r.source_mean_error, r.gain].map(|v| v.to_string()));
    row.extend(r.domain_mcl.iter().map(f64::to_string));
    row.extend(r.domain_eml.iter().map(f64::to_string));
    row.push(r.final_digest.clone());
    row.push(serde_json::to_string(&r.config).expect("config serializes"));
    row
}

/// Renders reports in the given format. Floats use the shortest
/// representation that parses back to the same value.
pub fn render_reports(reports: &[EpisodeReport], format: ExportFormat) -> Result<Vec<u8>> {
    match format {
        ExportFormat::Csv => {
            let domains = shared_domains(reports)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Config(e.to_string());
            w.write_record(csv_header(&domains)).map_err(csv_err)?;
            for r in reports {
                w.write_record(csv_row(r)).map_err(csv_err)?;
            }
            w.into_inner().map_err(|e| Error::Config(e.to_string()))
        }
        ExportFormat::JsonLines => {
            let mut out = Vec::new();
            for r in reports {
                serde_json::to_writer(&mut out, r).map_err(|e| Error::Config(e.to_string()))?;
                out.push(b'\n');
            }
            Ok(out)
        }
    }
}

/// Writes `<stem>.<ext>` into `dir`, creating the directory if needed.
pub fn export_report(reports: &[EpisodeReport], format: ExportFormat, dir: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{stem}.{}", format.extension()));
    let bytes = render_reports(reports, format)?;
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn parse_f64(s: &str, column: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Config(format!("column {column}: `{s}` is not a number")))
}

/// Parses a file produced by [`render_reports`].
pub fn parse_reports(bytes: &[u8], format: ExportFormat) -> Result<Vec<EpisodeReport>> {
    match format {
        ExportFormat::JsonLines => std::str::from_utf8(bytes)
            .map_err(|_| Error::Config("report is not utf-8".into()))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(e.to_string())))
            .collect(),
        ExportFormat::Csv => {
            let mut r = csv::Reader::from_reader(bytes);
            let header: Vec<String> = r
                .headers()
                .map_err(|e| Error::Config(e.to_string()))?
                .iter()
                .map(String::from)
                .collect();
            let domains: Vec<String> = header
                .iter()
                .filter_map(|h| h.strip_prefix("err:").map(String::from))
                .collect();
            if header != csv_header(&domains) {
                return Err(Error::Config("unexpected CSV header".into()));
            }
            let d = domains.len();
            let mut out = Vec::new();
            for rec in r.records() {
                let rec = rec.map_err(|e| Error::Config(e.to_string()))?;
                let col = |i: usize| rec.get(i).unwrap_or("");
                let nums = |start: usize| -> Result<Vec<f64>> {
                    (start..start + d).map(|i| parse_f64(col(i), &header[i])).collect()
                };
                let config: ExperimentConfig =
                    serde_json::from_str(col(header.len() - 1)).map_err(|e| Error::Config(e.to_string()))?;
                out.push(EpisodeReport {
                    method: col(0).parse()?,
                    seed: col(7)
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed `{}`", col(7))))?,
                    domains: domains.clone(),
                    domain_error: nums(8)?,
                    mean_error: parse_f64(col(8 + d), "mean_error")?,
                    source_mean_error: parse_f64(col(9 + d), "source_mean_error")?,
                    gain: parse_f64(col(10 + d), "gain")?,
                    domain_mcl: nums(11 + d)?,
                    domain_eml: nums(11 + 2 * d)?,
                    final_digest: col(11 + 3 * d).to_string(),
                    wall_clock_secs: 0.0,
                    config,
                });
            }
            Ok(out)
        }
    }
}
