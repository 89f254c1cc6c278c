//! Subcommand implementations for the `vccgm` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vccgm::eval::{evaluate, EvalConfig, EvalReport, GeneratorSampler, OracleRegressor};
use vccgm::losses::LossWeights;
use vccgm::models::{train_surrogate_regressor, LabelRegressor, SurrogateConfig};
use vccgm::synth::{self, Combine, Family, ImbalanceSpec, Pattern};
use vccgm::trainer::{train, TrainConfig, TrainedModel};
use vccgm::{Dataset, DecayExponent, LabelScale, VicinityMode, VicinityRule};

/// Exit status for bad invocations or configuration.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for unreadable or unsuitable data.
pub const EXIT_DATA: i32 = 3;
/// Exit status when training hits non-finite values.
pub const EXIT_NUMERICAL: i32 = 4;

/// Error raised for problems with the invocation rather than the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Maps an error chain to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<vccgm::Error>() {
            return match e {
                vccgm::Error::Numerical(_) => EXIT_NUMERICAL,
                vccgm::Error::InvalidParameter(_)
                | vccgm::Error::InvalidMode(_)
                | vccgm::Error::InvalidSpec(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

#[derive(Debug, Parser)]
#[command(name = "vccgm", version, about = "Adaptive-vicinity conditional GAN toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an imbalanced toy dataset and its label histogram.
    SynthData(SynthArgs),
    /// Tabulate vicinity radii over a grid of centers.
    InspectVicinity(InspectArgs),
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Evaluate a generator checkpoint against a dataset.
    Eval(EvalArgs),
    /// Summarize evaluation reports from several run directories.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PatternArg {
    Unimodal,
    Bimodal,
    Trimodal,
}

impl From<PatternArg> for Pattern {
    fn from(p: PatternArg) -> Self {
        match p {
            PatternArg::Unimodal => Pattern::Unimodal,
            PatternArg::Bimodal => Pattern::Bimodal,
            PatternArg::Trimodal => Pattern::Trimodal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Circle,
    Line,
    Helix,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Circle => Family::default(),
            FamilyArg::Line => Family::Line {
                intercept: 0.0,
                slope: 1.0,
                base_std: 0.05,
                std_slope: 0.05,
            },
            FamilyArg::Helix => Family::Helix {
                base_std: 0.05,
                std_slope: 0.05,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CombineArg {
    Max,
    Sum,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "unimodal")]
    pub pattern: PatternArg,
    /// Mode positions in raw units (default: pattern fractions of the raw range).
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.1)]
    pub decay: f64,
    #[arg(long, default_value_t = 49)]
    pub peak: usize,
    #[arg(long = "noise-std", default_value_t = 5.0)]
    pub noise_std: f64,
    #[arg(long, value_enum, default_value = "max")]
    pub combine: CombineArg,
    #[arg(long, value_enum, default_value = "circle")]
    pub family: FamilyArg,
    /// Number of distinct labels, evenly spaced over [label-min, label-max].
    #[arg(long = "n-labels", default_value_t = 99)]
    pub n_labels: usize,
    #[arg(long = "label-min", default_value_t = 1.0)]
    pub label_min: f64,
    #[arg(long = "label-max", default_value_t = 99.0)]
    pub label_max: f64,
    #[arg(long = "raw-min", default_value_t = 0.0)]
    pub raw_min: f64,
    #[arg(long = "raw-max", default_value_t = 100.0)]
    pub raw_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "bin")]
    pub format: FormatArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Bin,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Hard,
    Soft,
    SoftAv,
    HybridAv,
}

impl From<ModeArg> for VicinityMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Hard => VicinityMode::Hard,
            ModeArg::Soft => VicinityMode::Soft,
            ModeArg::SoftAv => VicinityMode::SoftAv,
            ModeArg::HybridAv => VicinityMode::HybridAv,
        }
    }
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated minimum effective sample counts.
    #[arg(long = "n-av", value_delimiter = ',', required = true)]
    pub n_av: Vec<usize>,
    #[arg(long, default_value_t = 101)]
    pub centers: usize,
    #[arg(long = "decay-exponent", default_value_t = 2)]
    pub decay_exponent: u8,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    /// Baseline, +AV, +AV+Reg, +AV+Reg+DRE for the configured vicinity type.
    Table3,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON document with `TrainConfig` fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset (`.bin` or `.csv`).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory; with `--ablation`, the parent of one directory per configuration.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long = "learning-rate")]
    pub learning_rate: Option<f64>,
    #[arg(long = "vicinity-mode", value_enum)]
    pub vicinity_mode: Option<ModeArg>,
    #[arg(long = "n-av")]
    pub n_av: Option<usize>,
    #[arg(long = "checkpoint-every")]
    pub checkpoint_every: Option<usize>,
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegressorArg {
    /// Small MLP fitted to the evaluation data.
    Surrogate,
    /// Posterior mean under a known toy family.
    Oracle,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generator checkpoint, usually `final_ema.bin`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Real data the generator is compared against.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 101)]
    pub centers: usize,
    #[arg(long = "n-fake", default_value_t = 1000)]
    pub n_fake: usize,
    #[arg(long = "window-radius")]
    pub window_radius: Option<f64>,
    #[arg(long, value_enum, default_value = "surrogate")]
    pub regressor: RegressorArg,
    /// Family for the oracle regressor.
    #[arg(long, value_enum, default_value = "circle")]
    pub family: FamilyArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation output directories, each holding a `report.csv`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Written as `manifest.json` into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the compact JSON of the configuration actually used.
    pub config_digest: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub versions: Versions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub vccgm: String,
    pub dataset_format: u32,
    pub checkpoint_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            vccgm: env!("CARGO_PKG_VERSION").to_string(),
            dataset_format: vccgm::dataset::DATASET_VERSION,
            checkpoint_format: vccgm::params::CHECKPOINT_VERSION,
        }
    }
}

pub fn digest(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values serialize");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

struct ManifestBuilder {
    command: &'static str,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<String>,
    started: u64,
}

impl ManifestBuilder {
    fn new(command: &'static str, config: serde_json::Value, seed: u64, inputs: &[&Path]) -> Self {
        Self {
            command,
            config,
            seed,
            inputs: inputs.iter().map(|p| display(p)).collect(),
            started: now(),
        }
    }

    fn finish(self, dir: &Path, outputs: &[&Path]) -> Result<()> {
        let m = RunManifest {
            command: self.command.to_string(),
            config_digest: digest(&self.config),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| display(p)).collect(),
            started_unix: self.started,
            finished_unix: now(),
            versions: Versions::default(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Applies `VCCGM_THREADS` (0 = single-threaded) to the global worker pool.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("VCCGM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| usage(format!("VCCGM_THREADS must be an integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| usage(format!("thread pool: {e}")))?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(&a),
        Command::InspectVicinity(a) => inspect_vicinity(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Report(a) => report_cmd(&a),
    }
}

/// Evenly spaced raw labels over `[lo, hi]`.
fn raw_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

pub fn synth_data(a: &SynthArgs) -> Result<()> {
    if a.n_labels < 2 {
        return Err(usage("--n-labels must be at least 2"));
    }
    if !(a.label_min < a.label_max) {
        return Err(usage("--label-min must be below --label-max"));
    }
    let scale = LabelScale::new(a.raw_min, a.raw_max)?;
    let raw = raw_grid(a.n_labels, a.label_min, a.label_max);
    let pattern: Pattern = a.pattern.into();
    let mut spec = ImbalanceSpec::with_default_modes(pattern, &raw, a.raw_min, a.raw_max)?;
    if let Some(m) = &a.modes {
        spec.modes = m.clone();
    }
    spec.decay_rate = a.decay;
    spec.peak_count = a.peak;
    spec.noise_std = a.noise_std;
    spec.combine = match a.combine {
        CombineArg::Max => Combine::Max,
        CombineArg::Sum => Combine::Sum,
    };
    let family: Family = a.family.into();
    let config = serde_json::json!({
        "spec": spec,
        "family": family,
        "n_labels": a.n_labels,
        "label_min": a.label_min,
        "label_max": a.label_max,
        "format": format!("{:?}", a.format).to_lowercase(),
        "raw_min": a.raw_min,
        "raw_max": a.raw_max,
        "seed": a.seed,
    });
    let manifest = ManifestBuilder::new("synth-data", config, a.seed, &[]);

    let normalized = raw
        .iter()
        .map(|&y| scale.normalize(y))
        .collect::<vccgm::Result<Vec<_>>>()?;
    let counts = synth::imbalance_counts(&raw, &spec, a.seed.wrapping_add(1))?;
    let pool = synth::make_toy_dataset_at(&normalized, a.peak, family, scale, a.seed)?;
    let data = synth::subsample(&pool.data, &counts, a.seed.wrapping_add(2))?;
    if data.is_empty() {
        bail!(vccgm::Error::EmptyDataset);
    }

    fs::create_dir_all(&a.out)?;
    let path = match a.format {
        FormatArg::Bin => {
            let p = a.out.join("data.bin");
            data.write_binary(&p)?;
            p
        }
        FormatArg::Csv => {
            let p = a.out.join("data.csv");
            data.write_csv(&p)?;
            p
        }
    };
    let hist = a.out.join("label_histogram.csv");
    data.write_histogram_csv(&hist)?;
    manifest.finish(&a.out, &[&path, &hist])?;
    Ok(())
}

pub fn inspect_vicinity(a: &InspectArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let index = data.index()?;
    let exponent = match a.decay_exponent {
        1 => DecayExponent::Linear,
        2 => DecayExponent::Quadratic,
        other => return Err(usage(format!("--decay-exponent must be 1 or 2, got {other}"))),
    };
    let centers = vccgm::eval::default_centers(a.centers);
    let config = serde_json::json!({
        "n_av": a.n_av,
        "centers": a.centers,
        "decay_exponent": a.decay_exponent,
    });
    let manifest = ManifestBuilder::new("inspect-vicinity", config, 0, &[&a.data]);
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("vicinity.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["y_c", "n_av", "kappa_l", "kappa_r", "kappa", "nu", "n_c"])?;
    for &n_av in &a.n_av {
        let rule = VicinityRule {
            mode: VicinityMode::SoftAv,
            kappa_base: 0.0,
            n_av,
            exponent,
            threshold: vccgm::vicinity::DEFAULT_WEIGHT_THRESHOLD,
        };
        for &y_c in &centers {
            let p = rule.params_for(&index, y_c)?;
            w.write_record([
                y_c.to_string(),
                n_av.to_string(),
                p.kappa_left.to_string(),
                p.kappa_right.to_string(),
                p.kappa.to_string(),
                p.nu.to_string(),
                p.n_c.to_string(),
            ])?;
        }
    }
    w.flush()?;
    manifest.finish(&a.out, &[&path])?;
    Ok(())
}

/// Reads the JSON config (if any) and applies flag overrides.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.vicinity_mode {
        cfg.vicinity_mode = v.into();
    }
    if let Some(v) = a.n_av {
        cfg.n_av = Some(v);
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.validate().map_err(|e| usage(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

/// The four component-wise configurations for `base`'s vicinity type:
/// fixed soft vicinity, adaptive only, adaptive + regression, and
/// adaptive + regression + density ratio.
pub fn table3_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let av_mode = match base.vicinity_mode {
        VicinityMode::HybridAv | VicinityMode::Hard => VicinityMode::HybridAv,
        VicinityMode::Soft | VicinityMode::SoftAv => VicinityMode::SoftAv,
    };
    let none = LossWeights::adversarial_only();
    let reg = LossWeights {
        lambda_reg_d: base.loss_weights.lambda_reg_d,
        lambda_reg_g: base.loss_weights.lambda_reg_g,
        ..none
    };
    let full = base.loss_weights;
    let with = |mode, w| TrainConfig {
        vicinity_mode: mode,
        loss_weights: w,
        ..base.clone()
    };
    vec![
        ("baseline", with(VicinityMode::Soft, none)),
        ("av", with(av_mode, none)),
        ("av_reg", with(av_mode, reg)),
        ("av_reg_dre", with(av_mode, full)),
    ]
}

fn train_one(cfg: &TrainConfig, data: &Dataset, data_path: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let config = serde_json::to_value(cfg)?;
    let manifest = ManifestBuilder::new("train", config.clone(), cfg.seed, &[data_path]);
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&config)? + "\n")?;
    let outcome = train(cfg, data, Some(out))?;
    let mut outputs = vec![out.join("config.json"), out.join("training_log.csv")];
    if cfg.checkpoint_every > 0 {
        let mut s = cfg.checkpoint_every;
        while s <= cfg.steps {
            outputs.push(out.join(format!("checkpoint_{s}.bin")));
            s += cfg.checkpoint_every;
        }
    }
    outputs.extend(outcome.final_checkpoint);
    let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    manifest.finish(out, &refs)?;
    Ok(())
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(a)?;
    let data = load_dataset(&a.data)?;
    match a.ablation {
        None => train_one(&cfg, &data, &a.data, &a.out),
        Some(AblationArg::Table3) => {
            for (name, c) in table3_configs(&cfg) {
                train_one(&c, &data, &a.data, &a.out.join(name))?;
            }
            Ok(())
        }
    }
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    if a.n_fake < 2 {
        return Err(usage("--n-fake must be at least 2"));
    }
    let model = TrainedModel::load(&a.ckpt)
        .with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let data = load_dataset(&a.data)?;
    let ecfg = EvalConfig {
        centers: a.centers,
        window_radius: a.window_radius,
        n_fake_per_center: a.n_fake,
        seed: a.seed,
        ..EvalConfig::default()
    };
    let surrogate_cfg = SurrogateConfig {
        seed: a.seed,
        ..SurrogateConfig::default()
    };
    let config = serde_json::json!({
        "eval": ecfg,
        "regressor": format!("{:?}", a.regressor).to_lowercase(),
        "family": Family::from(a.family),
        "surrogate": surrogate_cfg,
    });
    let manifest = ManifestBuilder::new("eval", config, a.seed, &[&a.ckpt, &a.data]);
    let mut surrogate_note = None;
    let regressor: Box<dyn LabelRegressor> = match a.regressor {
        RegressorArg::Oracle => Box::new(OracleRegressor::new(Family::from(a.family), 1001)),
        RegressorArg::Surrogate => {
            let (r, rep) = train_surrogate_regressor(&data, &surrogate_cfg)?;
            if !rep.reached_target {
                eprintln!(
                    "warning: surrogate regressor validation MAE {:.4} above target {}",
                    rep.validation_mae, surrogate_cfg.target_mae
                );
            }
            surrogate_note = Some(rep);
            Box::new(r)
        }
    };
    let report = evaluate(&GeneratorSampler(&model.generator), &data, regressor.as_ref(), &ecfg)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("report.csv");
    report.write_csv(&path)?;
    let summary = a.out.join("eval_summary.json");
    let s = serde_json::json!({
        "mean_fd": report.mean_fd,
        "mean_label_score": report.mean_label_score,
        "mean_diversity": report.mean_diversity,
        "skipped_centers": report.skipped_centers,
        "window_radius": report.window_radius,
        "n_fake_per_center": report.n_fake_per_center,
        "checkpoint_step": model.step,
        "surrogate": surrogate_note,
    });
    fs::write(&summary, serde_json::to_string_pretty(&s)? + "\n")?;
    manifest.finish(&a.out, &[&path, &summary])?;
    Ok(())
}

/// Aggregates of one run's `report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub mean_fd: f64,
    pub mean_label_score: f64,
    pub mean_diversity: f64,
    pub centers: usize,
    pub skipped: usize,
}

fn summarize(run: &str, rows: &[vccgm::eval::CenterMetrics]) -> RunSummary {
    let fds: Vec<f64> = rows.iter().filter_map(|r| r.fd).collect();
    let n = rows.len().max(1) as f64;
    RunSummary {
        run: run.to_string(),
        mean_fd: if fds.is_empty() {
            f64::NAN
        } else {
            fds.iter().sum::<f64>() / fds.len() as f64
        },
        mean_label_score: rows.iter().map(|r| r.label_score).sum::<f64>() / n,
        mean_diversity: rows.iter().map(|r| r.diversity).sum::<f64>() / n,
        centers: rows.len(),
        skipped: rows.len() - fds.len(),
    }
}

/// Display name of an evaluation directory; `<run>/eval` is named after `<run>`.
fn run_name(p: &Path) -> String {
    let name = |q: &Path| q.file_name().map(|s| s.to_string_lossy().into_owned());
    match name(p) {
        Some(n) if n == "eval" => p.parent().and_then(name).unwrap_or(n),
        Some(n) => n,
        None => display(p),
    }
}

pub fn report_cmd(a: &ReportArgs) -> Result<()> {
    let mut summaries = Vec::new();
    let mut curves = Vec::new();
    let mut absent = Vec::new();
    for dir in &a.runs {
        let name = run_name(dir);
        let path = dir.join("report.csv");
        if !path.exists() {
            absent.push(name);
            continue;
        }
        let rows = EvalReport::read_csv(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        for r in &rows {
            curves.push((name.clone(), r.clone()));
        }
        summaries.push(summarize(&name, &rows));
    }
    summaries.sort_by(|x, y| x.mean_fd.total_cmp(&y.mean_fd).then_with(|| x.run.cmp(&y.run)));

    let inputs: Vec<&Path> = a.runs.iter().map(|p| p.as_path()).collect();
    let config = serde_json::json!({ "runs": a.runs.iter().map(|p| display(p)).collect::<Vec<_>>() });
    let manifest = ManifestBuilder::new("report", config, 0, &inputs);
    fs::create_dir_all(&a.out)?;

    let mut md = String::from(
        "| run | mean fd | mean label score | mean diversity | centers | skipped |\n|---|---|---|---|---|---|\n",
    );
    for s in &summaries {
        md.push_str(&format!(
            "| {} | {:.6} | {:.6} | {:.6} | {} | {} |\n",
            s.run, s.mean_fd, s.mean_label_score, s.mean_diversity, s.centers, s.skipped
        ));
    }
    if !absent.is_empty() {
        md.push_str(&format!("\nRuns without a report: {}\n", absent.join(", ")));
    }
    let md_path = a.out.join("summary.md");
    fs::write(&md_path, md)?;

    let csv_path = a.out.join("summary.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["run", "mean_fd", "mean_label_score", "mean_diversity", "centers", "skipped"])?;
    for s in &summaries {
        w.write_record([
            s.run.clone(),
            s.mean_fd.to_string(),
            s.mean_label_score.to_string(),
            s.mean_diversity.to_string(),
            s.centers.to_string(),
            s.skipped.to_string(),
        ])?;
    }
    w.flush()?;

    let curves_path = a.out.join("curves.csv");
    let mut w = csv::Writer::from_path(&curves_path)?;
    w.write_record(["run", "center", "fd", "label_score", "diversity"])?;
    for (run, r) in &curves {
        w.write_record([
            run.clone(),
            r.center.to_string(),
            r.fd.map(|v| v.to_string()).unwrap_or_default(),
            r.label_score.to_string(),
            r.diversity.to_string(),
        ])?;
    }
    w.flush()?;
    manifest.finish(&a.out, &[&md_path, &csv_path, &curves_path])?;
    Ok(())
}
