//! `sslab` subcommands. Every randomized step draws from `--seed`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sslab::calibration::{
    estimate_ps_ratio, solve_local_resolution, sweep_scales, CalibrationError, CalibrationReport, Estimator,
    SolveRequest, SweepRow,
};
use sslab::config::{ConfigError, TrainConfig};
use sslab::datapipe::{gen_shapes_dataset, load_raw_dataset, save_raw_dataset, DataError, ShapeClass};
use sslab::evalprobe::{
    checkpoint_meta, extract_features, knn_eval, linear_probe, load_encoder, split_holdout, EvalError, ExtractConfig,
    FeatureMatrix, ProbeConfig,
};
use sslab::model::EncoderConfig;
use sslab::seed;
use sslab::trainer::{TrainError, Trainer};
use sslab::viewgeom::ViewSetSpec;
use thiserror::Error;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG_READ: i32 = 3;
pub const EXIT_SCHEMA: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config: {0}")]
    ConfigRead(String),
    #[error("invalid configuration: {0}")]
    Schema(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigRead(_) => EXIT_CONFIG_READ,
            CliError::Schema(_) => EXIT_SCHEMA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Read { .. } | ConfigError::Syntax(_) => CliError::ConfigRead(e.to_string()),
            ConfigError::Schema(_) => CliError::Schema(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(CalibrationError, DataError, EvalError, std::io::Error, serde_json::Error);

#[derive(Debug, Parser)]
#[command(name = "sslab", version, about = "Multi-crop self-supervised learning at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural shapes dataset to a raw file.
    GenData(GenData),
    /// Solve the local resolution that balances pixel scales.
    Calibrate(Calibrate),
    /// Monte-Carlo pixel-scale ratio of one view geometry.
    Stats(Stats),
    /// Pixel-scale ratio over a grid of scale ranges and local resolutions.
    Sweep(Sweep),
    /// Self-supervised training from a TOML config.
    Train(Train),
    /// Linear probe on frozen features.
    Probe(Probe),
    /// Cosine k-NN on frozen features.
    Knn(Knn),
    /// Write frozen features as CSV.
    Export(Export),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EstimatorArg {
    MeanOfRatios,
    RatioOfMeans,
    GeometricMean,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::MeanOfRatios => Estimator::MeanOfRatios,
            EstimatorArg::RatioOfMeans => Estimator::RatioOfMeans,
            EstimatorArg::GeometricMean => Estimator::GeometricMean,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Number of classes, taken in the order disk, square, triangle, stripes, checker.
    #[arg(long, default_value_t = 3, conflicts_with = "class_names")]
    pub classes: usize,
    /// Explicit comma-separated class names.
    #[arg(long, value_delimiter = ',')]
    pub class_names: Vec<String>,
    #[arg(long, default_value_t = 500)]
    pub per_class: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
}

/// View geometry shared by the calibration commands.
#[derive(Debug, Args)]
pub struct Geometry {
    /// Global crops draw area fractions from [sg, 1].
    #[arg(long, default_value_t = 0.3)]
    pub sg: f64,
    /// Local crops draw area fractions from [s-min-local, sl].
    #[arg(long, default_value_t = 0.3)]
    pub sl: f64,
    #[arg(long, default_value_t = 0.05)]
    pub s_min_local: f64,
    /// Global view resolution.
    #[arg(long, default_value_t = 224)]
    pub gc: usize,
    /// Square source image side.
    #[arg(long, default_value_t = 224)]
    pub src: usize,
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "mean-of-ratios")]
    pub estimator: EstimatorArg,
    /// Directory for the JSON and CSV reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Geometry {
    fn spec(&self, lc: usize) -> ViewSetSpec {
        ViewSetSpec { s_g: self.sg, s_l: self.sl, s_min_local: self.s_min_local, gc: self.gc, lc, ..Default::default() }
    }
}

#[derive(Debug, Args)]
pub struct Calibrate {
    #[command(flatten)]
    pub geometry: Geometry,
    #[arg(long, default_value_t = 1.0)]
    pub target: f64,
    #[arg(long, default_value_t = 0.05)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct Stats {
    #[command(flatten)]
    pub geometry: Geometry,
    /// Local view resolution.
    #[arg(long, default_value_t = 128)]
    pub lc: usize,
}

#[derive(Debug, Args)]
pub struct Sweep {
    #[command(flatten)]
    pub geometry: Geometry,
    /// Global lower bounds to sweep (overrides --sg).
    #[arg(long, value_delimiter = ',', default_value = "0.14,0.2,0.3,0.4,0.6")]
    pub sg_grid: Vec<f64>,
    /// Local upper bounds to sweep (overrides --sl).
    #[arg(long, value_delimiter = ',', default_value = "0.14")]
    pub sl_grid: Vec<f64>,
    /// Local resolutions to sweep.
    #[arg(long, value_delimiter = ',', default_value = "96,112,128")]
    pub lc_grid: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct Train {
    /// TOML training config.
    #[arg(long)]
    pub config: PathBuf,
    /// Override one config key, e.g. `--set optim.lr.base=0.1` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Dataset file (overrides `dataset`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Run directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Frozen-feature inputs shared by probe, knn and export.
#[derive(Debug, Args)]
pub struct Frozen {
    /// Training checkpoint holding the student encoder.
    #[arg(long, required_unless_present = "random_init")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a freshly initialized encoder (default layout) instead.
    #[arg(long)]
    pub random_init: bool,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Evaluation resolution of the centered crop.
    #[arg(long, default_value_t = 56)]
    pub resolution: usize,
    /// Centered crop side relative to the shorter image side.
    #[arg(long, default_value_t = 0.875)]
    pub crop: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Split {
    /// Held-out fraction of the dataset.
    #[arg(long, default_value_t = 0.3)]
    pub test_fraction: f64,
    /// Output directory for the JSON result.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Probe {
    #[command(flatten)]
    pub frozen: Frozen,
    #[command(flatten)]
    pub split: Split,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    /// Peak learning rate of the cosine schedule.
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
}

#[derive(Debug, Args)]
pub struct Knn {
    #[command(flatten)]
    pub frozen: Frozen,
    #[command(flatten)]
    pub split: Split,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct Export {
    #[command(flatten)]
    pub frozen: Frozen,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Caps rayon workers at `SSLAB_THREADS` when set.
fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("SSLAB_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::Schema(format!("SSLAB_THREADS={v:?} is not a count")))?;
        // a pool built earlier in the same process keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match init_threads().and_then(|_| dispatch(cli.command)) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command; returns the one-line summary.
pub fn dispatch(cmd: Command) -> Result<String, CliError> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Stats(a) => stats(a),
        Command::Sweep(a) => sweep(a),
        Command::Train(a) => train(a),
        Command::Probe(a) => probe(a),
        Command::Knn(a) => knn(a),
        Command::Export(a) => export(a),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn to_json(v: &impl Serialize) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn gen_data(a: GenData) -> Result<String, CliError> {
    let classes = if a.class_names.is_empty() {
        ShapeClass::first(a.classes)
    } else {
        a.class_names.iter().map(|n| n.parse()).collect()
    }
    .map_err(|e: DataError| CliError::Schema(e.to_string()))?;
    let ds = gen_shapes_dataset(a.seed, a.per_class, &classes, a.size).map_err(|e| CliError::Schema(e.to_string()))?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_raw_dataset(&ds, &a.out)?;
    let names: Vec<&str> = classes.iter().map(|c| c.name()).collect();
    Ok(format!("wrote {} images ({}) of {}x{} to {}", ds.len(), names.join(","), a.size, a.size, a.out.display()))
}

fn check_geometry(g: &Geometry, spec: &ViewSetSpec) -> Result<(), CliError> {
    spec.validate().map_err(|e| CliError::Schema(e.to_string()))?;
    if g.samples == 0 || g.src == 0 {
        return Err(CliError::Schema("--samples and --src must be positive".into()));
    }
    Ok(())
}

fn write_report(
    out: &Option<PathBuf>,
    name: &str,
    report: &CalibrationReport,
    extra: serde_json::Value,
) -> Result<String, CliError> {
    let mut body = serde_json::to_value(report)?;
    if let (Some(map), serde_json::Value::Object(more)) = (body.as_object_mut(), extra) {
        map.extend(more);
    }
    let text = to_json(&body)?;
    if let Some(dir) = out {
        write_file(&dir.join(format!("{name}.json")), &text)?;
        write_file(
            &dir.join(format!("{name}.csv")),
            &format!("{}\n{}\n", CalibrationReport::CSV_HEADER, report.csv_row()),
        )?;
    }
    Ok(text)
}

fn calibrate(a: Calibrate) -> Result<String, CliError> {
    let g = &a.geometry;
    check_geometry(g, &g.spec(g.gc))?;
    let req = SolveRequest {
        target_ratio: a.target,
        tol: a.tol,
        n_samples: g.samples,
        seed: g.seed,
        estimator: g.estimator.into(),
    };
    let (lc, report) = solve_local_resolution(&g.spec(g.gc), g.src, g.src, &req)?;
    let text = write_report(&g.out, "calibrate", &report, json!({ "lc": lc, "target": a.target }))?;
    print!("{text}");
    Ok(format!("lc = {lc} (mean ratio {:.4} ± {:.4})", report.mean_ratio, report.std_err))
}

fn stats(a: Stats) -> Result<String, CliError> {
    let g = &a.geometry;
    let spec = g.spec(a.lc);
    check_geometry(g, &spec)?;
    let report = estimate_ps_ratio(&spec, g.src, g.src, g.samples, g.seed, g.estimator.into())?;
    let text = write_report(&g.out, "stats", &report, json!({}))?;
    print!("{text}");
    Ok(format!("mean ratio {:.4} ± {:.4} over {} pairs", report.mean_ratio, report.std_err, report.n_samples))
}

fn sweep(a: Sweep) -> Result<String, CliError> {
    let g = &a.geometry;
    let mut grid = Vec::new();
    for &s_g in &a.sg_grid {
        for &s_l in &a.sl_grid {
            for &lc in &a.lc_grid {
                let point = (s_g, s_l, lc);
                check_geometry(g, &ViewSetSpec { s_g, s_l, lc, ..g.spec(lc) })?;
                if !grid.contains(&point) {
                    grid.push(point);
                }
            }
        }
    }
    let rows = sweep_scales(&grid, &g.spec(g.gc), g.src, g.src, g.samples, g.seed, g.estimator.into())?;
    let mut csv = format!("{}\n", SweepRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    match &g.out {
        Some(dir) => write_file(&dir.join("sweep.csv"), &csv)?,
        None => print!("{csv}"),
    }
    Ok(format!("{} grid points", rows.len()))
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, CliError> {
    raw.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Schema(format!("override {kv:?} is not KEY=VALUE")))
        })
        .collect()
}

fn train(a: Train) -> Result<String, CliError> {
    let mut cfg = TrainConfig::load(&a.config, &parse_overrides(&a.overrides)?)?;
    if a.dataset.is_some() {
        cfg.dataset = a.dataset;
    }
    if a.out.is_some() {
        cfg.out_dir = a.out;
    }
    let data_path = cfg.dataset.clone().ok_or_else(|| CliError::Schema("no dataset path configured".into()))?;
    let out = cfg.out_dir.clone().ok_or_else(|| CliError::Schema("no out_dir configured".into()))?;
    if !data_path.is_file() {
        return Err(CliError::Schema(format!("dataset {} does not exist", data_path.display())));
    }
    let data = load_raw_dataset(&data_path)?;
    let mut trainer: Trainer = Trainer::new(cfg, data)?;
    let art = trainer.run(&out)?;
    let last = art.metrics.last().map(|r| format!(", final loss {:.4}", r.total)).unwrap_or_default();
    Ok(format!("trained {} steps (lc = {}){last} into {}", art.metrics.len(), art.lc, out.display()))
}

/// Features plus the hash of the config that produced the encoder.
fn frozen_features(f: &Frozen) -> Result<(FeatureMatrix, Option<String>), CliError> {
    let data = load_raw_dataset(&f.dataset)?;
    let (enc, params, hash) = match (&f.checkpoint, f.random_init) {
        (Some(path), false) => {
            let (enc, params) = load_encoder(path)?;
            let hash = checkpoint_meta(path, "config_hash")?.and_then(|v| v.as_str().map(str::to_string));
            (enc, params, hash)
        }
        (None, true) => {
            let enc = EncoderConfig::default();
            let params =
                enc.init(&mut seed::stream(f.seed, "init", 0)).map_err(|e| CliError::Runtime(e.to_string()))?;
            (enc, params, None)
        }
        _ => return Err(CliError::Schema("give exactly one of --checkpoint and --random-init".into())),
    };
    let cfg = ExtractConfig { resolution: f.resolution, crop_fraction: f.crop, ..ExtractConfig::default() };
    Ok((extract_features(&enc, &params, &data, &data.channel_stats(), &cfg)?, hash))
}

fn report_eval(
    name: &str,
    s: &Split,
    result: sslab::evalprobe::EvalResult,
    hash: Option<String>,
    extra: serde_json::Value,
) -> Result<String, CliError> {
    let mut body = json!({
        "accuracy": result.accuracy,
        "n_train": result.n_train,
        "n_test": result.n_test,
        "config_hash": hash,
    });
    if let (Some(map), serde_json::Value::Object(more)) = (body.as_object_mut(), extra) {
        map.extend(more);
    }
    let text = to_json(&body)?;
    match &s.out {
        Some(dir) => write_file(&dir.join(format!("{name}.json")), &text)?,
        None => print!("{text}"),
    }
    Ok(format!("{name} accuracy {:.4} ({} test rows)", result.accuracy, result.n_test))
}

fn probe(a: Probe) -> Result<String, CliError> {
    let (feats, hash) = frozen_features(&a.frozen)?;
    let split = split_holdout(feats.len(), a.split.test_fraction, a.frozen.seed)?;
    let cfg = ProbeConfig { epochs: a.epochs, lr: a.lr, ..ProbeConfig::default() };
    let r = linear_probe(&feats, &split, &cfg)?;
    report_eval("probe", &a.split, r, hash, json!({ "epochs": a.epochs, "lr": a.lr }))
}

fn knn(a: Knn) -> Result<String, CliError> {
    let (feats, hash) = frozen_features(&a.frozen)?;
    let split = split_holdout(feats.len(), a.split.test_fraction, a.frozen.seed)?;
    let r = knn_eval(&feats, a.k, &split)?;
    report_eval("knn", &a.split, r, hash, json!({ "k": a.k }))
}

fn export(a: Export) -> Result<String, CliError> {
    let (feats, _) = frozen_features(&a.frozen)?;
    write_file(&a.out, &feats.to_csv())?;
    Ok(format!("wrote {} x {} features to {}", feats.len(), feats.dim(), a.out.display()))
}
