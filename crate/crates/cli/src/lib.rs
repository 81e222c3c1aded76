//! `tof` command line: preprocess, synth, train, predict and evaluate.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use tof_core::bundle::{self, PlotBundle};
use tof_core::evaluate::evaluate_plots;
use tof_core::inference::{binarize, predict_scene, BlendPlan, NetworkModel};
use tof_core::preprocess::{preprocess_scene, PreprocessConfig};
use tof_core::raster::LabelGrid;
use tof_core::synth::{generate_dataset, CoverMix, SynthConfig};
use tof_core::trainer::{Checkpoint, TrainConfig, Trainer};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "tof", version, about = "Tree detection in Sentinel-1/2 time series")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// JSON file with configuration overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `train.epochs=5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Composite, gap-fill and smooth raw acquisitions into plot bundles.
    Preprocess(PreprocessArgs),
    /// Generate synthetic labeled plot bundles.
    Synth(SynthArgs),
    /// Train a model on a directory of labeled plot bundles.
    Train(TrainArgs),
    /// Predict tree probabilities and masks for scene bundles.
    Predict(PredictArgs),
    /// Score prediction masks against labels.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Raw bundle, or a directory of raw bundles.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Whittaker smoothing strength.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long = "shadow-b8")]
    pub shadow_b8: Option<f64>,
    #[arg(long = "shadow-b11")]
    pub shadow_b11: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// `uniform`, `low` or a fixed cover fraction.
    #[arg(long = "cover-mix", default_value = "uniform")]
    pub cover_mix: String,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the raw acquisitions of each plot under `<out>/raw`.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Plot bundle, or a directory of plot bundles.
    #[arg(long)]
    pub scene: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    /// `auto` uses the threshold stored with the model.
    #[arg(long, default_value = "auto")]
    pub threshold: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction directory, or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Labeled plot bundle, or a directory of them.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Bootstrap seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub seed: u64,
}

/// Every tunable of every subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub inference: BlendPlan,
    pub evaluate: EvaluateConfig,
}

/// Bad arguments or configuration keys; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Recursively overlays `patch` onto `base`, rejecting keys `base` lacks.
pub fn merge(base: &mut Value, patch: &Value, prefix: &str) -> anyhow::Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| usage(format!("unknown config key '{key}'")))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// `a.b.c=v` as a nested object; `v` is read as JSON, else as a string.
pub fn parse_override(s: &str) -> anyhow::Result<Value> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| usage(format!("override '{s}' is not KEY=VALUE")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(usage(format!("override '{s}' has an empty key segment")));
    }
    let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), value);
        value = Value::Object(m);
    }
    Ok(value)
}

/// Defaults, then the config file, then `--set` overrides, then `flags`.
pub fn resolve_config(file: Option<&Path>, overrides: &[String], flags: &[Value]) -> anyhow::Result<PipelineConfig> {
    let mut value = serde_json::to_value(PipelineConfig::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut value, &patch, "")?;
    }
    for o in overrides {
        merge(&mut value, &parse_override(o)?, "")?;
    }
    for f in flags {
        merge(&mut value, f, "")?;
    }
    serde_json::from_value(value).map_err(|e| usage(format!("invalid configuration: {e}")))
}

fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn write_manifest(dir: &Path, argv: &[String], config: &PipelineConfig, seed: Option<u64>, started: f64) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let manifest = json!({
        "command": argv,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "seed": seed,
        "started_unix": started,
        "finished_unix": unix_seconds(),
    });
    let path = dir.join(RUN_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))
}

fn require_dir(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_dir() {
        bail!("{what} directory not found: {}", path.display());
    }
    Ok(())
}

/// Subdirectories with `marker`, or `dir` itself when it has one.
fn marked_dirs(dir: &Path, marker: &str) -> anyhow::Result<Vec<PathBuf>> {
    if dir.join(marker).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(marker).is_file())
        .collect();
    v.sort();
    if v.is_empty() {
        bail!("no entries with {marker} under {}", dir.display());
    }
    Ok(v)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map_or_else(|| "scene".into(), |n| n.to_string_lossy().into_owned())
}

fn preprocess(a: &PreprocessArgs, cfg: &PipelineConfig) -> anyhow::Result<()> {
    require_dir(&a.input, "input")?;
    let p = &cfg.preprocess;
    let inputs = marked_dirs(&a.input, bundle::META_FILE)?;
    let single = inputs.len() == 1 && inputs[0] == a.input;
    for dir in inputs {
        let (raw, meta, labels) = bundle::load_raw::<f32>(&dir, &p.normalization).with_context(|| format!("loading {}", dir.display()))?;
        let pre = preprocess_scene(&raw, p).with_context(|| format!("preprocessing {}", dir.display()))?;
        log::info!("{}: {:.1}% of step pixels gap-filled", meta.plot_id, 100.0 * pre.missing_fraction);
        let out = if single { a.output.clone() } else { a.output.join(dir_name(&dir)) };
        PlotBundle::new(&meta.plot_id, meta.lat, meta.lon, pre.s2, pre.s1, pre.dem, labels)?.save(&out)?;
    }
    Ok(())
}

fn synth(a: &SynthArgs, cfg: &PipelineConfig) -> anyhow::Result<()> {
    let mix: CoverMix = a.cover_mix.parse().map_err(|e: tof_core::Error| usage(e.to_string()))?;
    let plots = generate_dataset::<f32>(a.n, mix, &cfg.synth, a.seed)?;
    let width = a.n.saturating_sub(1).to_string().len().max(4);
    for (i, p) in plots.iter().enumerate() {
        let name = format!("plot-{i:0width$}");
        let pre = preprocess_scene(&p.raw, &cfg.preprocess)?;
        PlotBundle::new(&p.sample.stack.plot_id().to_string(), p.lat, p.lon, pre.s2, pre.s1, pre.dem, Some(p.sample.label.clone()))?
            .save(&a.out.join(&name))?;
        if a.raw {
            bundle::save_raw(&a.out.join("raw").join(&name), &p.raw, p.lat, p.lon, Some(&p.sample.label), &cfg.preprocess.normalization)?;
        }
    }
    Ok(())
}

fn train(a: &TrainArgs, cfg: &PipelineConfig) -> anyhow::Result<()> {
    require_dir(&a.data, "data")?;
    let data = bundle::load_dataset::<f32>(&a.data, &cfg.preprocess).with_context(|| format!("loading {}", a.data.display()))?;
    log::info!("{} training plots", data.len());
    let mut trainer = match &a.resume {
        Some(dir) => {
            let mut ck = Checkpoint::<f32>::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
            ck.manifest.config.epochs = cfg.train.epochs;
            Trainer::resume(ck, &data)?
        }
        None => Trainer::new(cfg.train, &data, a.seed)?,
    };
    trainer.train(Some(&a.out))?;
    Ok(())
}

fn predict(a: &PredictArgs, cfg: &PipelineConfig) -> anyhow::Result<()> {
    require_dir(&a.scene, "scene")?;
    require_dir(&a.model, "model")?;
    let ck = Checkpoint::<f32>::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let threshold = match a.threshold.as_str() {
        "auto" => ck.manifest.threshold.unwrap_or_else(|| {
            log::warn!("model has no stored threshold; using {DEFAULT_THRESHOLD}");
            DEFAULT_THRESHOLD
        }),
        s => {
            let t: f64 = s.parse().map_err(|_| usage(format!("threshold '{s}' is neither 'auto' nor a number")))?;
            if !(t > 0.0 && t < 1.0) {
                return Err(usage(format!("threshold {t} outside (0, 1)")));
            }
            t
        }
    };
    let network = tof_core::network::Network::new(ck.manifest.config.net)?;
    let model = NetworkModel { network: &network, params: &ck.params };
    let scenes = marked_dirs(&a.scene, bundle::META_FILE)?;
    let single = scenes.len() == 1 && scenes[0] == a.scene;
    for dir in scenes {
        let b = PlotBundle::<f32>::load(&dir).with_context(|| format!("loading {}", dir.display()))?;
        let stack = b.stack(&cfg.preprocess)?;
        let probs = predict_scene(stack.data(), &model, &cfg.inference)?;
        let mask = binarize(probs.probs(), threshold)?;
        let out = if single { a.out.clone() } else { a.out.join(dir_name(&dir)) };
        bundle::save_prediction(&out, &b.meta.plot_id, &probs.into_inner(), threshold, &mask)?;
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs, cfg: &PipelineConfig) -> anyhow::Result<()> {
    require_dir(&a.pred, "prediction")?;
    require_dir(&a.labels, "label")?;
    let preds = marked_dirs(&a.pred, bundle::MASK_FILE)?;
    let labels = marked_dirs(&a.labels, bundle::LABELS_FILE)?;
    let pairs: Vec<(PathBuf, PathBuf)> = if preds.len() == 1 && labels.len() == 1 && (preds[0] == a.pred || labels[0] == a.labels) {
        vec![(labels[0].clone(), preds[0].clone())]
    } else {
        let mut v = Vec::new();
        for l in &labels {
            let p = preds
                .iter()
                .find(|p| dir_name(p) == dir_name(l))
                .ok_or_else(|| anyhow!("no prediction for {} under {}", dir_name(l), a.pred.display()))?;
            v.push((l.clone(), p.clone()));
        }
        v
    };
    let grids: Vec<(LabelGrid, LabelGrid)> = pairs
        .iter()
        .map(|(l, p)| -> anyhow::Result<_> {
            Ok((bundle::read_grid_csv(&l.join(bundle::LABELS_FILE))?, bundle::read_grid_csv(&p.join(bundle::MASK_FILE))?))
        })
        .collect::<anyhow::Result<_>>()?;
    let report = evaluate_plots(&grids, cfg.evaluate.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&a.out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn execute(cli: &Cli, argv: &[String]) -> anyhow::Result<()> {
    if cli.threads > 0 {
        // a second call in the same process keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let started = unix_seconds();
    let mut flags = Vec::new();
    let (out_dir, seed): (PathBuf, Option<u64>) = match &cli.command {
        Command::Preprocess(a) => {
            if let Some(l) = a.lambda {
                flags.push(json!({"preprocess": {"whittaker": {"lambda": l}}}));
            }
            if let Some(v) = a.shadow_b8 {
                flags.push(json!({"preprocess": {"shadows": {"b8_max": v}}}));
            }
            if let Some(v) = a.shadow_b11 {
                flags.push(json!({"preprocess": {"shadows": {"b11_max": v}}}));
            }
            (a.output.clone(), None)
        }
        Command::Synth(a) => (a.out.clone(), Some(a.seed)),
        Command::Train(a) => (a.out.clone(), Some(a.seed)),
        Command::Predict(a) => (a.out.clone(), None),
        Command::Evaluate(a) => {
            if let Some(s) = a.seed {
                flags.push(json!({"evaluate": {"seed": s}}));
            }
            let parent = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            (parent.to_path_buf(), a.seed)
        }
    };
    let cfg = resolve_config(cli.config.as_deref(), &cli.overrides, &flags)?;
    match &cli.command {
        Command::Preprocess(a) => preprocess(a, &cfg)?,
        Command::Synth(a) => synth(a, &cfg)?,
        Command::Train(a) => train(a, &cfg)?,
        Command::Predict(a) => predict(a, &cfg)?,
        Command::Evaluate(a) => evaluate(a, &cfg)?,
    }
    let seed = seed.or(match &cli.command {
        Command::Evaluate(_) => Some(cfg.evaluate.seed),
        _ => None,
    });
    write_manifest(&out_dir, argv, &cfg, seed, started)
}

/// Runs one command; returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
