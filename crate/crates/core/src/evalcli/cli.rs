//! Command-line driver. Every command resolves its flags and configuration
//! into an [`Invocation`], records it in `runs/<id>/manifest.json`, then
//! executes it; `replay` re-executes a recorded invocation.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::eval::{evaluate, EvalOptions, MetricsReport};
use super::metrics::{bias_map, write_bias_maps};
use super::report::{discover_runs, RunReport, RunSummary, MANIFEST_FILE, METRICS_CSV, METRICS_JSON, SUMMARY_FILE};
use crate::attention::{bench_attention, bench_csv, DEFAULT_TILE_K};
use crate::dataio::{synth_generate_with, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, RegionBox};
use crate::model::{load_checkpoint, save_checkpoint, CountFilter, ForecastModel, CHECKPOINT_VERSION};
use crate::peft::{AdapterBundle, TargetSelector, ADAPTER_VERSION};
use crate::train::{finetune_regional, glora_search, train_with_log, ForecastData, TrainConfig, TrainMode, TrainReport};

pub const RUN_MANIFEST_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "regioncast", version, about = "Regional weather forecasting with a global transformer and parameter-efficient fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic advection dataset.
    GenData(GenDataArgs),
    /// Train a global model from scratch.
    Pretrain(PretrainArgs),
    /// Fine-tune a global checkpoint on a region.
    Finetune(FinetuneArgs),
    /// Evolutionary search over GLoRA structures.
    Search(FinetuneArgs),
    /// Score a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Time and meter the naive and streaming attention kernels.
    BenchAttention(BenchArgs),
    /// Aggregate run directories into comparison tables.
    Report(ReportArgs),
    /// Re-execute the invocation recorded in a run manifest.
    Replay(ReplayArgs),
    /// Print the run-configuration JSON schema.
    Schema,
}

/// Where a run's directory goes.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Run directory name; defaults to `<command>-<config hash prefix>`.
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Grid spacing in degrees.
    #[arg(long, default_value_t = 11.25)]
    resolution: f64,
    /// Calendar years to simulate.
    #[arg(long, default_value_t = 4)]
    years: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON generator configuration.
    #[arg(long)]
    synth_config: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Optimizer steps per epoch.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(s) = self.seed {
            t.seed = s;
        }
        if let Some(e) = self.epochs {
            t.max_epochs = e;
        }
        if let Some(s) = self.steps {
            t.steps_per_epoch = Some(s);
        }
        if let Some(l) = self.lr {
            t.learning_rate = l;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Global checkpoint file or run directory.
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// fft, lora, reslora or glora.
    #[arg(long)]
    mode: Option<TrainMode>,
    /// Preset name or lat_min,lat_max,lon_min,lon_max.
    #[arg(long, allow_hyphen_values = true)]
    region: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    /// attention, attention+fc1, attention+fc1fc2, or comma-separated paths.
    #[arg(long)]
    targets: Option<String>,
    /// Training lead times in hours.
    #[arg(long, value_delimiter = ',')]
    lead: Option<Vec<u32>>,
    #[command(flatten)]
    train: TrainOverrides,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file or run directory holding `checkpoints/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics crop; omitted scores the whole model window.
    #[arg(long, allow_hyphen_values = true)]
    region: Option<String>,
    /// Region the model runs on (patch-aligned); omitted runs globally.
    #[arg(long, allow_hyphen_values = true)]
    input_region: Option<String>,
    #[arg(long, value_delimiter = ',')]
    leads: Option<Vec<u32>>,
    #[arg(long)]
    max_windows: Option<usize>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    head_dim: usize,
    #[arg(long, default_value_t = DEFAULT_TILE_K)]
    tile_k: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories or parents of run directories.
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Output directory; defaults to the report's run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// A run's `manifest.json`.
    #[arg(long)]
    manifest: PathBuf,
    /// Skip the input fingerprint check.
    #[arg(long)]
    allow_changed_inputs: bool,
    #[command(flatten)]
    run: RunArgs,
}

/// A fully resolved command: re-executing it reproduces the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Invocation {
    GenData {
        out: PathBuf,
        resolution: f64,
        years: u32,
        seed: u64,
        synth: SynthConfig,
    },
    Pretrain {
        data: PathBuf,
        config: RunConfig,
    },
    Finetune {
        data: PathBuf,
        base: PathBuf,
        config: RunConfig,
    },
    Search {
        data: PathBuf,
        base: PathBuf,
        config: RunConfig,
    },
    Evaluate {
        data: PathBuf,
        checkpoint: PathBuf,
        config: RunConfig,
        region: Option<String>,
        input_region: Option<String>,
        leads: Vec<u32>,
    },
    BenchAttention {
        sizes: Vec<usize>,
        head_dim: usize,
        tile_k: usize,
        reps: usize,
        seed: u64,
    },
    Report {
        runs: Vec<PathBuf>,
        out: Option<PathBuf>,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::GenData { .. } => "gen-data",
            Invocation::Pretrain { .. } => "pretrain",
            Invocation::Finetune { .. } => "finetune",
            Invocation::Search { .. } => "search",
            Invocation::Evaluate { .. } => "evaluate",
            Invocation::BenchAttention { .. } => "bench-attention",
            Invocation::Report { .. } => "report",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Invocation::GenData { seed, .. } | Invocation::BenchAttention { seed, .. } => *seed,
            Invocation::Pretrain { config, .. } => config.pretrain.seed,
            Invocation::Finetune { config, .. } | Invocation::Search { config, .. } => config.finetune.seed,
            Invocation::Evaluate { config, .. } => config.finetune.seed,
            Invocation::Report { .. } => 0,
        }
    }

    /// SHA-256 of the invocation's compact JSON.
    pub fn config_sha256(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    /// Files whose content the run depends on.
    fn inputs(&self) -> Vec<(String, PathBuf)> {
        match self {
            Invocation::Pretrain { data, .. } => vec![("data".into(), data.clone())],
            Invocation::Finetune { data, base, .. } | Invocation::Search { data, base, .. } => {
                vec![("data".into(), data.clone()), ("base".into(), resolve_checkpoint(base).unwrap_or(base.clone()))]
            }
            Invocation::Evaluate { data, checkpoint, .. } => vec![
                ("data".into(), data.clone()),
                ("checkpoint".into(), resolve_checkpoint(checkpoint).unwrap_or(checkpoint.clone())),
            ],
            _ => Vec::new(),
        }
    }
}

/// `runs/<id>/manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub run_id: String,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: IndexMap<String, String>,
    /// Input path → SHA-256 of its content (directories hash every file).
    pub inputs: IndexMap<String, String>,
    pub invocation: Invocation,
}

fn versions() -> IndexMap<String, String> {
    let mut v = IndexMap::new();
    v.insert("regioncast".into(), env!("CARGO_PKG_VERSION").into());
    v.insert("run_manifest".into(), RUN_MANIFEST_VERSION.to_string());
    v.insert("dataset_format".into(), crate::dataio::FORMAT_VERSION.to_string());
    v.insert("checkpoint_format".into(), CHECKPOINT_VERSION.to_string());
    v.insert("adapter_format".into(), ADAPTER_VERSION.to_string());
    v
}

/// Content hash of a file, or of every file under a directory in sorted
/// relative-path order.
pub fn fingerprint(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        let file = if rel.as_os_str().is_empty() { path.to_path_buf() } else { path.join(&rel) };
        let mut f = std::fs::File::open(file)?;
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = std::io::Read::read(&mut f, &mut buf)?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, at: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if at.is_file() {
        out.push(at.strip_prefix(root).map(Path::to_path_buf).unwrap_or_default());
        return Ok(());
    }
    for e in std::fs::read_dir(at).map_err(|e| Error::Config(format!("cannot read {}: {e}", at.display())))? {
        collect_files(root, &e?.path(), out)?;
    }
    Ok(())
}

fn short_id(sha: &str) -> String {
    sha[..16].to_string()
}

/// A checkpoint file itself, or `<dir>/checkpoints/model.ckpt`.
fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if path.is_dir() {
        let c = path.join("checkpoints").join("model.ckpt");
        if c.is_file() {
            return Ok(c);
        }
        return Err(Error::Config(format!("no checkpoint found: {} has no checkpoints/model.ckpt", path.display())));
    }
    Err(Error::Config(format!("no checkpoint found at {}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::open(dir)?.into_memory()
}

struct RunDir {
    dir: PathBuf,
    log: std::fs::File,
}

impl RunDir {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn note(&mut self, line: &str) -> Result<()> {
        eprintln!("{line}");
        writeln!(self.log, "{line}")?;
        Ok(())
    }
}

fn start_run(inv: &Invocation, run: &RunArgs) -> Result<RunDir> {
    let sha = inv.config_sha256()?;
    let run_id = run.run_id.clone().unwrap_or_else(|| format!("{}-{}", inv.name(), &sha[..12]));
    if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id == "." || run_id == ".." {
        return Err(Error::Config(format!("invalid run id `{run_id}`")));
    }
    let mut inputs = IndexMap::new();
    for (label, p) in inv.inputs() {
        if !p.exists() {
            return Err(Error::Config(format!("{label} input {} does not exist", p.display())));
        }
        inputs.insert(format!("{label}:{}", p.display()), fingerprint(&p)?);
    }
    let manifest = RunManifest {
        manifest_version: RUN_MANIFEST_VERSION,
        run_id: run_id.clone(),
        config_sha256: sha,
        seed: inv.seed(),
        versions: versions(),
        inputs,
        invocation: inv.clone(),
    };
    let dir = run.runs_dir.join(&run_id);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let log = std::fs::File::create(dir.join("run.log"))?;
    let mut rd = RunDir { dir, log };
    rd.note(&format!("run {run_id} ({})", inv.name()))?;
    Ok(rd)
}

fn write_metrics(rd: &RunDir, report: &MetricsReport) -> Result<()> {
    std::fs::write(rd.path(METRICS_JSON), report.to_json()?)?;
    std::fs::write(rd.path(METRICS_CSV), report.to_csv())?;
    Ok(())
}

fn write_summary(rd: &RunDir, s: &RunSummary) -> Result<()> {
    std::fs::write(rd.path(SUMMARY_FILE), serde_json::to_string_pretty(s)? + "\n")?;
    Ok(())
}

/// Bias maps of the first evaluated window at the first lead, cropped to
/// the metric region.
fn write_maps(rd: &RunDir, model: &ForecastModel, data: &ForecastData, region: Option<&RegionBox>, lead: u32, opts: &EvalOptions) -> Result<()> {
    let Some(w) = data.windows(opts.split, &[lead]).into_iter().next() else {
        return Ok(());
    };
    let (input, truth) = data.physical(&w)?;
    let pred = data.target_norm.denormalize(&model.predict(&data.input_norm.normalize(&input)?, &data.inputs, lead, &data.window)?)?;
    let (crop, grid) = match region {
        Some(r) => {
            let c = crate::grid::crop_indices(&data.grid, r)?;
            let g = data.grid.subgrid(&c)?;
            (c, g)
        }
        None => (crate::grid::CropIndex::full(&data.grid), data.grid.clone()),
    };
    let bias = bias_map(&crop.apply(&pred)?, &crop.apply(&truth)?)?;
    let ts = data.dataset.manifest().timestamps[w.target];
    write_bias_maps(&rd.path("maps"), &grid, &data.targets, &bias, ts)
}

fn checkpoint_id(path: &Path) -> Result<String> {
    Ok(format!("sha256:{}", short_id(&fingerprint(path)?)))
}

fn eval_leads(cfg: &RunConfig, train: &TrainConfig) -> Vec<u32> {
    cfg.eval.leads.clone().unwrap_or_else(|| train.lead_times.clone())
}

fn eval_options(cfg: &RunConfig, checkpoint: String, seed: u64) -> EvalOptions {
    EvalOptions {
        split: cfg.eval.split,
        max_windows: cfg.eval.max_windows,
        checkpoint,
        seed,
    }
}

fn log_epochs(rd: &mut RunDir) -> impl FnMut(&crate::train::EpochLog) + '_ {
    move |e| {
        let _ = rd.note(&e.line());
    }
}

fn summary(command: &str, cfg: &TrainConfig, region: &str, model: &ForecastModel, report: Option<&TrainReport>, adapted: bool) -> RunSummary {
    let peft = matches!(cfg.mode, TrainMode::Lora | TrainMode::Reslora | TrainMode::Glora) && adapted;
    RunSummary {
        command: command.into(),
        mode: if report.is_some() { cfg.mode.to_string() } else { "none".into() },
        rank: if peft { cfg.peft.rank } else { 0 },
        targets: if peft { cfg.peft.targets.to_string() } else { String::new() },
        region: region.into(),
        trainable_params: report.map(|r| r.trainable_params).unwrap_or(0),
        total_params: model.count_parameters(CountFilter::All),
        peak_bytes: report.map(|r| r.peak_bytes).unwrap_or(0),
        best_epoch: report.map(|r| r.best_epoch).unwrap_or(0),
        best_val_loss: report.map(|r| r.best_val_loss),
        steps: report.map(|r| r.steps).unwrap_or(0),
    }
}

fn regional_data(data_dir: &Path, base: &ForecastModel, cfg: &RunConfig) -> Result<ForecastData> {
    let ds = open_dataset(data_dir)?;
    let split = cfg.split_for(ds.manifest())?;
    ForecastData::new(ds, base.config(), &split, Some(&cfg.region_box()?))
}

/// Executes a resolved invocation into a run directory.
pub fn execute(inv: &Invocation, run: &RunArgs) -> Result<PathBuf> {
    let mut rd = start_run(inv, run)?;
    match inv {
        Invocation::GenData { out, resolution, years, seed, synth } => {
            let grid = GridSpec::from_resolution(*resolution)?;
            let start = NaiveDate::parse_from_str(&synth.start_date, "%Y-%m-%d")
                .map_err(|e| Error::Config(format!("start_date `{}`: {e}", synth.start_date)))?;
            let end = NaiveDate::from_ymd_opt(start.year() + *years as i32, start.month(), start.day())
                .ok_or_else(|| Error::Config("end date out of range".into()))?;
            let hours = (end - start).num_hours();
            let steps = (hours / synth.step_hours.max(1) as i64) as usize;
            rd.note(&format!("generating {steps} steps on a {}×{} grid", grid.n_lat, grid.n_lon))?;
            synth_generate_with(&grid, steps, *seed, synth)?.write(out)?;
            rd.note(&format!("dataset written to {}", out.display()))?;
        }
        Invocation::Pretrain { data, config } => {
            let ds = open_dataset(data)?;
            let mcfg = config.model_config(ds.manifest())?;
            let split = config.split_for(ds.manifest())?;
            let fd = ForecastData::new(ds, &mcfg, &split, None)?;
            let mut model = ForecastModel::new(mcfg, config.pretrain.seed)?;
            let tcfg = TrainConfig {
                mode: TrainMode::Fft,
                ..config.pretrain.clone()
            };
            let report = train_with_log(&mut model, &fd, &tcfg, log_epochs(&mut rd))?;
            std::fs::create_dir_all(rd.path("checkpoints"))?;
            let ckpt = rd.path("checkpoints").join("model.ckpt");
            save_checkpoint(&model, &ckpt)?;
            let opts = eval_options(config, checkpoint_id(&ckpt)?, tcfg.seed);
            let leads = eval_leads(config, &tcfg);
            let metrics = evaluate(&model, &fd, None, &leads, &opts)?;
            write_metrics(&rd, &metrics)?;
            if config.eval.bias_maps {
                write_maps(&rd, &model, &fd, None, leads[0], &opts)?;
            }
            write_summary(&rd, &summary("pretrain", &tcfg, "global", &model, Some(&report), false))?;
        }
        Invocation::Finetune { data, base, config } => {
            let base_model = load_checkpoint(resolve_checkpoint(base)?)?;
            let fd = regional_data(data, &base_model, config)?;
            let tcfg = &config.finetune;
            let r = finetune_regional(&base_model, &fd, tcfg)?;
            for e in &r.report.history {
                rd.note(&e.line())?;
            }
            std::fs::create_dir_all(rd.path("checkpoints"))?;
            let ckpt = rd.path("checkpoints").join("model.ckpt");
            save_checkpoint(&r.model, &ckpt)?;
            if !r.model.adapters().is_empty() {
                AdapterBundle::from_model(&r.model)?.save(rd.path("checkpoints").join("adapter.bin"))?;
            }
            if let Some(s) = &r.search {
                std::fs::write(rd.path("search.json"), serde_json::to_string_pretty(s)? + "\n")?;
            }
            let region = config.region_box()?;
            let opts = eval_options(config, checkpoint_id(&ckpt)?, tcfg.seed);
            let leads = eval_leads(config, tcfg);
            let metrics = evaluate(&r.model, &fd, Some(&region), &leads, &opts)?;
            write_metrics(&rd, &metrics)?;
            if config.eval.bias_maps {
                write_maps(&rd, &r.model, &fd, Some(&region), leads[0], &opts)?;
            }
            let adapted = !r.adapted_paths.is_empty();
            write_summary(&rd, &summary("finetune", tcfg, &config.region, &r.model, Some(&r.report), adapted))?;
        }
        Invocation::Search { data, base, config } => {
            let base_model = load_checkpoint(resolve_checkpoint(base)?)?;
            let fd = regional_data(data, &base_model, config)?;
            let r = glora_search(&base_model, &fd, &config.finetune)?;
            rd.note(&format!(
                "{} evaluations over {} generations, best validation loss {:?}",
                r.evaluations(),
                r.generations,
                r.best.fitness
            ))?;
            std::fs::write(rd.path("search.json"), serde_json::to_string_pretty(&r)? + "\n")?;
        }
        Invocation::Evaluate {
            data,
            checkpoint,
            config,
            region,
            input_region,
            leads,
        } => {
            let ckpt = resolve_checkpoint(checkpoint)?;
            let model = load_checkpoint(&ckpt)?;
            let ds = open_dataset(data)?;
            let split = config.split_for(ds.manifest())?;
            let window = input_region.as_deref().map(RegionBox::parse).transpose()?;
            let fd = ForecastData::new(ds, model.config(), &split, window.as_ref())?;
            let metric_region = region.as_deref().map(RegionBox::parse).transpose()?;
            let opts = eval_options(config, checkpoint_id(&ckpt)?, 0);
            let metrics = evaluate(&model, &fd, metric_region.as_ref(), leads, &opts)?;
            write_metrics(&rd, &metrics)?;
            if config.eval.bias_maps {
                write_maps(&rd, &model, &fd, metric_region.as_ref(), leads[0], &opts)?;
            }
            let label = region.clone().unwrap_or_else(|| input_region.clone().unwrap_or_else(|| "global".into()));
            let mut s = summary("evaluate", &config.finetune, &label, &model, None, false);
            s.trainable_params = model.count_parameters(CountFilter::Trainable);
            write_summary(&rd, &s)?;
        }
        Invocation::BenchAttention {
            sizes,
            head_dim,
            tile_k,
            reps,
            seed,
        } => {
            let rows = bench_attention(sizes, *head_dim, *tile_k, *reps, *seed)?;
            let csv = bench_csv(&rows);
            print!("{csv}");
            std::fs::write(rd.path("bench.csv"), csv)?;
        }
        Invocation::Report { runs, out } => {
            let dirs = discover_runs(runs)?;
            let rep = RunReport::collect(&dirs)?;
            let dest = out.clone().unwrap_or_else(|| rd.dir.clone());
            rep.write(&dest)?;
            print!("{}", rep.to_wide_csv());
            rd.note(&format!("{} runs tabulated into {}", rep.rows.len(), dest.display()))?;
        }
    }
    Ok(rd.dir)
}

fn resolve(command: Command) -> Result<Option<(Invocation, RunArgs)>> {
    Ok(Some(match command {
        Command::Schema => {
            print!("{}", super::config::RUN_CONFIG_SCHEMA);
            return Ok(None);
        }
        Command::GenData(a) => {
            let synth = match &a.synth_config {
                None => SynthConfig::default(),
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            };
            (
                Invocation::GenData {
                    out: a.out,
                    resolution: a.resolution,
                    years: a.years,
                    seed: a.seed,
                    synth,
                },
                a.run,
            )
        }
        Command::Pretrain(a) => {
            let mut config = load_config(a.config.as_deref())?;
            a.train.apply(&mut config.pretrain);
            config.validate()?;
            (Invocation::Pretrain { data: a.data, config }, a.run)
        }
        Command::Finetune(a) => {
            let (data, base, config, run) = finetune_parts(a)?;
            (Invocation::Finetune { data, base, config }, run)
        }
        Command::Search(a) => {
            let (data, base, mut config, run) = finetune_parts(a)?;
            config.finetune.mode = TrainMode::Glora;
            (Invocation::Search { data, base, config }, run)
        }
        Command::Evaluate(a) => {
            let Some(checkpoint) = a.checkpoint else {
                return Err(Error::Config("evaluate needs a checkpoint: pass --checkpoint <FILE or RUN DIR>".into()));
            };
            let mut config = load_config(a.config.as_deref())?;
            if a.max_windows.is_some() {
                config.eval.max_windows = a.max_windows;
            }
            let leads = a.leads.or_else(|| config.eval.leads.clone()).unwrap_or_else(|| vec![72]);
            if leads.is_empty() || leads.contains(&0) {
                return Err(Error::Config("--leads must be positive hours".into()));
            }
            for r in [&a.region, &a.input_region].into_iter().flatten() {
                RegionBox::parse(r)?;
            }
            (
                Invocation::Evaluate {
                    data: a.data,
                    checkpoint,
                    config,
                    region: a.region,
                    input_region: a.input_region,
                    leads,
                },
                a.run,
            )
        }
        Command::BenchAttention(a) => (
            Invocation::BenchAttention {
                sizes: a.sizes,
                head_dim: a.head_dim,
                tile_k: a.tile_k,
                reps: a.reps,
                seed: a.seed,
            },
            a.run,
        ),
        Command::Report(a) => (Invocation::Report { runs: a.runs, out: a.out }, a.run),
        Command::Replay(a) => {
            let text = std::fs::read_to_string(&a.manifest).map_err(|e| Error::Config(format!("cannot read {}: {e}", a.manifest.display())))?;
            let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.manifest.display())))?;
            if m.invocation.config_sha256()? != m.config_sha256 {
                return Err(Error::Config("manifest config hash does not match its invocation".into()));
            }
            if !a.allow_changed_inputs {
                for (label, p) in m.invocation.inputs() {
                    let key = format!("{label}:{}", p.display());
                    let now = fingerprint(&p)?;
                    if m.inputs.get(&key) != Some(&now) {
                        return Err(Error::Config(format!("input {key} changed since the recorded run")));
                    }
                }
            }
            (m.invocation, a.run)
        }
    }))
}

fn finetune_parts(a: FinetuneArgs) -> Result<(PathBuf, PathBuf, RunConfig, RunArgs)> {
    let mut config = load_config(a.config.as_deref())?;
    let t = &mut config.finetune;
    if let Some(m) = a.mode {
        t.mode = m;
    }
    if let Some(r) = a.rank {
        t.peft.rank = r;
    }
    if let Some(s) = &a.targets {
        t.peft.targets = s.parse::<TargetSelector>()?;
    }
    if let Some(l) = a.lead {
        t.lead_times = l;
    }
    a.train.apply(t);
    if let Some(r) = a.region {
        config.region = r;
    }
    config.validate()?;
    Ok((a.data, a.base, config, a.run))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = resolve(parsed.command).and_then(|r| match r {
        Some((inv, run)) => execute(&inv, &run).map(|d| eprintln!("run directory: {}", d.display())),
        None => Ok(()),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
