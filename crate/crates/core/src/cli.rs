//! The `searth` command line.
//!
//! Every subcommand accepts `--config <json>` whose keys are the long flag
//! names in snake case. Values resolve as: config file, then `SEARTH_SEED`
//! for the seed, then explicit flags. Failures print one line
//! `error: <code>: <detail>` and exit 2 (usage), 3 (config), 4 (io) or
//! 5 (numeric). Each run appends a record to a `runs.jsonl` next to its
//! output.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{
    acc, compute_climatology, rmse, skillful_lead_time, write_diff_csv, Climatology, MetricRow, MetricsTable,
};
use crate::geometry::{earth_attention_mask, latitude_weights, regrid_quarter_to_one, MaskMode};
use crate::gradcheck::{model_gradcheck, primitive_suite};
use crate::io::checkpoint::{self, Checkpoint};
use crate::io::gt1::{self, AnyTensor};
use crate::io::plot::emit_plot;
use crate::io::runlog::{append_run_record, config_hash, RunRecord, RUNS_FILE};
use crate::io::synth::{read_dataset, write_dataset, DataManifest, SynthConfig};
use crate::model::{Model, ModelConfig, NormStats};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;
use crate::training::{
    finetune_ar, finetune_rar, pretrain, Dataset, LossRecord, LrSchedule, TrainConfig, TrainOutcome, TrainState,
    UpdateCadence,
};

pub const SEED_ENV: &str = "SEARTH_SEED";
/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "searth",
    version,
    about = "Earth-aware windowed-attention forecaster: data, training, evaluation"
)]
struct Cli {
    /// Run-record file (default: `runs.jsonl` beside the command's output).
    #[arg(long, global = true)]
    run_log: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic zonally advected dataset.
    GenData(Flags<GenData>),
    /// Block-average a 721×1440 GT1 field to 180×360.
    Regrid(Flags<Regrid>),
    /// Single-step pretraining.
    Pretrain(Flags<Pretrain>),
    /// Classical multi-step autoregressive fine-tuning.
    FinetuneAr(Flags<FinetuneAr>),
    /// Relay autoregressive fine-tuning.
    FinetuneRar(Flags<FinetuneRar>),
    /// RMSE and ACC per variable and lead time.
    Evaluate(Flags<Evaluate>),
    /// Attention mask of one shifted-window geometry as CSV.
    MaskDump(Flags<MaskDump>),
    /// SVG line chart of metrics CSVs.
    Plot(Flags<Plot>),
    /// Finite-difference check of every primitive and the full model.
    Gradcheck(Flags<Gradcheck>),
}

#[derive(Args)]
struct Flags<A: Args> {
    /// JSON file of default values for this subcommand's flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    args: A,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct GenData {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grid as `HxW` [default: 16x32].
    #[arg(long)]
    grid: Option<String>,
    /// [default: 4]
    #[arg(long)]
    channels: Option<usize>,
    /// [default: 400]
    #[arg(long)]
    steps: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Number of travelling waves [default: 3].
    #[arg(long)]
    waves: Option<usize>,
    /// Red-noise standard deviation [default: 0.02].
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct Regrid {
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default, Clone)]
struct TrainFlags {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_final: Option<f64>,
    /// `cosine` or `constant`.
    #[arg(long)]
    schedule: Option<LrSchedule>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Return after this many iterations; the schedule still spans `--iters`.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Frames `START:END` of the dataset to train on [default: all].
    #[arg(long)]
    range: Option<String>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct Pretrain {
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainFlags,
    /// `toy`, `tiny` or `full`; grid and channels follow the data [default: toy].
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    mask_mode: Option<MaskMode>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    droppath: Option<f64>,
    /// Checkpoint to resume from (model, optimizer and iteration).
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct FinetuneCommon {
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainFlags,
    /// Starting checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Continue the checkpoint's optimizer and iteration count instead of
    /// starting a new stage.
    #[arg(long)]
    #[serde(default)]
    resume: bool,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct FinetuneAr {
    #[command(flatten)]
    #[serde(flatten)]
    common: FinetuneCommon,
    /// Rollout length n.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct FinetuneRar {
    #[command(flatten)]
    #[serde(flatten)]
    common: FinetuneCommon,
    /// Steps per sub-stage.
    #[arg(long)]
    k: Option<usize>,
    /// Sub-stages per sequence (M).
    #[arg(long)]
    stages: Option<usize>,
    /// `per-stage` or `per-sequence`.
    #[arg(long)]
    cadence: Option<UpdateCadence>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct Evaluate {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Lead times in hours, multiples of the data step [default: 6,12,24,48].
    #[arg(long, value_delimiter = ',')]
    leads: Option<Vec<f64>>,
    /// Climatology GT1 `[C, H, W]` in data units [default: mean of the evaluated frames].
    #[arg(long)]
    clim: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Frames `START:END` to verify on [default: all].
    #[arg(long)]
    range: Option<String>,
    /// Spacing of initialisation times, in steps [default: 1].
    #[arg(long)]
    stride: Option<usize>,
    /// Metrics CSV to compare against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Where to write normalised differences against `--baseline`.
    #[arg(long)]
    out_diff_csv: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[allow(non_snake_case)]
struct MaskDump {
    #[arg(long = "H")]
    H: Option<usize>,
    #[arg(long = "W")]
    W: Option<usize>,
    #[arg(long)]
    win: Option<usize>,
    /// [default: win/2]
    #[arg(long)]
    shift: Option<usize>,
    /// `earth` or `planar` [default: earth].
    #[arg(long)]
    mode: Option<MaskMode>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct Plot {
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<PathBuf>>,
    /// One per metrics file [default: file stems].
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct Gradcheck {
    /// `toy` or `tiny` [default: toy].
    #[arg(long)]
    preset: Option<String>,
    /// Parameter coordinates to check; every one when 0 [default: 100].
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// What a finished command reports to the run log.
#[derive(Default)]
struct Report {
    seed: u64,
    peak_live_node_count: usize,
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                print!("{e}");
                return 0;
            }
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return 2;
        }
    };
    let start = Instant::now();
    let run_log = cli.run_log.clone();
    let (result, hash, log_dir) = dispatch(cli.command);
    let code = match &result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.code(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    };
    let report = result.unwrap_or_default();
    let record = RunRecord {
        command: log_dir.0,
        config_hash: hash,
        seed: report.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        peak_live_node_count: report.peak_live_node_count,
        exit_code: code,
    };
    let path = run_log.unwrap_or_else(|| log_dir.1.join(RUNS_FILE));
    if let Err(e) = append_run_record(&path, &record) {
        eprintln!("error: {}: {}", e.code(), e);
        return if code == 0 { e.exit_code() } else { code };
    }
    code
}

/// `(result, config hash, (command name, run-log directory))`.
fn dispatch(command: Command) -> (Result<Report>, String, (String, PathBuf)) {
    macro_rules! run {
        ($name:literal, $flags:expr, $dir:expr, $exec:expr) => {{
            let resolved = resolve($flags);
            let hash = resolved
                .as_ref()
                .ok()
                .and_then(|a| config_hash(a).ok())
                .unwrap_or_default();
            let dir = resolved.as_ref().ok().map($dir).unwrap_or_else(|| PathBuf::from("."));
            (resolved.and_then($exec), hash, ($name.to_string(), dir))
        }};
    }
    match command {
        Command::GenData(f) => run!("gen-data", f, |a: &GenData| out_dir(&a.out), gen_data),
        Command::Regrid(f) => run!("regrid", f, |a: &Regrid| parent(&a.out), regrid),
        Command::Pretrain(f) => run!("pretrain", f, |a: &Pretrain| out_dir(&a.train.out), run_pretrain),
        Command::FinetuneAr(f) => run!(
            "finetune-ar",
            f,
            |a: &FinetuneAr| out_dir(&a.common.train.out),
            run_finetune_ar
        ),
        Command::FinetuneRar(f) => {
            run!(
                "finetune-rar",
                f,
                |a: &FinetuneRar| out_dir(&a.common.train.out),
                run_finetune_rar
            )
        }
        Command::Evaluate(f) => run!("evaluate", f, |a: &Evaluate| parent(&a.out_csv), evaluate),
        Command::MaskDump(f) => run!("mask-dump", f, |a: &MaskDump| parent(&a.out_csv), mask_dump),
        Command::Plot(f) => run!("plot", f, |a: &Plot| parent(&a.out), plot),
        Command::Gradcheck(f) => run!("gradcheck", f, |_: &Gradcheck| PathBuf::from("."), gradcheck),
    }
}

fn out_dir(p: &Option<PathBuf>) -> PathBuf {
    p.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn parent(p: &Option<PathBuf>) -> PathBuf {
    p.as_deref()
        .and_then(Path::parent)
        .filter(|d| !d.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Config file < `SEARTH_SEED` < flags, by overlaying JSON objects.
fn resolve<A: Args + Serialize + DeserializeOwned + Default>(flags: Flags<A>) -> Result<A> {
    let known = match serde_json::to_value(A::default())? {
        serde_json::Value::Object(m) => m,
        _ => unreachable!("argument structs serialize to objects"),
    };
    let mut merged = serde_json::Map::new();
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let serde_json::Value::Object(file) = value else {
            return Err(Error::config(format!("{}: expected a JSON object", path.display())));
        };
        for (k, v) in file {
            if !known.contains_key(&k) {
                return Err(Error::config(format!("{}: unknown key `{k}`", path.display())));
            }
            merged.insert(k, v);
        }
    }
    if known.contains_key("seed") {
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed: u64 = s
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
            merged.insert("seed".into(), seed.into());
        }
    }
    let serde_json::Value::Object(explicit) = serde_json::to_value(&flags.args)? else {
        unreachable!("argument structs serialize to objects");
    };
    for (k, v) in explicit {
        if !v.is_null() && v != serde_json::Value::Bool(false) {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(serde_json::Value::Object(merged)).map_err(|e| Error::config(e.to_string()))
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::config(format!("missing required --{flag}")))
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("grid `{s}` is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        h.trim().parse().map_err(|_| bad())?,
        w.trim().parse().map_err(|_| bad())?,
    ))
}

fn parse_range(s: Option<&str>, len: usize) -> Result<(usize, usize)> {
    let Some(s) = s else { return Ok((0, len)) };
    let bad = || Error::config(format!("range `{s}` is not START:END within 0..={len}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let a: usize = if a.is_empty() { 0 } else { a.parse().map_err(|_| bad())? };
    let b: usize = if b.is_empty() {
        len
    } else {
        b.parse().map_err(|_| bad())?
    };
    if a >= b || b > len {
        return Err(bad());
    }
    Ok((a, b))
}

fn gen_data(a: GenData) -> Result<Report> {
    let out = required(&a.out, "out")?;
    let (h, w) = parse_grid(a.grid.as_deref().unwrap_or("16x32"))?;
    let seed = a.seed.unwrap_or(0);
    let mut cfg = SynthConfig::random(
        h,
        w,
        a.channels.unwrap_or(4),
        a.steps.unwrap_or(400),
        a.waves.unwrap_or(3),
        seed,
    );
    if let Some(n) = a.noise {
        cfg.noise_amplitude = n;
    }
    let m = write_dataset(out, &cfg)?;
    println!(
        "wrote {} frames of {}x{}x{} to {}",
        m.files.len(),
        cfg.channels,
        h,
        w,
        out.display()
    );
    Ok(Report {
        seed,
        ..Report::default()
    })
}

fn regrid(a: Regrid) -> Result<Report> {
    let input = required(&a.input, "in")?;
    let out = required(&a.out, "out")?;
    match gt1::read_tensor(input)? {
        AnyTensor::F32(t) => gt1::write_tensor(out, &regrid_quarter_to_one(&t)?)?,
        AnyTensor::F64(t) => gt1::write_tensor(out, &regrid_quarter_to_one(&t)?)?,
    }
    println!("wrote {}", out.display());
    Ok(Report::default())
}

struct LoadedData {
    manifest: DataManifest,
    raw: Vec<Tensor<f64>>,
    weights: Vec<f64>,
}

fn load_data(dir: &Path) -> Result<LoadedData> {
    let (manifest, raw) = read_dataset(dir)?;
    let weights = latitude_weights(&manifest.latitudes)?;
    Ok(LoadedData { manifest, raw, weights })
}

impl LoadedData {
    fn dataset<T: Scalar>(&self, range: Option<&str>) -> Result<Dataset<T>> {
        let (a, b) = parse_range(range, self.raw.len())?;
        let stats = &self.manifest.stats;
        let frames = self.raw[a..b].iter().map(|f| stats.normalize(f).cast()).collect();
        Dataset::new(frames, self.weights.clone())
    }
}

fn train_config(f: &TrainFlags, base: TrainConfig) -> TrainConfig {
    TrainConfig {
        iters: f.iters.unwrap_or(base.iters),
        seed: f.seed.unwrap_or(base.seed),
        batch_size: f.batch.unwrap_or(base.batch_size),
        lr_initial: f.lr.unwrap_or(base.lr_initial),
        lr_final: f
            .lr_final
            .or(f.lr.filter(|_| base.schedule == LrSchedule::Constant))
            .unwrap_or(base.lr_final),
        schedule: f.schedule.unwrap_or(base.schedule),
        weight_decay: f.weight_decay.unwrap_or(base.weight_decay),
        stop_after: f.stop_after,
        ..base
    }
}

/// Desk-scale defaults for pretraining.
fn pretrain_base() -> TrainConfig {
    TrainConfig {
        iters: 2000,
        lr_initial: 1e-3,
        lr_final: 1e-5,
        weight_decay: 0.01,
        ..TrainConfig::pretrain_default()
    }
}

/// Desk-scale defaults for fine-tuning.
fn finetune_base() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        iters: 150,
        lr_initial: 3e-6,
        lr_final: 3e-6,
        schedule: LrSchedule::Constant,
        weight_decay: 0.0,
        ..TrainConfig::pretrain_default()
    }
}

fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in log {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn finish<T: Scalar>(
    out: &Path,
    state: TrainState<T>,
    outcome: TrainOutcome,
    norm: NormStats,
    tc: TrainConfig,
    stage: &str,
) -> Result<Report> {
    let seed = tc.seed;
    let last = outcome.log.last().map(|r| r.loss);
    let iter = state.iter;
    checkpoint::save(out, &Checkpoint::new(state, norm, seed, Some(tc), stage))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_loss_csv(&out.join("loss.csv"), &outcome.log)?;
    match last {
        Some(l) => println!(
            "{stage}: iteration {iter}, last loss {l:.6e}, checkpoint {}",
            out.display()
        ),
        None => println!(
            "{stage}: nothing to do at iteration {iter}, checkpoint {}",
            out.display()
        ),
    }
    Ok(Report {
        seed,
        peak_live_node_count: outcome.peak_live_nodes,
    })
}

fn run_pretrain(a: Pretrain) -> Result<Report> {
    let f = &a.train;
    let out = required(&f.out, "out")?;
    let data = load_data(required(&f.data, "data")?)?;
    let tc = train_config(f, pretrain_base());
    let precision = match &a.ckpt {
        Some(dir) => checkpoint::read_sidecar(dir)?.precision,
        None => a.precision.unwrap_or(Precision::F64),
    };
    match precision {
        Precision::F32 => pretrain_with::<f32>(&a, &data, tc, out),
        Precision::F64 => pretrain_with::<f64>(&a, &data, tc, out),
    }
}

fn pretrain_with<T: Scalar>(a: &Pretrain, data: &LoadedData, tc: TrainConfig, out: &Path) -> Result<Report> {
    let mut state = match &a.ckpt {
        Some(dir) => checkpoint::load::<T>(dir, None)?.state,
        None => {
            let mut cfg = ModelConfig::preset(a.preset.as_deref().unwrap_or("toy"))?;
            let s = &data.manifest.config;
            (cfg.n_channels, cfg.n_lat, cfg.n_lon) = (s.channels, s.n_lat, s.n_lon);
            cfg.precision = T::PRECISION;
            if let Some(m) = a.mask_mode {
                cfg.mask_mode = m;
            }
            if let Some(d) = a.droppath {
                cfg.droppath = d;
            }
            TrainState::new(Model::<T>::init(cfg, tc.seed)?)
        }
    };
    let ds = data.dataset::<T>(a.train.range.as_deref())?;
    let outcome = pretrain(&mut state, &ds, &tc)?;
    finish(out, state, outcome, data.manifest.stats.clone(), tc, "pretrain")
}

enum Finetune {
    Ar(usize),
    Rar {
        k: usize,
        stages: usize,
        cadence: UpdateCadence,
    },
}

fn run_finetune(c: &FinetuneCommon, mode: Finetune) -> Result<Report> {
    let ckpt = required(&c.ckpt, "ckpt")?;
    match checkpoint::read_sidecar(ckpt)?.precision {
        Precision::F32 => finetune_with::<f32>(c, mode),
        Precision::F64 => finetune_with::<f64>(c, mode),
    }
}

fn finetune_with<T: Scalar>(c: &FinetuneCommon, mode: Finetune) -> Result<Report> {
    let f = &c.train;
    let out = required(&f.out, "out")?;
    let data = load_data(required(&f.data, "data")?)?;
    let loaded = checkpoint::load::<T>(required(&c.ckpt, "ckpt")?, None)?;
    let tc = train_config(f, finetune_base());
    let mut state = if c.resume {
        loaded.state
    } else {
        TrainState::new(loaded.state.model)
    };
    let ds = data.dataset::<T>(f.range.as_deref())?;
    let (outcome, stage) = match mode {
        Finetune::Ar(n) => (finetune_ar(&mut state, &ds, n, &tc)?, "finetune-ar"),
        Finetune::Rar { k, stages, cadence } => (
            finetune_rar(&mut state, &ds, k, stages, cadence, &tc, None)?,
            "finetune-rar",
        ),
    };
    finish(out, state, outcome, loaded.norm, tc, stage)
}

fn run_finetune_ar(a: FinetuneAr) -> Result<Report> {
    run_finetune(&a.common, Finetune::Ar(a.steps.unwrap_or(4)))
}

fn run_finetune_rar(a: FinetuneRar) -> Result<Report> {
    let mode = Finetune::Rar {
        k: a.k.unwrap_or(4),
        stages: a.stages.unwrap_or(1),
        cadence: a.cadence.unwrap_or_default(),
    };
    run_finetune(&a.common, mode)
}

fn evaluate(a: Evaluate) -> Result<Report> {
    let ckpt = required(&a.ckpt, "ckpt")?;
    match checkpoint::read_sidecar(ckpt)?.precision {
        Precision::F32 => evaluate_with::<f32>(&a),
        Precision::F64 => evaluate_with::<f64>(&a),
    }
}

fn evaluate_with<T: Scalar>(a: &Evaluate) -> Result<Report> {
    let out_csv = required(&a.out_csv, "out-csv")?;
    let loaded = checkpoint::load::<T>(required(&a.ckpt, "ckpt")?, None)?;
    let data = load_data(required(&a.data, "data")?)?;
    let (from, to) = parse_range(a.range.as_deref(), data.raw.len())?;
    let raw = &data.raw[from..to];
    let step_hours = data.manifest.step_hours;
    let leads = a.leads.clone().unwrap_or_else(|| vec![6.0, 12.0, 24.0, 48.0]);
    let steps: Vec<usize> = leads
        .iter()
        .map(|&h| {
            let s = h / step_hours;
            if h > 0.0 && (s - s.round()).abs() < 1e-9 {
                Ok(s.round() as usize)
            } else {
                Err(Error::config(format!(
                    "lead {h} h is not a positive multiple of the {step_hours} h step"
                )))
            }
        })
        .collect::<Result<_>>()?;
    let max_lead = *steps.iter().max().ok_or_else(|| Error::config("no lead times"))?;
    let stride = a.stride.unwrap_or(1).max(1);
    let inits: Vec<usize> = (0..raw.len().saturating_sub(max_lead + 1)).step_by(stride).collect();
    if inits.is_empty() {
        return Err(Error::config(format!(
            "{} frames cannot cover a {max_lead}-step forecast",
            raw.len()
        )));
    }
    let clim = match &a.clim {
        Some(p) => Climatology {
            mean: gt1::read_tensor(p)?.to(),
            source: p.display().to_string(),
        },
        None => compute_climatology(raw, format!("frames {from}..{to}"))?,
    };
    let norm = &loaded.norm;
    let model = &loaded.state.model;
    let mut by_lead: BTreeMap<usize, (Vec<Tensor<f64>>, Vec<Tensor<f64>>)> = BTreeMap::new();
    for &s in &inits {
        let x0 = norm.normalize(&raw[s]).cast::<T>();
        let x1 = norm.normalize(&raw[s + 1]).cast::<T>();
        let preds = model.rollout(&x0, &x1, max_lead)?;
        for &l in &steps {
            let e = by_lead.entry(l).or_default();
            e.0.push(norm.denormalize(&preds[l - 1]).cast());
            e.1.push(raw[s + 1 + l].clone());
        }
    }
    let mut table = MetricsTable {
        rows: Vec::new(),
        n_init: inits.len(),
    };
    let channels = data.manifest.config.channels;
    for c in 0..channels {
        for (&l, (f, y)) in &by_lead {
            table.rows.push(MetricRow {
                variable: format!("c{c}"),
                lead_hours: l as f64 * step_hours,
                rmse: rmse(f, y, &data.weights, c)?,
                acc: acc(f, y, &clim, &data.weights, c)?.value,
            });
        }
        let series: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter(|r| r.variable == format!("c{c}"))
            .map(|r| (r.lead_hours, r.acc))
            .collect();
        if series.len() >= 2 {
            let lt = skillful_lead_time(&series, 0.6)?;
            println!(
                "c{c}: skillful lead time {:.1} h{}",
                lt.value,
                if lt.censored { " (censored)" } else { "" }
            );
        }
    }
    let file = File::create(out_csv).map_err(|e| Error::io(out_csv, e))?;
    table.write_csv(BufWriter::new(file))?;
    if let Some(base) = &a.baseline {
        let out = required(&a.out_diff_csv, "out-diff-csv")?;
        let file = File::open(base).map_err(|e| Error::io(base, e))?;
        let baseline = MetricsTable::read_csv(file)?;
        let name = base
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let diffs = table.diff_against(&baseline, &name)?;
        let file = File::create(out).map_err(|e| Error::io(out, e))?;
        write_diff_csv(&diffs, BufWriter::new(file))?;
    }
    println!(
        "evaluated {} initialisation times, wrote {}",
        inits.len(),
        out_csv.display()
    );
    Ok(Report {
        seed: loaded.sidecar.seed,
        ..Report::default()
    })
}

fn mask_dump(a: MaskDump) -> Result<Report> {
    let (h, w, win) = (*required(&a.H, "H")?, *required(&a.W, "W")?, *required(&a.win, "win")?);
    let shift = a.shift.unwrap_or(win / 2);
    let mask = earth_attention_mask(h, w, win, win, shift, shift, a.mode.unwrap_or_default())?;
    let out = required(&a.out_csv, "out-csv")?;
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    mask.write_csv(BufWriter::new(file)).map_err(|e| Error::io(out, e))?;
    println!("{} blocked pairs, wrote {}", mask.blocked_set().len(), out.display());
    Ok(Report::default())
}

fn plot(a: Plot) -> Result<Report> {
    let files = required(&a.metrics, "metrics")?;
    let labels: Vec<String> = match &a.labels {
        Some(l) if l.len() != files.len() => {
            return Err(Error::config(format!(
                "{} labels for {} metrics files",
                l.len(),
                files.len()
            )))
        }
        Some(l) => l.clone(),
        None => files
            .iter()
            .map(|p| {
                p.file_stem()
                    .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
            })
            .collect(),
    };
    let tables = files
        .iter()
        .zip(labels)
        .map(|(p, l)| {
            let f = File::open(p).map_err(|e| Error::io(p, e))?;
            Ok((l, MetricsTable::read_csv(f)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let svg = emit_plot(&tables)?;
    let out = required(&a.out, "out")?;
    std::fs::write(out, svg).map_err(|e| Error::io(out, e))?;
    println!("wrote {}", out.display());
    Ok(Report::default())
}

fn gradcheck(a: Gradcheck) -> Result<Report> {
    let seed = a.seed.unwrap_or(0);
    let config = match a.preset.as_deref().unwrap_or("toy") {
        p @ ("toy" | "tiny") => ModelConfig::preset(p)?,
        other => {
            return Err(Error::config(format!(
                "gradcheck runs on `toy` or `tiny`, not `{other}`"
            )))
        }
    };
    let mut worst = ("".to_string(), 0.0f64);
    for (name, err) in primitive_suite(seed)? {
        println!("{name:<20} {err:.3e}");
        if err > worst.1 {
            worst = (name, err);
        }
    }
    let samples = match a.samples.unwrap_or(100) {
        0 => None,
        n => Some(n),
    };
    let r = model_gradcheck(&config, samples, seed)?;
    println!(
        "{:<20} {:.3e} (worst coordinate {})",
        "model", r.max_rel_error, r.worst_index
    );
    if r.max_rel_error > worst.1 {
        worst = ("model".into(), r.max_rel_error);
    }
    if worst.1 > GRADCHECK_TOLERANCE {
        return Err(Error::GradCheck(format!(
            "`{}` relative error {:.3e} > {GRADCHECK_TOLERANCE:e}",
            worst.0, worst.1
        )));
    }
    Ok(Report {
        seed,
        ..Report::default()
    })
}
