//! Multi-run experiments: configuration, presets, CSV curves, median
//! aggregation and per-run checkpoints.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use crate::model::ModelSpec;
use crate::ntm::{ClipTarget, InitScheme, NtmConfig};
use crate::tasks::{Range, TaskConfig, TaskKind};
use crate::training::{CurvePoint, CurveSink, TrainConfig, TrainError, Trainer};

pub const CURVE_HEADER: &str = "step,run_id,task,model,init_scheme,seed,val_loss,val_bits_per_seq,wall_ms";
pub const AGGREGATE_HEADER: &str = "step,median_val_bits_per_seq,median_val_loss,runs_alive";
pub const SUMMARY_HEADER: &str = "run_id,seed,status,steps_completed,detail";
/// Caps the number of concurrently executing runs.
pub const THREADS_ENV: &str = "NTM_LAB_THREADS";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid value for {field}: {detail}")]
    Field { field: String, detail: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("line {line}: expected key=value, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown preset {0:?} (expected paper or desk)")]
    UnknownPreset(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn field_err(field: &str, detail: impl Into<String>) -> ExperimentError {
    ExperimentError::Field {
        field: field.to_string(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ntm,
    Lstm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ntm => "ntm",
            ModelKind::Lstm => "lstm",
        }
    }
}

impl FromStr for ModelKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ntm" => Ok(ModelKind::Ntm),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(field_err("model", format!("{other:?} is not ntm or lstm"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Full-size settings: 128x20 memory, 100-unit controller, 3x256 LSTM.
    Paper,
    /// Small settings that train on one CPU core in minutes.
    Desk,
}

impl FromStr for Preset {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(ExperimentError::UnknownPreset(other.to_string())),
        }
    }
}

/// Everything that defines a set of training runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub task: TaskKind,
    pub model: ModelKind,
    pub init_scheme: Option<InitScheme>,
    pub num_runs: usize,
    pub base_seed: u64,

    pub bits: usize,
    pub length: Range,
    pub repeats: Range,
    pub items: Range,

    pub memory_slots: usize,
    pub cell_width: usize,
    pub read_heads: usize,
    pub write_heads: usize,
    pub shift_range: usize,
    pub clip_bound: f64,
    pub clip_target: ClipTarget,
    pub controller_units: usize,
    pub controller_layers: usize,
    pub lstm_layers: usize,
    pub lstm_units: usize,

    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_examples: usize,
}

impl ExperimentSpec {
    pub fn preset(preset: Preset, task: TaskKind, model: ModelKind) -> Self {
        let t = TaskConfig::for_kind(task);
        let paper = ExperimentSpec {
            task,
            model,
            init_scheme: None,
            num_runs: 10,
            base_seed: 0,
            bits: t.bits,
            length: t.length,
            repeats: t.repeats,
            items: t.items,
            memory_slots: 128,
            cell_width: 20,
            read_heads: 1,
            write_heads: 1,
            shift_range: 3,
            clip_bound: 20.0,
            clip_target: ClipTarget::Projection,
            controller_units: 100,
            controller_layers: 1,
            lstm_layers: 3,
            lstm_units: 256,
            learning_rate: 0.001,
            max_grad_norm: 50.0,
            batch_size: 32,
            total_steps: 100_000,
            eval_every: 200,
            eval_examples: 640,
        };
        match preset {
            Preset::Paper => paper,
            Preset::Desk => {
                ExperimentSpec {
                    bits: 4,
                    length: Range::new(1, 5),
                    memory_slots: 32,
                    cell_width: 12,
                    controller_units: 64,
                    lstm_layers: 2,
                    lstm_units: 64,
                    batch_size: 16,
                    total_steps: 20_000,
                    num_runs: 5,
                    ..paper
                }
            }
        }
    }

    /// Sets one field from its textual `key=value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ExperimentError> {
            v.parse().map_err(|_| field_err(key, format!("cannot parse {v:?}")))
        }
        fn range(key: &str, v: &str) -> Result<Range, ExperimentError> {
            let (a, b) = v
                .split_once("..")
                .ok_or_else(|| field_err(key, format!("expected MIN..MAX, found {v:?}")))?;
            Ok(Range::new(num(key, a.trim())?, num(key, b.trim())?))
        }
        match key {
            "task" => self.task = value.parse().map_err(|e: crate::tasks::TaskError| field_err(key, e.to_string()))?,
            "model" => self.model = value.parse()?,
            "init_scheme" | "init" => {
                self.init_scheme = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(value.parse().map_err(|e: crate::ModelError| field_err(key, e.to_string()))?)
                }
            }
            "num_runs" | "runs" => self.num_runs = num(key, value)?,
            "base_seed" | "seed" => self.base_seed = num(key, value)?,
            "bits" => self.bits = num(key, value)?,
            "length" => self.length = range(key, value)?,
            "repeats" => self.repeats = range(key, value)?,
            "items" => self.items = range(key, value)?,
            "memory_slots" => self.memory_slots = num(key, value)?,
            "cell_width" => self.cell_width = num(key, value)?,
            "read_heads" => self.read_heads = num(key, value)?,
            "write_heads" => self.write_heads = num(key, value)?,
            "shift_range" => self.shift_range = num(key, value)?,
            "clip_bound" => self.clip_bound = num(key, value)?,
            "clip_target" => {
                self.clip_target = match value {
                    "projection" => ClipTarget::Projection,
                    "hidden" => ClipTarget::Hidden,
                    other => return Err(field_err(key, format!("{other:?} is not projection or hidden"))),
                }
            }
            "controller_units" => self.controller_units = num(key, value)?,
            "controller_layers" => self.controller_layers = num(key, value)?,
            "lstm_layers" => self.lstm_layers = num(key, value)?,
            "lstm_units" => self.lstm_units = num(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "max_grad_norm" => self.max_grad_norm = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "total_steps" | "steps" => self.total_steps = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "eval_examples" => self.eval_examples = num(key, value)?,
            other => return Err(ExperimentError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file. Blank lines and `#` comments are
    /// ignored.
    pub fn apply_config_text(&mut self, text: &str) -> Result<(), ExperimentError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ExperimentError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Renders every field as `key = value` lines accepted by
    /// [`apply_config_text`](Self::apply_config_text).
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let init = self.init_scheme.map_or("none", InitScheme::as_str);
        let clip = match self.clip_target {
            ClipTarget::Projection => "projection",
            ClipTarget::Hidden => "hidden",
        };
        let _ = writeln!(s, "task = {}", self.task);
        let _ = writeln!(s, "model = {}", self.model.as_str());
        let _ = writeln!(s, "init_scheme = {init}");
        let _ = writeln!(s, "num_runs = {}", self.num_runs);
        let _ = writeln!(s, "base_seed = {}", self.base_seed);
        let _ = writeln!(s, "bits = {}", self.bits);
        let _ = writeln!(s, "length = {}", self.length);
        let _ = writeln!(s, "repeats = {}", self.repeats);
        let _ = writeln!(s, "items = {}", self.items);
        let _ = writeln!(s, "memory_slots = {}", self.memory_slots);
        let _ = writeln!(s, "cell_width = {}", self.cell_width);
        let _ = writeln!(s, "read_heads = {}", self.read_heads);
        let _ = writeln!(s, "write_heads = {}", self.write_heads);
        let _ = writeln!(s, "shift_range = {}", self.shift_range);
        let _ = writeln!(s, "clip_bound = {}", self.clip_bound);
        let _ = writeln!(s, "clip_target = {clip}");
        let _ = writeln!(s, "controller_units = {}", self.controller_units);
        let _ = writeln!(s, "controller_layers = {}", self.controller_layers);
        let _ = writeln!(s, "lstm_layers = {}", self.lstm_layers);
        let _ = writeln!(s, "lstm_units = {}", self.lstm_units);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "max_grad_norm = {}", self.max_grad_norm);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "eval_examples = {}", self.eval_examples);
        s
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        match (self.model, self.init_scheme) {
            (ModelKind::Ntm, None) => return Err(field_err("init_scheme", "required when model=ntm")),
            (ModelKind::Lstm, Some(_)) => return Err(field_err("init_scheme", "only valid when model=ntm")),
            _ => {}
        }
        if self.num_runs == 0 {
            return Err(field_err("num_runs", "must be at least 1"));
        }
        self.train_config(0).validate().map_err(|e| field_err("train", e.to_string()))?;
        if let ModelSpec::Ntm { ntm, .. } = self.model_spec() {
            ntm.validate().map_err(|e| field_err("ntm", e.to_string()))?;
        }
        Ok(())
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            kind: self.task,
            bits: self.bits,
            length: self.length,
            repeats: self.repeats,
            items: self.items,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        match self.model {
            ModelKind::Ntm => ModelSpec::Ntm {
                ntm: NtmConfig {
                    memory_slots: self.memory_slots,
                    cell_width: self.cell_width,
                    read_heads: self.read_heads,
                    write_heads: self.write_heads,
                    shift_range: self.shift_range,
                    init_scheme: self.init_scheme.unwrap_or(InitScheme::Constant),
                    clip_bound: self.clip_bound,
                    clip_target: self.clip_target,
                },
                controller_units: self.controller_units,
                controller_layers: self.controller_layers,
            },
            ModelKind::Lstm => ModelSpec::Lstm {
                layers: self.lstm_layers,
                units: self.lstm_units,
            },
        }
    }

    pub fn seed_for_run(&self, run: usize) -> u64 {
        self.base_seed + run as u64
    }

    pub fn train_config(&self, run: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            max_grad_norm: self.max_grad_norm,
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            eval_every: self.eval_every,
            eval_examples: self.eval_examples,
            seed: self.seed_for_run(run),
            model: self.model_spec(),
            task: self.task_config(),
        }
    }
}

/// Writes one CSV row per curve point, flushing after each so an interrupted
/// run leaves a parseable prefix.
pub struct CsvCurveSink {
    out: BufWriter<File>,
    prefix: String,
}

impl CsvCurveSink {
    pub fn create(path: &Path, spec: &ExperimentSpec, run: usize) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CURVE_HEADER}")?;
        out.flush()?;
        let init = spec.init_scheme.map_or("none", InitScheme::as_str);
        let prefix = format!(
            "{run},{},{},{init},{}",
            spec.task,
            spec.model.as_str(),
            spec.seed_for_run(run)
        );
        Ok(CsvCurveSink { out, prefix })
    }
}

impl CurveSink for CsvCurveSink {
    fn record(&mut self, p: &CurvePoint) -> io::Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{}",
            p.step, self.prefix, p.val_loss, p.val_bits_per_seq, p.wall_ms
        )?;
        self.out.flush()
    }
}

/// Median of a non-empty list; the mean of the two middle values for even
/// lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatePoint {
    pub step: u64,
    pub median_val_bits_per_seq: f64,
    pub median_val_loss: f64,
    pub runs_alive: usize,
}

/// Per-step medians over the runs that recorded that step.
pub fn aggregate_curves(curves: &[Vec<CurvePoint>]) -> Vec<AggregatePoint> {
    let mut steps: Vec<u64> = curves.iter().flatten().map(|p| p.step).collect();
    steps.sort_unstable();
    steps.dedup();
    steps
        .into_iter()
        .map(|step| {
            let alive: Vec<&CurvePoint> = curves.iter().filter_map(|c| c.iter().find(|p| p.step == step)).collect();
            let bits: Vec<f64> = alive.iter().map(|p| p.val_bits_per_seq).collect();
            let loss: Vec<f64> = alive.iter().map(|p| p.val_loss).collect();
            AggregatePoint {
                step,
                median_val_bits_per_seq: median(&bits),
                median_val_loss: median(&loss),
                runs_alive: alive.len(),
            }
        })
        .collect()
}

pub fn write_aggregate(path: &Path, points: &[AggregatePoint]) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{AGGREGATE_HEADER}")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{}",
            p.step, p.median_val_bits_per_seq, p.median_val_loss, p.runs_alive
        )?;
    }
    out.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run_id: usize,
    pub seed: u64,
    pub status: RunStatus,
    pub steps_completed: u64,
    pub curve: Vec<CurvePoint>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub runs: Vec<RunResult>,
    pub aggregate: Vec<AggregatePoint>,
}

impl ExperimentReport {
    pub fn all_completed(&self) -> bool {
        self.runs.iter().all(|r| r.status == RunStatus::Completed)
    }
}

pub fn curve_path(out_dir: &Path, run: usize) -> PathBuf {
    out_dir.join(format!("run_{run:02}.csv"))
}

pub fn checkpoint_path(out_dir: &Path, run: usize) -> PathBuf {
    out_dir.join(format!("run_{run:02}.ckpt"))
}

/// Number of concurrent runs: `requested`, capped by `NTM_LAB_THREADS`.
pub fn effective_jobs(requested: usize) -> usize {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok());
    let jobs = match cap {
        Some(c) if c > 0 => requested.min(c),
        _ => requested,
    };
    jobs.max(1)
}

fn execute_run(spec: &ExperimentSpec, run: usize, out_dir: &Path) -> Result<RunResult, ExperimentError> {
    let cfg = spec.train_config(run);
    let mut sink = CsvCurveSink::create(&curve_path(out_dir, run), spec, run)?;
    let total = cfg.total_steps;
    let mut trainer = Trainer::new(cfg)?;
    let outcome = trainer.run_until(total, &mut sink);
    let (status, checkpoint) = match outcome {
        Ok(()) => {
            let path = checkpoint_path(out_dir, run);
            let ckpt = Checkpoint {
                config: trainer.config().clone(),
                state: trainer.state(),
            };
            save_checkpoint(&path, &ckpt)?;
            (RunStatus::Completed, Some(path))
        }
        Err(e @ TrainError::NonFinite { .. }) => (RunStatus::Failed(e.to_string()), None),
        Err(e) => return Err(e.into()),
    };
    Ok(RunResult {
        run_id: run,
        seed: spec.seed_for_run(run),
        status,
        steps_completed: trainer.step(),
        curve: trainer.curve().to_vec(),
        checkpoint,
    })
}

/// Runs every seed of `spec` with up to `jobs` runs in flight, then writes
/// `aggregate.csv` and `summary.csv` into `out_dir`.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path, jobs: usize) -> Result<ExperimentReport, ExperimentError> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("experiment.cfg"), spec.to_config_text())?;

    let jobs = effective_jobs(jobs).min(spec.num_runs);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<RunResult, ExperimentError>>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let run = next.fetch_add(1, Ordering::SeqCst);
                if run >= spec.num_runs {
                    break;
                }
                let r = execute_run(spec, run, out_dir);
                results.lock().expect("results lock").push(r);
            });
        }
    });
    let mut runs = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    runs.sort_by_key(|r| r.run_id);

    let curves: Vec<Vec<CurvePoint>> = runs.iter().map(|r| r.curve.clone()).collect();
    let aggregate = aggregate_curves(&curves);
    write_aggregate(&out_dir.join("aggregate.csv"), &aggregate)?;

    let mut summary = BufWriter::new(File::create(out_dir.join("summary.csv"))?);
    writeln!(summary, "{SUMMARY_HEADER}")?;
    for r in &runs {
        let (status, detail) = match &r.status {
            RunStatus::Completed => ("completed", String::new()),
            RunStatus::Failed(msg) => ("failed", msg.replace(',', ";")),
        };
        writeln!(summary, "{},{},{status},{},{detail}", r.run_id, r.seed, r.steps_completed)?;
    }
    summary.flush()?;
    Ok(ExperimentReport { runs, aggregate })
}
