use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ntm_lab::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use ntm_lab::experiment::{run_experiment, ExperimentSpec, ModelKind, Preset, RunStatus};
use ntm_lab::tasks::{generate, write_jsonl, TaskConfig, TaskKind};
use ntm_lab::training::{evaluate, CurvePoint, CurveSink, Trainer};

#[derive(Parser)]
#[command(name = "ntm-lab", version, about = "Neural Turing Machine training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more seeds and write learning curves.
    Train(TrainArgs),
    /// Evaluate a checkpoint on fresh episodes.
    Eval(EvalArgs),
    /// Dump generated episodes as JSON lines.
    Gen(GenArgs),
    /// Continue a run from a checkpoint.
    Resume(ResumeArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Memory initialization scheme (ntm only): constant, learned or random.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, default_value = "paper")]
    preset: String,
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Concurrent runs, capped by NTM_LAB_THREADS.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Any other field as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Must match the task the checkpoint was trained on.
    #[arg(long)]
    task: Option<String>,
    #[arg(long, default_value_t = 640)]
    examples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ResumeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Step count to train up to.
    #[arg(long)]
    steps: u64,
    /// Where to write the new checkpoint; overwrites the input when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct StdoutSink;

impl CurveSink for StdoutSink {
    fn record(&mut self, p: &CurvePoint) -> io::Result<()> {
        println!(
            "step {:>7}  val_loss {:.6}  val_bits_per_seq {:.4}",
            p.step, p.val_loss, p.val_bits_per_seq
        );
        Ok(())
    }
}

fn file_key<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .filter_map(|l| l.split('#').next()?.split_once('='))
        .filter(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .last()
}

fn build_spec(args: &TrainArgs) -> Result<ExperimentSpec> {
    let file_text = match &args.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let from_file = |key: &str| file_text.as_deref().and_then(|t| file_key(t, key));
    let task: TaskKind = args
        .task
        .as_deref()
        .or_else(|| from_file("task"))
        .unwrap_or("copy")
        .parse()?;
    let model: ModelKind = args
        .model
        .as_deref()
        .or_else(|| from_file("model"))
        .unwrap_or("ntm")
        .parse()?;
    let preset: Preset = args.preset.parse()?;

    let mut spec = ExperimentSpec::preset(preset, task, model);
    if let Some(text) = &file_text {
        spec.apply_config_text(text)?;
    }
    spec.task = task;
    spec.model = model;
    if let Some(init) = &args.init {
        spec.set("init_scheme", init)?;
    }
    if let Some(runs) = args.runs {
        spec.num_runs = runs;
    }
    if let Some(seed) = args.seed {
        spec.base_seed = seed;
    }
    if let Some(steps) = args.steps {
        spec.total_steps = steps;
    }
    for kv in &args.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {kv:?}");
        };
        spec.set(k.trim(), v.trim())?;
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_train(args: TrainArgs) -> Result<bool> {
    let spec = build_spec(&args)?;
    let report = run_experiment(&spec, &args.out, args.jobs)?;
    for r in &report.runs {
        let last = r.curve.last().map(|p| p.val_bits_per_seq);
        match &r.status {
            RunStatus::Completed => {
                println!("run {} (seed {}): completed {} steps, final bits/seq {:?}", r.run_id, r.seed, r.steps_completed, last)
            }
            RunStatus::Failed(msg) => println!("run {} (seed {}): FAILED after {} steps: {msg}", r.run_id, r.seed, r.steps_completed),
        }
    }
    println!("results in {}", args.out.display());
    Ok(report.all_completed())
}

fn cmd_eval(args: EvalArgs) -> Result<bool> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let task = ckpt.config.task.clone();
    if let Some(name) = &args.task {
        let kind: TaskKind = name.parse()?;
        if kind != task.kind {
            bail!("checkpoint was trained on {}, not {kind}", task.kind);
        }
    }
    let model = ckpt.config.model.build(task.input_dim(), task.output_dim())?;
    if !model.layout().matches(&ckpt.state.params) {
        bail!("checkpoint parameters do not match the model layout");
    }
    let eval = evaluate(model.as_ref(), &ckpt.state.params, &task, args.examples, args.seed)?;
    println!("task {}  step {}  examples {}", task.kind, ckpt.state.step, args.examples);
    println!("val_loss {:.6}  val_bits_per_seq {:.4}", eval.loss, eval.bits_per_seq);
    Ok(true)
}

fn cmd_gen(args: GenArgs) -> Result<bool> {
    let cfg = TaskConfig::for_kind(args.task.parse()?);
    let episodes: Vec<_> = (0..args.count as u64).map(|i| generate(&cfg, args.seed + i)).collect();
    match &args.out {
        Some(p) => {
            let mut out = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            write_jsonl(&mut out, &episodes)?;
            out.flush()?;
        }
        None => write_jsonl(io::stdout().lock(), &episodes)?,
    }
    Ok(true)
}

fn cmd_resume(args: ResumeArgs) -> Result<bool> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut trainer = Trainer::resume(ckpt.config, ckpt.state)?;
    let result = trainer.run_until(args.steps, &mut StdoutSink);
    let out = args.out.unwrap_or(args.checkpoint);
    if let Err(e) = result {
        eprintln!("training aborted at step {}: {e}", trainer.step());
        return Ok(false);
    }
    let ckpt = Checkpoint {
        config: trainer.config().clone(),
        state: trainer.state(),
    };
    save_checkpoint(&out, &ckpt)?;
    println!("checkpoint at step {} written to {}", trainer.step(), out.display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Resume(a) => cmd_resume(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
