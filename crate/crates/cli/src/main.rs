//! `fiber`: data generation, two-stage pre-training, fine-tuning, evaluation
//! and checkpoint inspection.
//!
//! Exit codes: 0 success, 2 configuration or stage error, 3 data error,
//! 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fiber_core::checkpoint::{file_hash, Checkpoint};
use fiber_core::pipeline::{self, RunOutput, DATA_FILE};
use fiber_core::{Config, Error, Task};

#[derive(Parser)]
#[command(name = "fiber", version, about = "Fusion-in-the-backbone vision-language toy model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the `steps` key.
    #[arg(long)]
    steps: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to `<out>/data.jsonl`.
    GenData {
        /// Dataset seed (defaults to the config's `data.seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of records (defaults to the config's `data.count`).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coarse-grained pre-training on image-caption pairs.
    PretrainCoarse {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-grained pre-training on grounded captions.
    PretrainFine {
        #[command(flatten)]
        common: Common,
        /// Coarse checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fine-tune a task head.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Task,
        /// Pre-training checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Task,
        /// Checkpoint to evaluate; omitted means an untrained model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Print a checkpoint's header and tensor manifest.
    InspectCheckpoint {
        path: PathBuf,
    },
}

/// Loads the config: subcommand defaults first, then the file, then flags.
fn load_config(defaults: &str, common: Option<&Common>, file: Option<&Path>) -> Result<Config, Error> {
    let mut text = String::from(defaults);
    if let Some(path) = file {
        let body = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        text.push_str(&body);
        text.push('\n');
    }
    if let Some(c) = common {
        if let Some(seed) = c.seed {
            text.push_str(&format!("seed = {seed}\n"));
        }
        if let Some(steps) = c.steps {
            text.push_str(&format!("steps = {steps}\n"));
        }
    }
    Config::parse(&text)
}

fn load_checkpoint(path: Option<&PathBuf>) -> Result<Option<Checkpoint>, Error> {
    path.map(|p| Checkpoint::load(p)).transpose()
}

fn print_run(out: &RunOutput) {
    for (k, v) in &out.summary {
        println!("{k} = {v}");
    }
    if let Some(r) = &out.load_report {
        println!("init.loaded = {}", r.loaded.len());
        println!("init.fresh = {}", r.fresh.join(","));
    }
    println!("checkpoint = {}", out.checkpoint_path.display());
    println!("sha256 = {}", out.checkpoint_hash);
}

fn inspect(path: &Path) -> Result<(), Error> {
    use std::fmt::Write as _;
    use std::io::Write as _;
    let ck = Checkpoint::load(path)?;
    let mut s = String::new();
    let _ = writeln!(s, "stage = {}", ck.stage);
    let _ = writeln!(s, "provenance = {}", ck.provenance.join(" -> "));
    let _ = writeln!(s, "step = {}", ck.step);
    let _ = writeln!(s, "optimizer_step = {}", ck.optimizer.as_ref().map_or("none".to_string(), |o| o.step.to_string()));
    let _ = writeln!(s, "sha256 = {}", file_hash(path)?);
    let _ = writeln!(s, "[config]\n{}[tensors]", ck.config.to_text());
    let mut total = 0usize;
    for e in ck.manifest()? {
        if !e.name.starts_with("optim.") {
            total += e.shape.iter().product::<usize>();
        }
        let _ = writeln!(s, "{}\t{}\t{:?}\t{}\t{}", e.name, e.dtype, e.shape, e.offset, e.group);
    }
    let _ = writeln!(s, "parameters = {total}");
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = std::io::stdout().lock().write_all(s.as_bytes());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { seed, count, config, out } => {
            let cfg = load_config("", None, config.as_deref())?;
            let path = out.join(DATA_FILE);
            let hash = pipeline::run_gen_data(seed.unwrap_or(cfg.data_seed), count.unwrap_or(cfg.data_count), &path)?;
            println!("data = {}", path.display());
            println!("sha256 = {hash}");
        }
        Command::PretrainCoarse { common } => {
            let cfg = load_config("stage = coarse\n", Some(&common), common.config.as_deref())?;
            print_run(&pipeline::run_pretrain_coarse(&cfg, &common.out)?);
        }
        Command::PretrainFine { common, init } => {
            let cfg = load_config("stage = fine\nsteps = 3000\n", Some(&common), common.config.as_deref())?;
            let ck = load_checkpoint(init.as_ref())?;
            print_run(&pipeline::run_pretrain_fine(&cfg, ck.as_ref(), &common.out)?);
        }
        Command::Finetune { common, task, init } => {
            let stage = task.required_stage().as_str();
            let cfg = load_config(&format!("stage = {stage}\ntask = {task}\n"), Some(&common), common.config.as_deref())?;
            let ck = load_checkpoint(init.as_ref())?;
            print_run(&pipeline::run_finetune(task, &cfg, ck.as_ref(), &common.out)?);
        }
        Command::Eval { common, task, init } => {
            let stage = task.required_stage().as_str();
            let cfg = load_config(&format!("stage = {stage}\ntask = {task}\n"), Some(&common), common.config.as_deref())?;
            let ck = load_checkpoint(init.as_ref())?;
            for (k, v) in pipeline::run_eval(task, &cfg, ck.as_ref(), &common.out)? {
                println!("{k} = {v}");
            }
        }
        Command::InspectCheckpoint { path } => inspect(&path)?,
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Stage(_) => 2,
        Error::Data(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fiber: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
