//! Thin CLI over the library: train / eval / finetune / ablate / verify.
//! All real work lives in [`vusfa::commands`]; this binary only parses
//! flags, resolves the config and prints summaries.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vusfa::commands::{self, CommandError};
use vusfa::config::{parse_config, Overrides};
use vusfa::model::Variant;

#[derive(Parser)]
#[command(
    name = "vusfa",
    about = "Goal-conditioned transfer RL on gridworlds: universal successor features, successor-feature-dependent policies and a variational siamese bottleneck, trained with asynchronous advantage actor-critic."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (flat `key = value` with sections); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Agent variant: GVF, USFA, USFA_SFDP or VUSFA.
    #[arg(long)]
    variant: Option<String>,
    /// Base seed for initialization, workers and evaluation.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of asynchronous workers.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (falls back to $VUSFA_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to evaluate, fine-tune or resume from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scene manifest (built-in four-scene world when absent).
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Single-worker fully deterministic mode.
    #[arg(long)]
    strict: bool,
    /// Use the literal pseudocode return increments (comparison runs).
    #[arg(long = "alg1-literal")]
    alg1_literal: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant on the scene set.
    Train(Common),
    /// Zero-shot success table of a checkpoint over all states, with the
    /// random-walk floor.
    Eval(Common),
    /// Fine-tune a checkpoint on new goals and record adaptation curves.
    Finetune(Common),
    /// Train and evaluate all four variants under identical seeds.
    Ablate(Common),
    /// Run the invariant/oracle suite and print one line per check.
    Verify(Common),
}

fn overrides_of(common: &Common) -> Result<Overrides, String> {
    let variant = match &common.variant {
        Some(s) => Some(
            Variant::parse(s)
                .ok_or_else(|| format!("unknown variant {s:?}; expected GVF, USFA, USFA_SFDP or VUSFA"))?,
        ),
        None => None,
    };
    Ok(Overrides {
        variant,
        seed: common.seed,
        workers: common.workers,
        out: common.out.clone(),
        checkpoint: common.checkpoint.clone(),
        scenes: common.scenes.clone(),
        strict: common.strict,
        alg1_literal: common.alg1_literal,
    })
}

fn run(command: Command) -> Result<ExitCode, String> {
    let common = match &command {
        Command::Train(c)
        | Command::Eval(c)
        | Command::Finetune(c)
        | Command::Ablate(c)
        | Command::Verify(c) => c,
    };
    let overrides = overrides_of(common)?;
    let cfg = parse_config(common.config.as_deref(), &overrides).map_err(|e| e.to_string())?;
    let describe = |e: CommandError| e.to_string();

    match command {
        Command::Train(_) => {
            let s = commands::cmd_train(&cfg).map_err(describe)?;
            println!(
                "trained {} for {} steps ({} episodes, {} segments discarded)",
                cfg.variant, s.steps, s.episodes, s.discarded_segments
            );
            println!("checkpoint: {}", s.checkpoint.display());
            println!("artifacts:  {}", s.out_dir.display());
        }
        Command::Eval(_) => {
            let s = commands::cmd_eval(&cfg).map_err(describe)?;
            println!(
                "zero-shot success {:.2}% over {} episodes (random floor {:.2}%)",
                100.0 * s.table.aggregate_rate(),
                s.table.total_episodes(),
                100.0 * s.random.aggregate_rate()
            );
            for row in &s.table.rows {
                println!(
                    "  {:<12} {:>6.2}%  ({} trained / {} states)",
                    row.scene_name,
                    100.0 * row.rate(),
                    row.trained_states,
                    row.total_states
                );
            }
            if s.checkpoint_hash_before == s.checkpoint_hash_after {
                println!("checkpoint untouched (sha256 {})", &s.checkpoint_hash_before[..12]);
            } else {
                return Err("evaluation modified the checkpoint file".to_string());
            }
            println!("artifacts:  {}", s.out_dir.display());
        }
        Command::Finetune(_) => {
            let s = commands::cmd_finetune(&cfg).map_err(describe)?;
            for c in &s.series.curves {
                let last = c.smoothed.last().map(|&(_, m, _)| m);
                println!(
                    "seed {}: initial mean length {:.1}, final smoothed {}",
                    c.seed,
                    c.initial_mean,
                    last.map_or("n/a".to_string(), |m| format!("{m:.1}"))
                );
            }
            println!("artifacts:  {}", s.out_dir.display());
        }
        Command::Ablate(_) => {
            let s = commands::cmd_ablate(&cfg).map_err(describe)?;
            println!("zero-shot success by variant (random floor {:.2}%):", 100.0 * s.random.aggregate_rate());
            for t in &s.tables {
                println!("  {:<10} {:>6.2}%", t.model, 100.0 * t.aggregate_rate());
            }
            println!("artifacts:  {}", s.out_dir.display());
        }
        Command::Verify(_) => {
            let ok = commands::cmd_verify(&cfg, &mut std::io::stdout()).map_err(describe)?;
            return Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
