use std::path::PathBuf;
use std::process::ExitCode;

use aesformer::config::{OracleKind, RunConfig};
use aesformer::runner::{self, Run, RunError};
use aesformer::PromptId;
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

/// Desk-scale aesthetic reconstruction pipeline.
///
/// Exit codes: 0 ok, 1 other error, 2 invalid config, 3 missing or
/// mismatched checkpoint, 4 reward oracle unavailable.
#[derive(Parser)]
#[command(name = "aesformer", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML run config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (overrides `out_dir`).
    #[arg(long = "run-dir", global = true)]
    run_dir: Option<PathBuf>,
    /// Top-level seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic tutorial-video corpus.
    GenVideos {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the mining funnel and write train/test pairs.
    MineCorpus {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Directory for the pair files (default: <run-dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Quality threshold.
        #[arg(long)]
        tq: Option<f64>,
        /// Aesthetic threshold.
        #[arg(long)]
        ta: Option<f64>,
        #[arg(long)]
        test_count: Option<usize>,
    },
    /// Supervised warm start of the planner.
    TrainSft {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// GRPO fine-tuning from the SFT checkpoint.
    TrainGrpo {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long, value_parser = parse_oracle)]
        oracle: Option<OracleKind>,
        /// Remote oracle URL; credentials come from AESFORMER_ORACLE_TOKEN.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Train the action-conditioned flow editor.
    TrainEditor {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Edit one scene with a given plan (or the trained planner's plan).
    Edit {
        #[arg(long)]
        prompt: u32,
        /// Plan file: token line or JSON segment list.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise evaluation of the trained vs untrained editor.
    Evaluate {
        #[arg(long)]
        max_items: Option<usize>,
        /// CSV with columns method,human_preference.
        #[arg(long)]
        human: Option<PathBuf>,
    },
    /// Ordered vs dimension-shuffled plans.
    AblateShuffle {
        #[arg(long)]
        max_items: Option<usize>,
    },
}

fn parse_oracle(s: &str) -> Result<OracleKind, String> {
    match s {
        "mock" => Ok(OracleKind::Mock),
        "remote" => Ok(OracleKind::Remote),
        _ => Err(format!("unknown oracle `{s}` (expected mock or remote)")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_overrides(cfg: &mut RunConfig, g: &Global, cmd: &Cmd) {
    set(&mut cfg.out_dir, g.run_dir.clone());
    set(&mut cfg.seed, g.seed);
    match cmd {
        Cmd::MineCorpus { tq, ta, test_count, .. } => {
            set(&mut cfg.mining.thresholds.quality, *tq);
            set(&mut cfg.mining.thresholds.aesthetic, *ta);
            set(&mut cfg.mining.test_count, *test_count);
        }
        Cmd::TrainSft { steps, lr } => {
            set(&mut cfg.sft.steps, *steps);
            set(&mut cfg.sft.lr, *lr);
        }
        Cmd::TrainGrpo {
            steps,
            beta,
            lr,
            group_size,
            oracle,
            endpoint,
        } => {
            set(&mut cfg.grpo.steps, *steps);
            set(&mut cfg.grpo.beta, *beta);
            set(&mut cfg.grpo.lr, *lr);
            set(&mut cfg.grpo.group_size, *group_size);
            set(&mut cfg.oracle.kind, *oracle);
            set(&mut cfg.oracle.remote.endpoint, endpoint.clone());
        }
        Cmd::TrainEditor { steps, lr } => {
            set(&mut cfg.editor.steps, *steps);
            set(&mut cfg.editor.lr, *lr);
        }
        Cmd::Evaluate { max_items, .. } | Cmd::AblateShuffle { max_items } => {
            set(&mut cfg.eval.max_items, *max_items);
        }
        Cmd::GenVideos { .. } | Cmd::Edit { .. } => {}
    }
}

fn dispatch(run: &Run, cmd: Cmd) -> Result<(), RunError> {
    match cmd {
        Cmd::GenVideos { out } => runner::gen_videos(run, out).map(drop),
        Cmd::MineCorpus { input, out, .. } => runner::mine(run, input, out).map(drop),
        Cmd::TrainSft { .. } => runner::train_sft_cmd(run).map(drop),
        Cmd::TrainGrpo { .. } => runner::train_grpo_cmd(run).map(drop),
        Cmd::TrainEditor { .. } => runner::train_editor_cmd(run).map(drop),
        Cmd::Edit { prompt, plan, out } => {
            let o = runner::edit(run, PromptId(prompt), plan, out)?;
            println!("{}", serde_json::to_string(&o)?);
            Ok(())
        }
        Cmd::Evaluate { human, .. } => runner::evaluate_cmd(run, human).map(drop),
        Cmd::AblateShuffle { .. } => runner::ablate_shuffle(run).map(drop),
    }
}

fn real_main(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p).map_err(RunError::from)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.global, &cli.cmd);
    let run = Run::open(cfg, cli.global.quiet)?;
    dispatch(&run, cli.cmd).context("command failed")?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<RunError>().map_or(1, RunError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
