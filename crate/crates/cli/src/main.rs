use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mrgrpo::data::Stage;
use mrgrpo::harness::{
    eval_checkpoint, run_ablation, run_rl, run_sft, selftest, EvalRecord, RunConfig, RunOptions,
    SelfChecks, Variant, CHECKPOINT_FILE,
};

/// Train and evaluate toy flow-matching policies with multi-reward GRPO.
#[derive(Parser)]
#[command(name = "mrgrpo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; without one the desk preset is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// full, no_sft_aux, no_velocity_kl or no_rewardwise_norm.
    #[arg(long)]
    variant: Option<String>,
    /// Overrides the step count of the stage being run.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised flow-matching training.
    Sft {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier `sft` run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps, keeping the full schedule.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Train only the stage's connector and think tokens.
        #[arg(long)]
        pretrain: bool,
    },
    /// RL from a supervised checkpoint.
    Rl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: PathBuf,
    },
    /// Every ablation variant from one checkpoint.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: PathBuf,
    },
    /// Score a checkpoint on the configured task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Quick invariant checks.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::desk(),
    };
    if let Some(s) = c.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.run.out_dir = o.clone();
    }
    if let Some(v) = &c.variant {
        cfg.run.variant = Variant::parse(v)?;
    }
    Ok(cfg)
}

fn report_checks(checks: &SelfChecks) -> ExitCode {
    if checks.passed() {
        println!("self-checks: {} passed", checks.checked);
        ExitCode::SUCCESS
    } else {
        for v in &checks.violations {
            eprintln!("FAILED: {v}");
        }
        eprintln!(
            "self-checks: {} of {} failed",
            checks.violations.len(),
            checks.checked
        );
        ExitCode::from(2)
    }
}

fn print_eval(label: &str, e: &EvalRecord) {
    let mut parts = vec![
        format!("fm_loss={:.5}", e.heldout_fm_loss),
        format!("reward={:.4}", e.mean_reward_aggregate),
    ];
    parts.extend(e.mean_rewards.iter().map(|(n, v)| format!("{n}={v:.4}")));
    println!("{label} step {}: {}", e.step, parts.join(" "));
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Sft {
            common,
            resume,
            stop_after,
            pretrain,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.run.stage = if pretrain {
                Stage::PreTrain
            } else {
                Stage::Sft
            };
            if let Some(s) = common.steps {
                cfg.sft.steps = s;
            }
            let opts = RunOptions {
                resume_from: resume,
                stop_after,
                ..Default::default()
            };
            let r = run_sft(&cfg, &opts)?;
            print_eval("before", &r.initial);
            print_eval("after", &r.last);
            println!("checkpoint: {}", r.checkpoint.display());
            let finite = r.losses.iter().all(|l| l.is_finite());
            if !finite {
                eprintln!("FAILED: non-finite supervised loss");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Rl { common, init } => {
            let mut cfg = load_config(&common)?;
            cfg.run.stage = Stage::Rl;
            if let Some(s) = common.steps {
                cfg.rl.total_training_steps = s;
            }
            let opts = RunOptions {
                init_checkpoint: Some(init),
                ..Default::default()
            };
            let r = run_rl(&cfg, &opts)?;
            print_eval("start", r.first_eval());
            print_eval("end", r.last_eval());
            println!("checkpoint: {}", r.checkpoint.display());
            Ok(report_checks(&r.checks))
        }
        Command::Ablate { common, init } => {
            let mut cfg = load_config(&common)?;
            if common.variant.is_some() {
                bail!("ablate runs every variant; drop --variant");
            }
            if let Some(s) = common.steps {
                cfg.rl.total_training_steps = s;
            }
            let opts = RunOptions {
                init_checkpoint: Some(init),
                ..Default::default()
            };
            let r = run_ablation(&cfg, &opts)?;
            for run in &r.runs {
                print_eval(run.variant.name(), run.last_eval());
            }
            println!("comparison: {}", r.out_dir.join("ablation.csv").display());
            Ok(report_checks(&r.checks()))
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let path = if checkpoint.is_dir() {
                checkpoint.join(CHECKPOINT_FILE)
            } else {
                checkpoint
            };
            let e = eval_checkpoint(&cfg, &path)?;
            print_eval("eval", &e);
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest { common } => {
            let cfg = load_config(&common)?;
            Ok(report_checks(&selftest(&cfg)))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MRGRPO_LOG", "warn"))
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
