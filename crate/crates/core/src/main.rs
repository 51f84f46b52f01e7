use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fusionlab::config::ExperimentConfig;
use fusionlab::pipeline::{cmd_eval, cmd_gen_data, cmd_sweep, cmd_train, cmd_verify, Layout, SweepAxis};
use fusionlab::trainer::Stage;
use fusionlab::verify::VerifyOptions;
use fusionlab::{Error, Result};

/// Reward-weighted fusion of several source policies into one target.
#[derive(Debug, Parser)]
#[command(name = "fusionlab", version)]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory holding datasets, checkpoints and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build sources, sample and score responses, write datasets.
    GenData,
    /// Train one stage: fusesft, sft, fusepo, po_baseline, on_policy_po.
    Train {
        #[arg(long)]
        stage: String,
        /// Stage-one checkpoint for a second-stage run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out prompts.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stage whose checkpoint to evaluate when --checkpoint is absent.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Gradient, linearity and variance checks.
    Verify {
        /// Monte-Carlo draws per variance check.
        #[arg(long, default_value_t = 1_000_000)]
        draws: usize,
        /// Corrupts the named check; for testing the failure path.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Run the full pipeline once per value of one axis.
    Sweep {
        /// k_sft, k_po, alpha_sft, alpha_po, strategy, source_count, target_size
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn parse_stage(s: &str) -> Result<Stage> {
    Stage::parse(s).ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    match cli.command {
        Command::GenData => {
            let data = cmd_gen_data(&cfg)?;
            println!(
                "wrote {} sft, {} po, {} eval samples to {}",
                data.sft.len(),
                data.po.len(),
                data.eval.len(),
                cfg.output_dir.display()
            );
        }
        Command::Train { stage, checkpoint } => {
            let path = cmd_train(&cfg, parse_stage(&stage)?, checkpoint.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Eval { checkpoint, stage } => {
            let ck = match (checkpoint, stage) {
                (Some(c), _) => c,
                (None, Some(s)) => Layout::new(&cfg.output_dir).checkpoint(parse_stage(&s)?),
                (None, None) => return Err(Error::Config("eval needs --checkpoint or --stage".into())),
            };
            let (report, path) = cmd_eval(&cfg, &ck, None)?;
            print!("{}", report.render());
            eprintln!("wrote {}", path.display());
        }
        Command::Verify { draws, inject_fault } => {
            let opts = VerifyOptions {
                seed: cfg.seed,
                mc_draws: draws,
                inject_fault,
                ..VerifyOptions::default()
            };
            let report = cmd_verify(&cfg, &opts)?;
            let text = report.render();
            print!("{text}");
            let path = cfg.output_dir.join("verify.txt");
            std::fs::create_dir_all(&cfg.output_dir)
                .and_then(|_| std::fs::write(&path, &text))
                .map_err(|e| Error::Io { path, source: e })?;
            if !report.passed() {
                return Err(Error::Check(report.failures().join(", ")));
            }
        }
        Command::Sweep { axis, values } => {
            let (table, path) = cmd_sweep(&cfg, SweepAxis::parse(&axis)?, &values, None)?;
            print!("{}", table.render());
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fusionlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
