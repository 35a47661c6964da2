use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use fqdet::commands::{cmd_ablate, cmd_bench, cmd_eval, cmd_gen_data, Axis, Split, ABLATION_HEADER};
use fqdet::config::RunConfig;
use fqdet::evalkit::Strategy;
use fqdet::gradsuite;
use fqdet::train::{train, TrainOptions};
use fqdet::{Error, Result};

#[derive(Parser)]
#[command(name = "fqdet", version, about = "Two-stage query-based detection head on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set match.scheme=hungarian`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }

    fn given(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoints and metrics into a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_iterations: Option<u64>,
    },
    /// Evaluate a checkpoint and write report.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Replace the configuration stored in the checkpoint.
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value = "new")]
        strategy: Strategy,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every variant of one ablation axis and write a CSV.
    Ablate {
        /// anchors | boxloss | aux | ibbr | matching | points | inference
        #[arg(long)]
        axis: Axis,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter count, throughput and memory proxy.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Images per step.
        #[arg(long, default_value_t = 2)]
        count: usize,
        #[arg(long, default_value_t = 10)]
        objects: usize,
    },
    /// Finite-difference check of every differentiable kernel.
    Gradcheck {
        /// Add a deliberately corrupted gradient that must fail.
        #[arg(long)]
        negative_control: bool,
    },
    /// Materialize the synthetic dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the rendered images.
        #[arg(long)]
        images: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            cfg,
            out,
            resume,
            max_iterations,
        } => {
            let c = cfg.load()?;
            print!("{}", c.to_text());
            let s = train(
                &c,
                &TrainOptions {
                    run_dir: out,
                    resume,
                    max_iterations,
                    ..TrainOptions::default()
                },
            )?;
            if let Some(r) = s.rows.last() {
                println!("AP {:.4} AP50 {:.4} AP75 {:.4}", r.report.ap, r.report.ap50, r.report.ap75);
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            cfg,
            split,
            strategy,
            out,
        } => {
            let c = if cfg.given() { Some(cfg.load()?) } else { None };
            let r = cmd_eval(&checkpoint, c.as_ref(), split, strategy, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(())
        }
        Command::Ablate { axis, cfg, out } => {
            let c = cfg.load()?;
            print!("{}", c.to_text());
            let rows = cmd_ablate(axis, &c, &out)?;
            println!("{ABLATION_HEADER}");
            for r in rows {
                println!("{}", r.csv());
            }
            Ok(())
        }
        Command::Bench {
            cfg,
            size,
            count,
            objects,
        } => {
            let c = cfg.load()?;
            print!("{}", c.to_text());
            let r = cmd_bench(&c, size, count, objects)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(())
        }
        Command::Gradcheck { negative_control } => {
            let mut reports = gradsuite::run_all()?;
            if negative_control {
                reports.push(gradsuite::negative_control()?);
            }
            let mut failed = 0;
            for r in &reports {
                println!("{}", r.line());
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::invalid("gradcheck", format!("{failed} of {} kernels failed", reports.len())));
            }
            println!("all {} kernels passed", reports.len());
            Ok(())
        }
        Command::GenData {
            cfg,
            count,
            out,
            images,
        } => {
            let c = cfg.load()?;
            print!("{}", c.to_text());
            let r = cmd_gen_data(&c, count, &out, images)?;
            println!("manifest {} sha256 {}", r.manifest.display(), r.hash);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
