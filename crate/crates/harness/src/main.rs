use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use steerlab_harness::commands::{self, Ctx, Hypothesis};
use steerlab_harness::{config, report, server, store, Error, RunConfig};

/// Steerability measurement and refinement for a 2-D pick-and-place world.
///
/// Every subcommand reads the run config, writes its artifacts under the
/// output directory and prints one JSON summary line on stdout.
#[derive(Debug, Parser)]
#[command(name = "steerlab", version)]
struct Cli {
    /// Run config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scripted expert demonstrations -> demos.jsonl
    GenDemos,
    /// Fit the demo-only policy -> policy.manifest
    Fit,
    /// Steerability matrices, SCR table and score of a policy
    EvalSteer {
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// CMI sweep over the probe states and the coverage-bound check
    EvalCmi {
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// SteerGen augmentation of the training buffer
    Steergen {
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// One steerability-rollout behavior cloning pass
    Srbc {
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// One refinement iteration under runs/<run-id>
    Resteer {
        #[arg(long)]
        run_id: String,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Hypothesis experiment over the configured seeds
    Experiment { which: Which },
    /// Markdown summary and CSV bundle of everything under the output directory
    Report,
    /// Live steering sessions over websocket
    Serve {
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Override `serve.addr`.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Print the effective config as TOML
    Config,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Which {
    H1,
    H2,
    H3,
    H4,
}

impl From<Which> for Hypothesis {
    fn from(w: Which) -> Self {
        match w {
            Which::H1 => Hypothesis::H1,
            Which::H2 => Hypothesis::H2,
            Which::H3 => Hypothesis::H3,
            Which::H4 => Hypothesis::H4,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, config::ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli, cfg: RunConfig) -> steerlab_harness::Result<Value> {
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(Value::Null);
    }
    let ctx = Ctx::new(cfg)?;
    match cli.command {
        Command::GenDemos => commands::gen_demos(&ctx),
        Command::Fit => commands::fit(&ctx),
        Command::EvalSteer { policy } => commands::eval_steer(&ctx, policy.as_deref()),
        Command::EvalCmi { policy } => commands::eval_cmi(&ctx, policy.as_deref()),
        Command::Steergen { policy } => commands::steergen(&ctx, policy.as_deref()),
        Command::Srbc { policy } => commands::srbc(&ctx, policy.as_deref()),
        Command::Resteer { run_id, policy } => commands::resteer(&ctx, &run_id, policy.as_deref()),
        Command::Experiment { which } => commands::experiment(&ctx, which.into()),
        Command::Report => {
            let r = report::emit_report(&ctx.out)?;
            if r.artifacts == 0 {
                Ok(json!({ "status": "no artifacts", "missing": r.missing }))
            } else {
                Ok(serde_json::to_value(r).expect("report summary serializes"))
            }
        }
        Command::Serve { policy, addr } => {
            let path = policy.unwrap_or_else(|| ctx.path("policy.manifest"));
            if !path.exists() {
                return Err(Error::Missing { path, hint: "fit" });
            }
            let loaded = store::load_policy(&path, &ctx.world)?;
            let addr = addr.unwrap_or_else(|| ctx.cfg.serve.addr.clone());
            let app = server::App::new(ctx.world.clone(), loaded.policy, &ctx.cfg);
            server::run(app, &addr, |bound| {
                println!("{}", json!({ "listening": bound.to_string(), "policy": path }));
            })
            .map_err(|e| Error::Invalid(format!("serve: {e}")))?;
            Ok(Value::Null)
        }
        Command::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cli, cfg) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(Error::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
