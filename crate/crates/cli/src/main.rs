//! `rrb`: generate synthetic data, train residual models, evaluate pipelines,
//! predict single scenarios and render them.

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use rrb_core::fusion::FusionMode;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "rrb", version, about = "Knowledge-driven trajectory prediction with confined learned residuals")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $RRB_OUTPUT_DIR, else ./rrb-output).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Dataset directory written by gen-data (default: <out-dir>/data).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// `random` or `scene-generalization[:<category>]`.
    #[arg(long, global = true)]
    scenario: Option<String>,
}

#[derive(Args)]
struct ModelFlags {
    /// Fusion mode of the residual models, e.g. `simple_add`.
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
    /// Modes of the multimodal residual model.
    #[arg(long)]
    modes: Option<usize>,
}

#[derive(Args)]
struct PipelineFlags {
    /// Comma-separated pipelines, e.g. `kd1,rrb,rrb_m+mpc`.
    #[arg(long, value_delimiter = ',')]
    pipelines: Option<Vec<String>>,
    /// Drop the MPC refinement from every pipeline.
    #[arg(long)]
    no_mpc: bool,
    /// Directory holding the checkpoints (default: <out-dir>/models).
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the synthetic scene suite and write it to disk.
    GenData {
        #[arg(long)]
        scenes: Option<usize>,
        /// Comma-separated templates: straight, curve, t_intersection.
        #[arg(long, value_delimiter = ',')]
        templates: Option<Vec<String>>,
    },
    /// Fit the KD variance prior and train the residual models.
    Train {
        /// Comma-separated model keys, e.g. `edn,rrb,rrb_m`.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Evaluate pipelines on the test split and write the comparison table.
    Eval {
        #[command(flatten)]
        pipelines: PipelineFlags,
        #[command(flatten)]
        model: ModelFlags,
        /// Worker threads for evaluation.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Predict one scenario with every pipeline and write the result as JSON.
    Predict {
        /// Scenario key `scene/agent/frame` (default: first test scenario).
        #[arg(long)]
        key: Option<String>,
        #[command(flatten)]
        pipelines: PipelineFlags,
        #[command(flatten)]
        model: ModelFlags,
        /// Output file (default: <out-dir>/predictions.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a predictions file over its scenario; the format follows the extension.
    Render {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    match s {
        "ivw" => Ok(FusionMode::Ivw),
        "simple_add" => Ok(FusionMode::SimpleAdd),
        _ => Err(format!("'{s}' is not a training fusion mode (expected ivw | simple_add)")),
    }
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(f) = self.fusion {
            cfg.model.fusion = Some(f);
        }
        if let Some(m) = self.modes {
            cfg.model.modes = m;
        }
    }
}

impl PipelineFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.pipelines {
            cfg.pipelines = p.clone();
        }
        if self.no_mpc {
            let mut seen = Vec::new();
            for p in &cfg.pipelines {
                let stripped = p.strip_suffix("+mpc").unwrap_or(p).to_string();
                if !seen.contains(&stripped) {
                    seen.push(stripped);
                }
            }
            cfg.pipelines = seen;
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.common.out_dir {
        cfg.output_dir = Some(o);
    }
    if let Some(d) = cli.common.data {
        cfg.data.dir = Some(d);
    }
    if let Some(s) = cli.common.scenario {
        cfg.split = s;
    }
    match cli.command {
        Command::GenData { scenes, templates } => {
            if let Some(n) = scenes {
                cfg.suite.scenes = n;
            }
            if let Some(t) = templates {
                cfg.suite.templates = t;
            }
            commands::gen_data(&cfg)
        }
        Command::Train { models, epochs, model } => {
            model.apply(&mut cfg);
            if let Some(m) = models {
                cfg.models = Some(m);
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            commands::train(&cfg)
        }
        Command::Eval { pipelines, model, jobs } => {
            pipelines.apply(&mut cfg);
            model.apply(&mut cfg);
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            commands::eval(&cfg, pipelines.checkpoints)
        }
        Command::Predict {
            key,
            pipelines,
            model,
            out,
        } => {
            pipelines.apply(&mut cfg);
            model.apply(&mut cfg);
            commands::predict(&cfg, key.as_deref(), pipelines.checkpoints, out)
        }
        Command::Render { predictions, out } => commands::render(&cfg, &predictions, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
