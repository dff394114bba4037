//! Argument parsing and exit codes.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use log::{error, info};

use crate::config::PipelineConfig;
use crate::pipeline::{resume_prerequisites, Context, ServiceChoice, Stage};

#[derive(Debug, Parser)]
#[command(name = "cfaug", version, about = "Counterfactual augmentation pipeline for review corpora")]
pub struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for training and synthesis.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Chat-completions endpoint URL; the key is read from CFAUG_API_KEY.
    #[arg(long, global = true)]
    pub service_endpoint: Option<String>,
    /// Use the built-in deterministic generation service.
    #[arg(long, global = true)]
    pub mock_service: bool,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rating distribution of the corpus.
    Stats,
    /// Rewrite rating-5 reviews into counterfactual pairs.
    Rewrite,
    /// Grow the few-shot prompt from annotated evaluation items.
    OptimizePrompt,
    /// Train the disentangled autoencoder on the pair file.
    Train,
    /// Synthesize and filter new negative pairs.
    Reproduce,
    /// Reconstruction and summary-sentiment report.
    Evaluate,
    /// Every stage in order.
    Pipeline {
        /// Start at this stage, reusing earlier outputs.
        #[arg(long)]
        resume_from: Option<Stage>,
    },
}

impl Cli {
    /// Flag values as config overrides, applied after `--set`.
    fn flag_overrides(&self) -> Vec<String> {
        let mut out = self.overrides.clone();
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        if let Some(w) = self.workers {
            out.push(format!("workers={w}"));
        }
        if let Some(e) = &self.service_endpoint {
            out.push(format!("prompt.endpoint={}", toml::Value::String(e.clone())));
        }
        out
    }
}

fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging();
    let cfg = match PipelineConfig::load(cli.config.as_deref(), &cli.flag_overrides()) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return 1;
        }
    };
    info!("seed {}", cfg.seed);
    info!("effective config:\n{}", cfg.to_toml());
    let ctx = Context {
        cfg,
        service: if cli.mock_service {
            ServiceChoice::Mock
        } else {
            ServiceChoice::Http
        },
    };
    let result = match cli.command {
        Command::Stats => ctx.run(Stage::Stats),
        Command::Rewrite => ctx.run(Stage::Rewrite),
        Command::OptimizePrompt => ctx.run(Stage::OptimizePrompt),
        Command::Train => ctx.run(Stage::Train),
        Command::Reproduce => ctx.run(Stage::Reproduce),
        Command::Evaluate => ctx.run(Stage::Evaluate),
        Command::Pipeline { resume_from } => {
            match resume_from.map(|s| resume_prerequisites(&ctx.cfg, s)).transpose() {
                Ok(_) => ctx.pipeline(resume_from),
                Err(e) => Err(e),
            }
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            e.exit_code()
        }
    }
}
