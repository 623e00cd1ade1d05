mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nvs_core::dataset::Split;

/// A mistake in how the tool was invoked; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "nvs", version, about = "Hybrid deterministic/diffusion novel view synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML file with [backbone] [heads] [diffusion] [train] [loss] [sampler] [data] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.lr=1e-3`. Repeatable; applied last.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", value_parser = config::parse_override)]
    pub overrides: Vec<(String, String)>,
    /// Reuse a non-empty output directory, replacing what this command writes.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-view dataset.
    GenData {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
        /// Square image side in pixels.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model, checkpointing into the output directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Stop (and checkpoint) once this step is reached, without changing the schedule.
        #[arg(long)]
        stop_after: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Synthesise one to three target views of a scene.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Target view index; repeat for joint sampling.
        #[arg(long = "pose-index", required = true)]
        pose_index: Vec<usize>,
        /// Context view indices; defaults to the scene's designated context views.
        #[arg(long, value_delimiter = ',')]
        context: Vec<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on the interp or extra targets of a dataset.
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 2)]
        n_context: usize,
        /// Report file (`*.json`) or run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the confidence threshold.
    AblateTau {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.8,0.9,0.95,0.99,1")]
        taus: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        n_context: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the number of context views.
    AblateContext {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        counts: Vec<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fast invariant suite.
    Check {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "interp")]
    pub split: Split,
    /// Only use the first N scenes.
    #[arg(long)]
    pub max_scenes: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    use commands::*;
    match cli.command {
        Command::GenData {
            scenes,
            views,
            resolution,
            seed,
            out,
            common,
        } => gen_data(&common, scenes, views, resolution, seed, &out),
        Command::Train {
            data,
            out,
            resume,
            steps,
            stop_after,
            common,
        } => train(&common, &data, &out, resume.as_deref(), steps, stop_after),
        Command::Sample {
            ckpt,
            data,
            scene,
            pose_index,
            context,
            tau,
            seed,
            out,
            common,
        } => sample(&common, &ckpt, &data, scene, &pose_index, &context, tau, seed, &out),
        Command::Eval {
            eval,
            tau,
            n_context,
            out,
        } => eval_cmd(&eval, tau, n_context, &out),
        Command::AblateTau {
            eval,
            taus,
            n_context,
            out,
        } => ablate_tau_cmd(&eval, &taus, n_context, &out),
        Command::AblateContext { eval, counts, tau, out } => ablate_context_cmd(&eval, &counts, tau, &out),
        Command::Check { out, common } => check(&common, out.as_deref()),
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<UsageError>()
            || matches!(
                c.downcast_ref::<nvs_core::error::Error>(),
                Some(nvs_core::error::Error::Config(_) | nvs_core::error::Error::Usage(_))
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let usage = is_usage(&e);
            let line = serde_json::json!({
                "error": if usage { "usage" } else { "runtime" },
                "message": format!("{e:#}"),
            });
            eprintln!("{line}");
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
