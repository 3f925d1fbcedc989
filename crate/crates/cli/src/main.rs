use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use udfkit::tracer::Strategy;
use udfkit_cli::commands::{
    cmd_eval, cmd_extract, cmd_render, cmd_sample, cmd_synth, cmd_train, AnalyticShape, CliError, CliResult,
    EvalInputs, ExitKind, Source,
};
use udfkit_cli::config::RunConfig;
use udfkit_cli::synth::Shape;

#[derive(Parser)]
#[command(name = "udfkit", version, about = "Learn unsigned distance and normal fields from triangle soups")]
struct Cli {
    /// Worker threads for all parallel stages (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SourceArgs {
    /// Trained model manifest written by `train`.
    #[arg(long, conflicts_with = "analytic", required_unless_present = "analytic")]
    model: Option<PathBuf>,
    /// Exact field instead of a model: sphere, split-sphere or soup.
    #[arg(long)]
    analytic: Option<String>,
    /// Soup for `--analytic soup`.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a parametric test soup.
    Synth {
        /// split-sphere, planes or bathtub.
        #[arg(long)]
        shape: String,
        #[arg(long)]
        out: PathBuf,
        /// obj, ply (binary) or ply-ascii; default from the extension.
        #[arg(long)]
        format: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Draw and label training samples from a soup.
    Sample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the distance and normal networks.
    Train {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sphere-trace depth and normal maps.
    Render {
        #[command(flatten)]
        source: SourceArgs,
        /// standard, resample or projection (overrides trace.strategy).
        #[arg(long)]
        strategy: Option<String>,
        /// Output stem; writes .depth, .normals and PNG previews.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Extract a mesh with coarse-to-fine marching cubes.
    Extract {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        format: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare renders and/or meshes and write a report.
    Eval {
        /// Ground-truth render stem.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Estimated render stem.
        #[arg(long)]
        est: Option<PathBuf>,
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        ref_mesh: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn usage(msg: String) -> CliError {
    CliError { kind: ExitKind::Usage, error: anyhow::anyhow!(msg) }
}

fn load_config(a: &ConfigArgs) -> CliResult<RunConfig> {
    RunConfig::load(a.config.as_deref(), &a.overrides).map_err(|error| {
        let missing = a.config.as_ref().is_some_and(|p| !p.exists());
        CliError { kind: if missing { ExitKind::Data } else { ExitKind::Usage }, error }
    })
}

fn source(a: SourceArgs) -> CliResult<Source> {
    match (a.model, a.analytic) {
        (Some(m), None) => Ok(Source::Model(m)),
        (None, Some(name)) => {
            let shape = AnalyticShape::from_name(&name).ok_or_else(|| usage(format!("unknown analytic shape {name:?}")))?;
            Ok(Source::Analytic(shape, a.input))
        }
        _ => Err(usage("give exactly one of --model and --analytic".into())),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth { shape, out, format, cfg } => {
            let shape = Shape::from_name(&shape).ok_or_else(|| usage(format!("unknown shape {shape:?}")))?;
            cmd_synth(&load_config(&cfg)?, shape, &out, format.as_deref())
        }
        Command::Sample { input, out, cfg } => cmd_sample(&load_config(&cfg)?, &input, &out),
        Command::Train { samples, out, cfg } => cmd_train(&load_config(&cfg)?, &samples, &out),
        Command::Render { source: s, strategy, out, cfg } => {
            let strategy = match strategy {
                Some(n) => Some(Strategy::from_name(&n).ok_or_else(|| usage(format!("unknown strategy {n:?}")))?),
                None => None,
            };
            cmd_render(&load_config(&cfg)?, &source(s)?, strategy, &out)
        }
        Command::Extract { source: s, out, format, cfg } => {
            cmd_extract(&load_config(&cfg)?, &source(s)?, &out, format.as_deref())
        }
        Command::Eval { gt, est, mesh, ref_mesh, out, cfg } => {
            let inputs = EvalInputs { gt_render: gt, est_render: est, mesh, ref_mesh };
            cmd_eval(&load_config(&cfg)?, &inputs, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { ExitKind::Usage as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind as u8)
        }
    }
}
