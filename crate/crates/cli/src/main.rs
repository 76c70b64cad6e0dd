use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use icct_core::checkpoint::load_policy;
use icct_core::config::RunConfig;
use icct_core::envs::EnvSpec;
use icct_core::policy::Policy;
use icct_core::runner::{cmd_deepen, cmd_sweep, cmd_train, evaluate_policy, export_policy, verify_policy, Registries};
use icct_core::verify::PropertySpec;
use icct_core::Error;

#[derive(Parser)]
#[command(name = "icct", version, about = "Interpretable continuous control trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and export the resulting trees.
    Train(RunArgs),
    /// Evaluate a checkpoint and check it against its crisp tree.
    Eval(EvalArgs),
    /// Write the crisp tree of a checkpoint as text, DOT and JSON.
    Export(ExportArgs),
    /// Check a checkpoint's action range over a box of states.
    Verify(VerifyArgs),
    /// Grow a tree online from a shallow start.
    Deepen(RunArgs),
    /// Train a grid over leaf sparsity or leaf count and mark the Pareto front.
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Where the environment comes from: a run config or a name.
#[derive(Args)]
struct EnvArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    env: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the summary JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON with `domain` (feature name to [lo, hi]) and `limits`.
    #[arg(long)]
    property: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    /// Also write the full report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failures that exit with status 1.
#[derive(Debug)]
struct ConfigFailure(anyhow::Error);

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigFailure {}

fn config_err(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(ConfigFailure(e.into()))
}

fn load_config(args: &RunArgs, reg: &Registries) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&args.config, &reg.envs, &reg.policies).map_err(config_err)?;
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn env_spec(args: &EnvArgs, reg: &Registries) -> Result<EnvSpec> {
    let name = match (&args.config, &args.env) {
        (Some(path), _) => {
            RunConfig::from_file(path, &reg.envs, &reg.policies)
                .map_err(config_err)?
                .env
        }
        (None, Some(name)) => name.clone(),
        (None, None) => return Err(config_err(Error::config("env", "pass --config or --env"))),
    };
    Ok(reg.envs.make(&name).map_err(config_err)?.spec().clone())
}

fn load(path: &Path, reg: &Registries) -> Result<Box<dyn Policy>> {
    load_policy(path, &reg.policies).with_context(|| format!("loading {}", path.display()))
}

fn print_json(v: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let reg = Registries::builtin();
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args, &reg)?;
            let m = cmd_train(&cfg, &reg)?;
            for r in &m.runs {
                println!(
                    "seed {}: return {:.2} +- {:.2} ({})",
                    r.seed,
                    r.eval.mean,
                    r.eval.stderr,
                    r.dir.display()
                );
            }
        }
        Command::Eval(args) => {
            let spec = env_spec(&args.env, &reg)?;
            let policy = load(&args.checkpoint, &reg)?;
            let mut env = reg.envs.make(&spec.name)?;
            let summary = evaluate_policy(policy.as_ref(), env.as_mut(), args.episodes, args.seed)?;
            print_json(&summary, args.out.as_deref())?;
        }
        Command::Export(args) => {
            let spec = env_spec(&args.env, &reg)?;
            let policy = load(&args.checkpoint, &reg)?;
            for p in export_policy(policy.as_ref(), Some(&spec), &args.out).map_err(config_err)? {
                println!("{}", p.display());
            }
        }
        Command::Verify(args) => {
            let spec = env_spec(&args.env, &reg)?;
            let text = std::fs::read_to_string(&args.property)
                .with_context(|| format!("reading {}", args.property.display()))
                .map_err(config_err)?;
            let property: PropertySpec = serde_json::from_str(&text).map_err(config_err)?;
            let policy = load(&args.checkpoint, &reg)?;
            let verdict = verify_policy(policy.as_ref(), &spec, &property).map_err(config_err)?;
            print!("{}", verdict.summary(Some(&spec)));
            if let Some(out) = &args.out {
                let text = serde_json::to_string_pretty(&verdict)?;
                std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
            }
        }
        Command::Deepen(args) => {
            let cfg = load_config(&args, &reg)?;
            let m = cmd_deepen(&cfg, &reg)?;
            for r in &m.runs {
                println!("seed {}: return {:.2} ({})", r.seed, r.eval.mean, r.dir.display());
            }
        }
        Command::Sweep(args) => {
            let cfg = load_config(&args, &reg)?;
            let (_, rows) = cmd_sweep(&cfg, &reg)?;
            for r in rows {
                println!(
                    "{}={:<3} return {:>9.2} +- {:<7.2} active {:<5}{}",
                    r.axis,
                    r.value,
                    r.mean_return,
                    r.stderr,
                    r.active_params,
                    if r.frontier { " *" } else { "" }
                );
            }
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let is_config = e.downcast_ref::<ConfigFailure>().is_some()
        || matches!(
            e.downcast_ref::<Error>(),
            Some(Error::Config { .. } | Error::Unknown { .. })
        );
    if is_config {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
