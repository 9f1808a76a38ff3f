use std::path::PathBuf;
use std::process::ExitCode;

use additive_lab_cli::config::{read_config, resolve_str, to_pretty_json, ConfigError, Overrides, Preset};
use additive_lab_cli::run::{run_preset, RunError, EXIT_CONFIG};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "additive-lab", version, about = "Feature-learning experiments for additive single-index models")]
struct Cli {
    /// Print the resolved config and exit without running.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Run an experiment from a config file or a named preset.
    Run(RunArgs),
    /// Parse and check a config file, then print it with defaults filled in.
    Validate { config: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long = "J")]
    j: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    /// `relu` or a JSON activation object.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    eta0: Option<f64>,
    #[arg(long = "T1")]
    t1: Option<u64>,
    #[arg(long = "T2")]
    t2: Option<usize>,
    #[arg(long)]
    r: Option<u8>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "snapshot-every")]
    snapshot_every: Option<u64>,
}

fn config_error(path: &str, message: String) -> RunError {
    RunError::Config(ConfigError { path: path.into(), message })
}

fn overrides(args: &RunArgs) -> Result<Overrides, RunError> {
    let preset = match &args.preset {
        Some(name) => {
            Some(Preset::parse(name).ok_or_else(|| config_error("preset", format!("unknown preset `{name}`")))?)
        }
        None => None,
    };
    let mut keys: Vec<(String, Value)> = Vec::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            keys.push((k.to_string(), v));
        }
    };
    put("target.d", args.d.map(Value::from));
    put("target.M", args.m.map(Value::from));
    put("target.p", args.p.map(Value::from));
    put("target.q", args.q.map(Value::from));
    put("network.J", args.j.map(Value::from));
    put("train.eta0", args.eta0.map(Value::from));
    put("train.T1", args.t1.map(Value::from));
    put("train.T2", args.t2.map(Value::from));
    put("train.r", args.r.map(Value::from));
    put("train.lambda_bar", args.lambda.map(Value::from));
    put("train.snapshot_every", args.snapshot_every.map(Value::from));
    if let Some(a) = &args.activation {
        let v = if a.trim_start().starts_with('{') {
            serde_json::from_str(a).map_err(|e| config_error("network.activation", e.to_string()))?
        } else {
            serde_json::json!({ "kind": a })
        };
        keys.push(("network.activation".into(), v));
    }
    Ok(Overrides { preset, seed: args.seed, out_dir: args.out_dir.clone(), keys })
}

fn fail(e: &RunError) -> ExitCode {
    eprintln!("{}", serde_json::to_string(&e.record()).expect("record serializes"));
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    additive_lab_cli::init_threads();
    match cli.command {
        Command::Validate { config } => match read_config(&config, &Overrides::default()) {
            Ok(cfg) => {
                print!("{}", to_pretty_json(&cfg));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(EXIT_CONFIG as u8)
            }
        },
        Command::Run(args) => {
            let resolved = overrides(&args).and_then(|ov| {
                let cfg = match &args.config {
                    Some(path) => read_config(path, &ov)?,
                    None => resolve_str("{}", &ov)?,
                };
                Ok(cfg)
            });
            let cfg = match resolved {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            if cli.dry_run {
                print!("{}", to_pretty_json(&cfg));
                return ExitCode::SUCCESS;
            }
            match run_preset(&cfg) {
                Ok(outcome) => {
                    println!("{}", serde_json::to_string(&outcome.summary).expect("summary serializes"));
                    ExitCode::from(outcome.exit_code() as u8)
                }
                Err(e) => fail(&e),
            }
        }
    }
}
