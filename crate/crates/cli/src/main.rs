use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rgia_core::envs::EnvSpec;
use rgia_core::experiments::{
    emit_report, parse_report_csv, run_experiment, summarize, EmitOptions, ExperimentConfig,
    ExperimentTag, ReportRow,
};
use rgia_core::Error;

#[derive(Parser)]
#[command(
    name = "rgia",
    version,
    about = "Federated Q-learning gradient inversion experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the federation and evaluate the greedy policy.
    Train(RunArgs),
    /// Intercept packets and invert them.
    Attack(RunArgs),
    /// Enable one regularizer at a time (GIA, GIA-SR, GIA-RC, GIA-DC, RGIA).
    Ablate(RunArgs),
    /// Sweep one regularizer weight over a grid.
    Sensitivity(RunArgs),
    /// Noise and quantization defenses against the attack.
    DefenseSweep(RunArgs),
    /// Attack quality as the local batch grows.
    BatchSweep(RunArgs),
    /// Multi-start consistency of GIA and RGIA.
    Multistart(RunArgs),
    /// State priors of different sizes.
    PriorStudy(RunArgs),
    /// Transition models fitted on different amounts of data.
    TransitionStudy(RunArgs),
    /// Summarize existing report CSVs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvName {
    Gridlake,
    Pointmass,
    Pixelgrid,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON). Without it the built-in preset is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; the run uses as many consecutive seeds as the config lists.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave wall-clock columns out of the outputs.
    #[arg(long)]
    deterministic: bool,
    /// Environment for the preset (ignored with --config).
    #[arg(long, value_enum, default_value = "gridlake")]
    env: EnvName,
}

#[derive(Args)]
struct ReportArgs {
    /// Report CSVs written by earlier runs.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
    /// Base name of the written files.
    #[arg(long, default_value = "report")]
    name: String,
}

enum Failure {
    Config(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) | Error::InvalidArgument(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Core(other),
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Core(e) if e.is_numeric() => 3,
            Failure::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => run(ExperimentTag::Train, a),
        Cmd::Attack(a) => run(ExperimentTag::Attack, a),
        Cmd::Ablate(a) => run(ExperimentTag::Ablate, a),
        Cmd::Sensitivity(a) => run(ExperimentTag::Sensitivity, a),
        Cmd::DefenseSweep(a) => run(ExperimentTag::DefenseSweep, a),
        Cmd::BatchSweep(a) => run(ExperimentTag::BatchSweep, a),
        Cmd::Multistart(a) => run(ExperimentTag::Multistart, a),
        Cmd::PriorStudy(a) => run(ExperimentTag::PriorStudy, a),
        Cmd::TransitionStudy(a) => run(ExperimentTag::TransitionStudy, a),
        Cmd::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("rgia: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn load_config(tag: ExperimentTag, args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut config = match &args.config {
        None => ExperimentConfig::preset(
            tag,
            match args.env {
                EnvName::Gridlake => EnvSpec::gridlake(),
                EnvName::Pointmass => EnvSpec::pointmass(),
                EnvName::Pixelgrid => EnvSpec::pixelgrid(),
            },
        ),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            let mut value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let obj = value
                .as_object_mut()
                .ok_or_else(|| Failure::Config("config must be a JSON object".into()))?;
            match obj.get("experiment").and_then(|v| v.as_str()) {
                None => {
                    obj.insert("experiment".into(), tag.as_str().into());
                }
                Some(t) if t != tag.as_str() => {
                    return Err(Failure::Config(format!("config is for '{t}', not '{tag}'")));
                }
                Some(_) => {}
            }
            ExperimentConfig::from_json(&value.to_string())?
        }
    };
    if let Some(seed) = args.seed {
        config = config.with_base_seed(seed);
    }
    if let Some(out) = &args.out {
        config.output = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

fn run(tag: ExperimentTag, args: RunArgs) -> Result<(), Failure> {
    let config = load_config(tag, &args)?;
    let out_dir = config
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("out"));
    let opts = EmitOptions {
        deterministic: args.deterministic,
    };
    let output = run_experiment(&config)?;

    std::fs::create_dir_all(&out_dir).map_err(Error::from)?;
    write(
        &out_dir.join(format!("{}_config.json", tag.as_str())),
        &config.to_json()?,
    )?;
    for (seed, log) in &output.logs {
        write(
            &out_dir.join(format!("train_log_seed{seed}.csv")),
            &log.to_csv_string()?,
        )?;
    }
    for (seed, packet, res) in &output.reconstructions {
        let mut res = res.clone();
        if opts.deterministic {
            res.wall_time_secs = 0.0;
        }
        write(
            &out_dir.join(format!("reconstruction_seed{seed}_packet{packet}.json")),
            &res.to_json()?,
        )?;
    }
    let files = emit_report(&output.rows, &out_dir, tag.as_str(), opts)?;
    print_summary(&output.rows, opts);
    println!("wrote {}", files.csv.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let mut rows: Vec<ReportRow> = Vec::new();
    for path in &args.input {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        rows.extend(parse_report_csv(&text)?);
    }
    let opts = EmitOptions {
        deterministic: args.deterministic,
    };
    let out_dir = args.out.unwrap_or_else(|| PathBuf::from("out"));
    let files = emit_report(&rows, &out_dir, &args.name, opts)?;
    print_summary(&rows, opts);
    println!("wrote {}", files.summary.display());
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Core(Error::from(e)))
}

fn print_summary(rows: &[ReportRow], opts: EmitOptions) {
    for arm in summarize(rows, opts).arms {
        let parts: Vec<String> = arm
            .metrics
            .iter()
            .map(|(k, s)| format!("{k}={:.4e}±{:.1e}", s.mean, s.std))
            .collect();
        println!("{:<18} n={:<3} {}", arm.arm, arm.rows, parts.join(" "));
    }
}
