use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use permeadiff::sequence::{load_protocol, preset_by_name, save_protocol, Protocol};
use permeadiff_cli::{model_eval, parse_pairs, CliError, EvalModel, ExperimentConfig, Pipeline, Stage};

#[derive(Parser)]
#[command(name = "permeadiff", version, about = "Monte-Carlo diffusion MRI in permeable sphere packings")]
struct Cli {
    /// Worker threads (falls back to PERMEADIFF_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack the configured substrates.
    Pack(RunArgs),
    /// Pack and simulate every (substrate, κ, D_e,0) condition.
    Simulate(RunArgs),
    /// Simulate, then build the ADC/ADK, NMSE and occupancy tables.
    Analyze(RunArgs),
    /// Everything up to the model fits and their MAE tables.
    Fit(RunArgs),
    /// Full pipeline including the report.
    Experiment(RunArgs),
    /// Summarise a finished run (recomputes only missing stages).
    Report(RunArgs),
    /// Export, import or list acquisition protocols.
    #[command(subcommand)]
    Protocol(ProtocolCommand),
    /// Analytic model curves.
    #[command(subcommand)]
    Model(ModelCommand),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum ProtocolCommand {
    /// Write a preset to a protocol file.
    Export {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a protocol file and print its timings.
    Import {
        #[arg(long)]
        path: PathBuf,
    },
    /// List the presets.
    List,
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Evaluate a model on every measurement of a protocol.
    Eval {
        #[arg(long, value_enum)]
        model: ModelArg,
        /// Preset name or protocol file.
        #[arg(long, default_value = "NEXI")]
        protocol: String,
        /// Model parameter as key=value (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        params: Vec<String>,
        /// CSV destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Cexi,
    Sandi,
    Verdict,
}

fn runtime(stage: &str, e: impl ToString) -> CliError {
    CliError::Stage { stage: stage.into(), message: e.to_string() }
}

fn resolve_protocol(name_or_path: &str) -> Result<Protocol, CliError> {
    match preset_by_name(name_or_path) {
        Ok(p) => Ok(p),
        Err(_) => load_protocol(name_or_path).map_err(|e| CliError::Config(format!("{name_or_path}: {e}"))),
    }
}

fn run_pipeline(args: RunArgs, last: Stage) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.out_dir = out;
    }
    let mut pipeline = Pipeline::new(config)?;
    pipeline.verbose = !args.quiet;
    let summary = pipeline.run(last)?;
    println!(
        "{}: {} units run, {} up to date; outputs in {}",
        last.name(),
        summary.executed.len(),
        summary.skipped.len(),
        pipeline.out_dir().display()
    );
    if last == Stage::Report {
        let sensitivity = pipeline.out_dir().join("tables/sensitivity.csv");
        if let Ok(text) = std::fs::read_to_string(&sensitivity) {
            print!("{text}");
        }
        let bad = pipeline.manifest().verify(pipeline.out_dir());
        if !bad.is_empty() {
            return Err(runtime("report", format!("artifacts changed on disk: {bad:?}")));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli.threads.or_else(|| std::env::var("PERMEADIFF_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Pack(a) => run_pipeline(a, Stage::Pack),
        Command::Simulate(a) => run_pipeline(a, Stage::Simulate),
        Command::Analyze(a) => run_pipeline(a, Stage::Analyze),
        Command::Fit(a) => run_pipeline(a, Stage::Fit),
        Command::Experiment(a) | Command::Report(a) => run_pipeline(a, Stage::Report),
        Command::Protocol(ProtocolCommand::Export { preset, out }) => {
            let p = preset_by_name(&preset).map_err(|e| CliError::Config(e.to_string()))?;
            save_protocol(&p, &out).map_err(|e| runtime("protocol", e))
        }
        Command::Protocol(ProtocolCommand::Import { path }) => {
            let p = load_protocol(&path).map_err(|e| CliError::Config(e.to_string()))?;
            println!("{}: {} measurements, {} directions", p.name, p.measurements.len(), p.n_directions);
            for t in p.timings() {
                println!("  delta = {} ms, Delta = {} ms", t.delta_small, t.delta_big);
            }
            Ok(())
        }
        Command::Protocol(ProtocolCommand::List) => {
            for p in permeadiff::sequence::Preset::ALL {
                println!("{p}");
            }
            Ok(())
        }
        Command::Model(ModelCommand::Eval { model, protocol, params, out }) => {
            let protocol = resolve_protocol(&protocol)?;
            let pairs = parse_pairs(&params)?;
            let model = match model {
                ModelArg::Cexi => EvalModel::Cexi,
                ModelArg::Sandi => EvalModel::Sandi,
                ModelArg::Verdict => EvalModel::Verdict,
            };
            match out {
                Some(path) => {
                    let file = std::fs::File::create(&path).map_err(|e| runtime("model eval", e))?;
                    model_eval(model, &pairs, &protocol, file)
                }
                None => model_eval(model, &pairs, &protocol, std::io::stdout().lock()),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
