mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fastsep::separation::Method;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(String),
    #[error("input: {0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Signal(#[from] fastsep::signal::SignalError),
    #[error(transparent)]
    Room(#[from] fastsep::room::RoomError),
    #[error(transparent)]
    Separation(#[from] fastsep::separation::SeparationError),
    #[error(transparent)]
    Eval(#[from] fastsep::eval::EvalError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Determined multichannel source separation with neural source models.
#[derive(Debug, Parser)]
#[command(name = "fastsep", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Leave wall-clock times out of traces so reruns are byte-identical.
    #[arg(long, global = true)]
    no_timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate reverberant two-source scenes from the toy corpus.
    Simulate(SimulateArgs),
    /// Separate one multichannel recording.
    Separate(SeparateArgs),
    /// Separate every scene in a directory and score the results.
    Evaluate(EvaluateArgs),
    /// Print the manifest of a model bundle.
    InspectModel { model: PathBuf },
    /// Write the labelled toy corpus used to train models.
    Corpus(CorpusArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    /// Target reverberation time in seconds.
    #[arg(long)]
    rt60: Option<f64>,
    /// Seconds per source.
    #[arg(long)]
    duration: Option<f64>,
    /// Room geometry TOML.
    #[arg(long)]
    room: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SeparateArgs {
    /// Multichannel WAV file or a scene directory.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Iterations of the chosen method.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory of scenes written by `simulate`.
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Results directory (defaults to `<scenes>/results`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
}

#[derive(Debug, Args)]
struct CorpusArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    utterances: Option<usize>,
    #[arg(long)]
    duration: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut c = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut c.seed, cli.seed);
    if cli.no_timing {
        c.separation.timing = false;
    }
    let name = match &cli.command {
        Command::Simulate(a) => {
            set_opt(&mut c.output, a.out.clone());
            set(&mut c.simulation.scenes, a.scenes);
            set(&mut c.simulation.rt60, a.rt60);
            set(&mut c.simulation.duration, a.duration);
            set_opt(&mut c.simulation.room, a.room.clone());
            "simulate"
        }
        Command::Separate(a) => {
            set_opt(&mut c.input, a.input.clone());
            set_opt(&mut c.output, a.out.clone());
            set(&mut c.separation.method, a.method);
            set_opt(&mut c.model, a.model.clone());
            match c.separation.method {
                Method::Ilrma => set(&mut c.separation.ilrma_iterations, a.iterations),
                Method::Fmvae => set(&mut c.separation.fmvae_iterations, a.iterations),
            }
            "separate"
        }
        Command::Evaluate(a) => {
            set_opt(&mut c.input, a.scenes.clone());
            set_opt(&mut c.output, a.out.clone());
            set_opt(&mut c.model, a.model.clone());
            set(&mut c.evaluation.methods, a.methods.clone());
            "evaluate"
        }
        Command::InspectModel { model } => {
            c.model = Some(model.clone());
            "inspect-model"
        }
        Command::Corpus(a) => {
            set_opt(&mut c.output, a.out.clone());
            set(&mut c.corpus.classes, a.classes);
            set(&mut c.corpus.utterances_per_class, a.utterances);
            set(&mut c.corpus.duration, a.duration);
            "corpus"
        }
    };
    c.command = Some(name.to_string());
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let config = resolve(&cli)?;
    match &cli.command {
        Command::Simulate(_) => {
            let dirs = commands::simulate(&config)?;
            println!("wrote {} scenes", dirs.len());
        }
        Command::Separate(_) => {
            let out = commands::separate_cmd(&config)?;
            let last = out.trace.records.last().map_or(out.trace.initial_nll, |r| r.nll);
            println!(
                "{} iterations, final negative log-likelihood {last:.6e}",
                out.trace.iterations()
            );
        }
        Command::Evaluate(_) => {
            let e = commands::evaluate(&config)?;
            print!("{}", e.summary.to_text());
            if !e.accuracy.rows.is_empty() {
                println!();
                print!("{}", e.accuracy.to_text());
            }
            println!();
            print!("{}", e.runtime.to_text());
        }
        Command::InspectModel { model } => {
            let info = commands::inspect_model(model)?;
            println!("{}", serde_json::to_string_pretty(&info).expect("manifest serializes"));
        }
        Command::Corpus(_) => {
            let n = commands::corpus(&config)?;
            println!("wrote {n} utterances");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FASTSEP_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
