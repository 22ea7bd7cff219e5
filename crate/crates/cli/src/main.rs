//! `photoloop`: enhance, score and normalise images, or serve sessions.
//!
//! Exit codes: 0 success, 1 undecodable input, 2 assessor failure, 3 I/O,
//! 4 usage or parameter error.

mod enhance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use photoloop_core::api::ScoreReport;
use photoloop_core::normalization::abn;
use photoloop_core::{AbnConfig, AssessorKind, Error, FilterId, ImageBuffer};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "photoloop", version, about = "Gradient-driven photo enhancement")]
struct Cli {
    /// Worker threads for filtering; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimise the filter intensities and write the enhanced image.
    Enhance(EnhanceArgs),
    /// Print the aesthetic score distribution of an image.
    Score(ScoreArgs),
    /// Apply brightness normalisation only.
    Abn(AbnArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Iteration budget; defaults to the optimizer default (50).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Initial intensity, e.g. `--set sat=0.2`. Repeatable.
    #[arg(long = "set", value_name = "NAME=VALUE", value_parser = parse_assignment)]
    pub set: Vec<(FilterId, f64)>,
    /// Keep an intensity fixed during optimisation. Repeatable.
    #[arg(long = "fix", value_name = "NAME")]
    pub fix: Vec<FilterId>,
    #[arg(long)]
    pub no_abn: bool,
    /// `proxy` or `model:<path.onnx>`.
    #[arg(long, default_value = "proxy", value_parser = parse_assessor)]
    pub assessor: AssessorKind,
    /// Seed of the normalisation background sampler.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Drive a running service instead of the in-process engine.
    #[arg(long, value_name = "URL")]
    pub server: Option<String>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    input: PathBuf,
    #[arg(long, default_value = "proxy", value_parser = parse_assessor)]
    assessor: AssessorKind,
}

#[derive(Args, Debug)]
struct AbnArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Directory for persisted sessions.
    #[arg(long, default_value = "sessions")]
    data_dir: PathBuf,
    #[arg(long, default_value = "proxy", value_parser = parse_assessor)]
    assessor: AssessorKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_assignment(s: &str) -> Result<(FilterId, f64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got `{s}`"))?;
    let id: FilterId = name.parse().map_err(|e: Error| e.to_string())?;
    let value: f64 = value.parse().map_err(|_| format!("`{value}` is not a number"))?;
    Ok((id, value))
}

fn parse_assessor(s: &str) -> Result<AssessorKind, String> {
    AssessorKind::parse(s).map_err(|e| e.to_string())
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn io(context: &str, e: std::io::Error) -> Self {
        Failure {
            code: 3,
            message: format!("{context}: {e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::UnsupportedImage(_) | Error::EmptyInput => 1,
            Error::AssessorLoad(_) | Error::Assessor(_) | Error::DivergentGradient => 2,
            Error::Io(_) | Error::Encode(_) | Error::Schema(_) => 3,
            _ => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

pub fn read_input(path: &std::path::Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::io(&format!("cannot read {}", path.display()), e))
}

pub fn write_output(path: &std::path::Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::io(&format!("cannot write {}", path.display()), e))
}

pub fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure { code: 3, message: e.to_string() })?;
    println!("{text}");
    Ok(())
}

fn score(args: &ScoreArgs) -> Result<(), Failure> {
    let img = ImageBuffer::decode(&read_input(&args.input)?)?;
    let assessor = args.assessor.build()?;
    let assessment = assessor.score(&img)?;
    print_json(&ScoreReport {
        buckets: assessment.distribution().copied(),
        mean: assessment.mean_score(),
    })
}

fn normalise(args: &AbnArgs) -> Result<(), Failure> {
    let bytes = read_input(&args.input)?;
    let img = ImageBuffer::decode(&bytes)?;
    let (out, report) = abn(&img, &AbnConfig { seed: args.seed, ..AbnConfig::default() })?;
    if out == img && bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        write_output(&args.output, &bytes)?;
    } else {
        write_output(&args.output, &out.encode_png()?)?;
    }
    print_json(&report)
}

fn serve(args: &ServeArgs) -> Result<(), Failure> {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::io("cannot start runtime", e))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
            .await
            .map_err(|e| Failure::io("cannot bind", e))?;
        let addr = listener.local_addr().map_err(|e| Failure::io("cannot bind", e))?;
        let mut config = photoloop_service::ServiceConfig {
            data_dir: args.data_dir.clone(),
            ..Default::default()
        };
        config.defaults.assessor = args.assessor.clone();
        config.defaults.abn_config.seed = args.seed;
        config.defaults.assessor.build()?;
        print_json(&serde_json::json!({ "listening": format!("http://{addr}") }))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        photoloop_service::serve(listener, config, shutdown)
            .await
            .map_err(|e| Failure::io("server error", e))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(4);
        }
    }
    let result = match &cli.command {
        Command::Enhance(args) => enhance::run(args),
        Command::Score(args) => score(args),
        Command::Abn(args) => normalise(args),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
