use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use reflect_cli::commands::{self, OutputFormat, ServeOptions};
use reflect_cli::Exit;
use reflect_core::replay::ReplayMode;

#[derive(Parser)]
#[command(name = "reflect", version, about = "Reflective dialogue engine and tools")]
struct Cli {
    /// Log filter, e.g. `info` or `reflect_gateway=debug`.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Both,
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Run the websocket gateway.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Scenario file; repeat to register several. The first is the default.
        #[arg(long = "scenario", required = true)]
        scenarios: Vec<PathBuf>,
        /// Chat-completions endpoint of the model server.
        #[arg(long, env = "LLM_ENDPOINT_URL")]
        llm_endpoint: Option<String>,
        #[arg(long, env = "LLM_MODEL_NAME")]
        llm_model: Option<String>,
        /// Per-request timeout in milliseconds.
        #[arg(long, env = "LLM_TIMEOUT_MS")]
        llm_timeout_ms: Option<u64>,
        /// Answer model calls from a scripted policy file instead of a server.
        #[arg(long, conflicts_with = "llm_endpoint")]
        mock_llm: Option<PathBuf>,
        /// Directory for session transcripts; nothing is stored without it.
        #[arg(long)]
        store_dir: Option<PathBuf>,
        /// Permit a model endpoint outside the loopback interface.
        #[arg(long)]
        allow_remote_llm: bool,
        #[arg(long, default_value_t = 15 * 60)]
        idle_timeout_secs: u64,
    },
    /// Check a scenario file.
    Validate { scenario: PathBuf },
    /// Re-run a stored transcript against a scripted policy.
    Replay {
        transcript: PathBuf,
        scenario: PathBuf,
        policy: PathBuf,
        /// Compare turn kinds and node path only, not wording.
        #[arg(long)]
        fuzzy: bool,
    },
    /// Summarize stored transcripts.
    Metrics {
        store_dir: PathBuf,
        /// Human relevance labels; adds a confusion matrix.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        format: Format,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log_level)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();

    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr();
    let exit = match cli.command {
        Command::Validate { scenario } => commands::validate(&scenario, &mut out, &mut err),
        Command::Replay {
            transcript,
            scenario,
            policy,
            fuzzy,
        } => {
            let mode = if fuzzy { ReplayMode::Fuzzy } else { ReplayMode::Exact };
            commands::replay(&transcript, &scenario, &policy, mode, &mut out, &mut err)
        }
        Command::Metrics { store_dir, gold, format } => {
            let format = match format {
                Format::Both => OutputFormat::Both,
                Format::Json => OutputFormat::Json,
                Format::Table => OutputFormat::Table,
            };
            commands::metrics(&store_dir, gold.as_deref(), format, &mut out, &mut err)
        }
        Command::Serve {
            listen,
            scenarios,
            llm_endpoint,
            llm_model,
            llm_timeout_ms,
            mock_llm,
            store_dir,
            allow_remote_llm,
            idle_timeout_secs,
        } => {
            let opts = ServeOptions {
                listen,
                scenarios,
                llm_endpoint,
                llm_model,
                llm_timeout: llm_timeout_ms.map(Duration::from_millis),
                mock_llm,
                store_dir,
                allow_remote_llm,
                idle_timeout: Duration::from_secs(idle_timeout_secs),
            };
            let runtime = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => {
                    eprintln!("error: cannot start runtime: {e}");
                    return ExitCode::from(Exit::Environment.code() as u8);
                }
            };
            match runtime.block_on(commands::serve(opts)) {
                Ok(()) => Exit::Success,
                Err((exit, msg)) => {
                    eprintln!("error: {msg}");
                    exit
                }
            }
        }
    };
    ExitCode::from(exit.code() as u8)
}
