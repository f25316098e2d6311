use std::fmt::Display;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use reflect_core::engine::{Engine, SessionConfig};
use reflect_core::llm_backend::{CompletionBackend, HttpBackend, HttpBackendConfig, ScriptedBackend, ScriptedPolicy};
use reflect_core::metrics::{compute_metrics, confusion_matrix, render_table, ConfusionMatrix, GoldLabel, MetricsReport};
use reflect_core::replay::{replay as replay_record, ReplayMode, ReplayResult};
use reflect_core::scenario::{load_scenario, validate as validate_scenario, Scenario};
use reflect_core::store::{load_record, SessionStore};
use reflect_gateway::Gateway;
use serde::Serialize;

use crate::Exit;

fn fail(err: &mut dyn Write, exit: Exit, msg: impl Display) -> Exit {
    let _ = writeln!(err, "error: {msg}");
    exit
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

fn read_scenario(path: &Path) -> Result<Scenario, String> {
    load_scenario(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

/// `validate <scenario>`: 0 when the scenario has no errors, 1 otherwise.
pub fn validate(path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Exit {
    let scenario = match read_scenario(path) {
        Ok(s) => s,
        Err(e) => return fail(err, Exit::Environment, e),
    };
    let report = validate_scenario(&scenario);
    let _ = write!(out, "{report}");
    if report.ok {
        Exit::Success
    } else {
        Exit::Semantic
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum OutputFormat {
    /// JSON report followed by a plain-text table.
    #[default]
    Both,
    Json,
    Table,
}

/// `replay <transcript> <scenario> <policy>`: re-drives the recorded learner
/// turns against a scripted backend. 0 when every compared turn matches.
pub fn replay(
    transcript: &Path,
    scenario: &Path,
    policy: &Path,
    mode: ReplayMode,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Exit {
    let loaded = (|| {
        let record = load_record(transcript).map_err(|e| e.to_string())?;
        let scenario = read_scenario(scenario)?;
        let policy = ScriptedPolicy::from_json(&read(policy)?).map_err(|e| format!("{}: {e}", policy.display()))?;
        Ok::<_, String>((record, scenario, policy))
    })();
    let (record, scenario, policy) = match loaded {
        Ok(v) => v,
        Err(e) => return fail(err, Exit::Environment, e),
    };
    let backend = ScriptedBackend::new(policy);
    let result: ReplayResult =
        futures::executor::block_on(replay_record(Arc::new(scenario), &record, &backend, mode));
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(&result).expect("result serializes"));
    match &result.first_divergence {
        None => {
            let _ = writeln!(out, "replay matched {} turns", result.compared_turns);
            Exit::Success
        }
        Some(d) => {
            let _ = writeln!(
                out,
                "replay diverged at turn {}\n  expected: {}\n  actual:   {}",
                d.turn_index, d.expected, d.actual
            );
            Exit::Semantic
        }
    }
}

#[derive(Debug, Serialize)]
pub struct MetricsOutput {
    #[serde(flatten)]
    pub report: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
}

/// `metrics <store_dir> [--gold <labels>]`: statistics over every stored session.
pub fn metrics(store_dir: &Path, gold: Option<&Path>, format: OutputFormat, out: &mut dyn Write, err: &mut dyn Write) -> Exit {
    if !store_dir.is_dir() {
        return fail(err, Exit::Environment, format!("{} is not a directory", store_dir.display()));
    }
    let records = match SessionStore::open(store_dir).and_then(|s| s.load_all()) {
        Ok(r) => r,
        Err(e) => return fail(err, Exit::Environment, e),
    };
    let confusion = match gold {
        None => None,
        Some(path) => {
            let text = match read(path) {
                Ok(t) => t,
                Err(e) => return fail(err, Exit::Environment, e),
            };
            let labels: Vec<GoldLabel> = match serde_json::from_str(&text) {
                Ok(l) => l,
                Err(e) => return fail(err, Exit::Semantic, format!("{}: {e}", path.display())),
            };
            match confusion_matrix(&records, &labels) {
                Ok(m) => Some(m),
                Err(e) => return fail(err, Exit::Semantic, e),
            }
        }
    };
    let output = MetricsOutput {
        report: compute_metrics(&records),
        confusion,
    };
    if format != OutputFormat::Table {
        let _ = writeln!(out, "{}", serde_json::to_string_pretty(&output).expect("report serializes"));
    }
    if format == OutputFormat::Both {
        let _ = writeln!(out);
    }
    if format != OutputFormat::Json {
        let _ = write!(out, "{}", render_table(&output.report, output.confusion.as_ref()));
    }
    Exit::Success
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub listen: SocketAddr,
    pub scenarios: Vec<PathBuf>,
    pub llm_endpoint: Option<String>,
    pub llm_model: Option<String>,
    pub llm_timeout: Option<Duration>,
    pub mock_llm: Option<PathBuf>,
    pub store_dir: Option<PathBuf>,
    pub allow_remote_llm: bool,
    pub idle_timeout: Duration,
}

/// Builds the gateway for `serve`. Errors carry the exit code to use.
pub fn build_gateway(opts: &ServeOptions) -> Result<Gateway, (Exit, String)> {
    let env = |e: String| (Exit::Environment, e);
    let backend: Arc<dyn CompletionBackend> = if let Some(path) = &opts.mock_llm {
        let policy = ScriptedPolicy::from_json(&read(path).map_err(env)?)
            .map_err(|e| env(format!("{}: {e}", path.display())))?;
        Arc::new(ScriptedBackend::new(policy))
    } else {
        let url = opts
            .llm_endpoint
            .as_deref()
            .ok_or_else(|| env("no model backend: pass --llm-endpoint or --mock-llm".into()))?;
        let mut config = HttpBackendConfig::new(url).map_err(|e| env(e.to_string()))?;
        if let Some(model) = &opts.llm_model {
            config.model = model.clone();
        }
        config.timeout = opts.llm_timeout;
        config.allow_remote = opts.allow_remote_llm;
        Arc::new(HttpBackend::new(config).map_err(|e| env(e.to_string()))?)
    };

    if opts.scenarios.is_empty() {
        return Err(env("at least one --scenario is required".into()));
    }
    let mut gateway = Gateway::new(backend).with_idle_timeout(opts.idle_timeout);
    for path in &opts.scenarios {
        let scenario = read_scenario(path).map_err(env)?;
        let engine = Engine::new(Arc::new(scenario), SessionConfig::default())
            .map_err(|e| (Exit::Semantic, format!("{}: {e}", path.display())))?;
        gateway = gateway.with_engine(engine);
    }
    if let Some(dir) = &opts.store_dir {
        gateway = gateway.with_store(SessionStore::open(dir).map_err(|e| env(e.to_string()))?);
    }
    Ok(gateway)
}

/// `serve`: runs the websocket gateway until interrupted.
pub async fn serve(opts: ServeOptions) -> Result<(), (Exit, String)> {
    let gateway = build_gateway(&opts)?;
    let listener = tokio::net::TcpListener::bind(opts.listen)
        .await
        .map_err(|e| (Exit::Environment, format!("cannot listen on {}: {e}", opts.listen)))?;
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    };
    reflect_gateway::serve(listener, Arc::new(gateway), shutdown)
        .await
        .map_err(|e| (Exit::Environment, e.to_string()))
}
