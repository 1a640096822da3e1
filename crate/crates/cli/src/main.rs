use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use explainer_core::config::{ExplainerConfig, LlmBackend};
use explainer_core::env::{GridMap, StateId};
use explainer_core::eval::{bundled_query_set_dir, rulebook_for, run_eval, QuerySet};
use explainer_core::llm::{deterministic_double, ChatClient};
use explainer_core::mcts::plan_step;
use explainer_core::pipeline::ask;
use explainer_core::querygen::{build_query_set, QueryGenOptions};
use explainer_core::trace::{load_trace, save_trace, validate_trace};

#[derive(Parser)]
#[command(name = "explainer", version, about = "Plan on a slippery grid world and explain the search trees")]
struct Cli {
    /// TOML config; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the query set through the pipeline and report accuracy.
    Eval {
        #[arg(long)]
        query_set: Option<PathBuf>,
        #[arg(long, value_parser = parse_backend, default_value = "double")]
        llm: LlmBackend,
        /// Report file; `.json` gives the structured form, anything else text.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the query set and its traces.
    GenQueries {
        #[arg(long, default_value_t = QueryGenOptions::default().seed)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan once and save the trace.
    Plan {
        #[arg(long, default_value_t = 0)]
        state: u32,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        step: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check trace files; exits nonzero if any has violations.
    Validate {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// Ask one question about a saved trace and print the outcome as JSON.
    Ask {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long, value_parser = parse_backend)]
        llm: Option<LlmBackend>,
        /// Where to save the expanded trace, if expansion happens.
        #[arg(long)]
        save_expanded: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value = "traces")]
        trace_dir: PathBuf,
        #[arg(long, value_parser = parse_backend)]
        llm: Option<LlmBackend>,
    },
}

fn parse_backend(s: &str) -> Result<LlmBackend, String> {
    s.parse()
}

fn load_config(path: Option<&Path>) -> Result<ExplainerConfig> {
    match path {
        Some(p) => ExplainerConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExplainerConfig::default()),
    }
}

fn client(config: &ExplainerConfig, backend: Option<LlmBackend>) -> Result<Arc<dyn ChatClient>> {
    let mut settings = config.llm.clone();
    if let Some(b) = backend {
        settings.backend = b;
    }
    settings.client().context("building the llm client")
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Eval { query_set, llm, out } => {
            let dir = query_set.unwrap_or_else(bundled_query_set_dir);
            let set = QuerySet::load(&dir).with_context(|| format!("loading query set {}", dir.display()))?;
            let client: Arc<dyn ChatClient> = match llm {
                LlmBackend::Double => Arc::new(deterministic_double(rulebook_for(&set.samples))),
                LlmBackend::Live => client(&config, Some(LlmBackend::Live))?,
            };
            let report = run_eval(&set, client.as_ref(), &config)?;
            let live = llm == LlmBackend::Live;
            let text = report.to_text(live);
            print!("{text}");
            if let Some(path) = out {
                let body = if path.extension().is_some_and(|e| e == "json") { report.to_json() } else { text };
                std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
            }
            // Live numbers are comparative only; the offline gate applies to the double.
            let failures = report.gate_failures();
            if !live && !failures.is_empty() {
                eprintln!("gate failed: {}", failures.join("; "));
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GenQueries { seed, out } => {
            let map = config.grid_map()?;
            let opts = QueryGenOptions { seed, thresholds: config.thresholds, ..Default::default() };
            let set = build_query_set(&map, &opts)?;
            set.save(&out)?;
            println!("wrote {} samples and {} traces to {}", set.samples.len(), set.traces.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Plan { state, budget, seed, step, out } => {
            let map: GridMap = config.grid_map()?;
            let mut params = config.planner.params();
            params.iteration_budget = budget.unwrap_or(params.iteration_budget);
            params.seed = seed.unwrap_or(params.seed);
            let (action, tree) = plan_step(&map, StateId(state), &params, step)?;
            save_trace(&tree, &out)?;
            println!("chosen {action} from state {state}; {} nodes saved to {}", tree.nodes.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { traces } => {
            let mut bad = 0;
            for path in &traces {
                let tree = match load_trace(path) {
                    Ok(t) => t,
                    Err(e) => {
                        println!("{}: {e}", path.display());
                        bad += 1;
                        continue;
                    }
                };
                let violations = validate_trace(&tree);
                if violations.is_empty() {
                    println!("{}: ok ({} nodes, {} edges)", path.display(), tree.nodes.len(), tree.edges.len());
                } else {
                    bad += 1;
                    println!("{}: {} violations", path.display(), violations.len());
                    for v in violations {
                        println!("  {v}");
                    }
                }
            }
            Ok(if bad == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Ask { trace, question, llm, save_expanded } => {
            let tree = load_trace(&trace)?;
            let violations = validate_trace(&tree);
            if !violations.is_empty() {
                bail!("{} is not a valid trace: {}", trace.display(), violations[0]);
            }
            let map = tree.map()?;
            let client = client(&config, llm)?;
            let outcome = ask(&tree, &map, &question, client.as_ref(), &config, &explainer_service::now_rfc3339())
                .map_err(|e| anyhow::anyhow!("{}: {e}", e.code()))?;
            if let (Some(path), true) = (save_expanded, outcome.expansion_performed) {
                save_trace(&outcome.tree, &path)?;
            }
            println!("{}", serde_json::to_string_pretty(&outcome)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { bind, trace_dir, llm } => {
            let client = client(&config, llm)?;
            let state = explainer_service::AppState::new(config, client, trace_dir);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(explainer_service::serve(state, &bind))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
