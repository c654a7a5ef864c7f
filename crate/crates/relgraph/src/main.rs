use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use relgraph::config::{ReasonerMode, ServiceConfig};
use relgraph::driver::{AsyncSettle, HttpReasoner};
use relgraph::replay::{self, Timeline};
use relgraph::scenario;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "relgraph", version, about = "Relation graph engine: scenario replay and session service")]
struct Cli {
    /// Reasoner behind relation inference.
    #[arg(long, value_enum, global = true, default_value = "mock")]
    reasoner: ReasonerMode,
    /// Endpoint for `--reasoner http`.
    #[arg(long, global = true, env = "RELGRAPH_HTTP_REASONER_URL")]
    reasoner_url: Option<String>,
    /// Log filter, e.g. `info` or `relgraph=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    /// Replay several scenario files concurrently.
    #[arg(long, global = true)]
    parallel_scenarios: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay scenarios and print or write their timelines.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Write the timeline here (a directory when several scenarios are given).
        #[arg(long)]
        golden: Option<PathBuf>,
    },
    /// Replay a scenario and compare with a golden timeline.
    Verify { scenario: PathBuf, golden: PathBuf },
    /// Start the session service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::Run { scenarios, golden } => {
            let results = replay_all(&cli, scenarios);
            let mut failed = false;
            for (path, result) in scenarios.iter().zip(results) {
                match result {
                    Err(e) => {
                        eprintln!("{e}");
                        failed = true;
                    }
                    Ok(timeline) => match golden {
                        None => print!("{}", timeline.to_jsonl()),
                        Some(out) => {
                            let target = if scenarios.len() > 1 {
                                std::fs::create_dir_all(out)?;
                                out.join(golden_name(path))
                            } else {
                                out.clone()
                            };
                            std::fs::write(&target, timeline.to_jsonl())?;
                            eprintln!("wrote {}", target.display());
                        }
                    },
                }
            }
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Verify { scenario, golden } => {
            let expected = std::fs::read_to_string(golden)
                .map_err(|e| anyhow::anyhow!("reading {}: {e}", golden.display()))?;
            let timeline = match replay_one(&cli, scenario) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("{e}");
                    return Ok(ExitCode::FAILURE);
                }
            };
            match replay::verify(&timeline, &expected) {
                Ok(()) => {
                    println!("pass {}", scenario.display());
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    println!("fail {}: {e}", scenario.display());
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        Command::Serve { config } => {
            let mut config = ServiceConfig::load(config.as_deref())?;
            if cli.reasoner == ReasonerMode::Http {
                config.reasoner = ReasonerMode::Http;
            }
            if let Some(url) = &cli.reasoner_url {
                config.http_reasoner_url = url.clone();
            }
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(relgraph::service::serve(config))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn golden_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("timeline");
    format!("{stem}.jsonl")
}

fn replay_one(cli: &Cli, path: &Path) -> Result<Timeline, String> {
    let scenario = scenario::load(path).map_err(|d| d.to_string())?;
    match cli.reasoner {
        ReasonerMode::Mock => Ok(replay::run(&scenario)),
        ReasonerMode::Http => {
            let url = cli.reasoner_url.clone().unwrap_or_else(|| ServiceConfig::default().http_reasoner_url);
            let mut settle = AsyncSettle::new(Arc::new(HttpReasoner::new(url))).map_err(|e| e.to_string())?;
            Ok(replay::run_with(&scenario, &mut settle))
        }
    }
}

fn replay_all(cli: &Cli, paths: &[PathBuf]) -> Vec<Result<Timeline, String>> {
    if !cli.parallel_scenarios || paths.len() < 2 {
        return paths.iter().map(|p| replay_one(cli, p)).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = paths.iter().map(|p| s.spawn(move || replay_one(cli, p))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err("replay thread panicked".into())))
            .collect()
    })
}
