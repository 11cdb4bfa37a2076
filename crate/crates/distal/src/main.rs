use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distal::config::Config;
use distal::orchestrator::{
    build_splits, run_strategies, Engine, Orchestrator, StepOutcome, Workspace,
};
use distal::server::{self, Hub};
use distal::sim::{run_experiment, SimSpec};
use distal::store;
use distal::{Error, Result};
use distal_core::metrics::group_tallies;
use distal_core::pool::Provenance;
use distal_core::select::Strategy;
use tracing_subscriber::EnvFilter;

/// Clustering-based active learning with teacher distillation.
#[derive(Parser)]
#[command(name = "distal", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Use the built-in deterministic providers.
    #[arg(long, global = true)]
    mock_providers: bool,
    /// Overrides `state_dir` from the config.
    #[arg(long, global = true)]
    state_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Add a JSONL pool file to the workspace.
    Ingest { path: PathBuf },
    /// Carve out and label the test set, then bootstrap the learner.
    Bootstrap,
    /// Embed the pool and fit the cluster model.
    Cluster,
    /// Run one active-learning iteration.
    Iterate,
    /// Run the loop until the budget is spent.
    Run,
    /// Serve the verification API (and UI) while driving the loop.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        /// Serve the API without advancing the loop.
        #[arg(long)]
        no_drive: bool,
    },
    /// Export labeled pairs.
    ExportSplits(ExportArgs),
    /// Print test-set metrics for the current learner.
    Evaluate {
        /// Also write per-group error counts as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare strategies on synthetic skewed pools.
    Simulate {
        /// Simulation spec (TOML); defaults to the built-in skewed pool.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', value_parser = parse_strategy, default_value = "random,topn,cluster")]
        strategies: Vec<Strategy>,
        /// Number of seeds, starting at `--seed` (default 0).
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value = "sim-out")]
        out: PathBuf,
        /// Runs executed in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-run the loop on a fresh pool, serving provider calls from a
    /// recorded log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Pool file to ingest.
        #[arg(long)]
        pool: PathBuf,
        /// Where the labeled pairs are written.
        #[arg(long, default_value = "replayed.jsonl")]
        output: PathBuf,
    },
}

#[derive(Args)]
struct ExportArgs {
    /// Build the standard, TopN-AL and Cluster-AL splits plus the test set
    /// into this directory from a shared bootstrap.
    #[arg(long, conflicts_with_all = ["provenance", "output"])]
    out: Option<PathBuf>,
    /// Export pairs of these provenances from the current state.
    #[arg(long, value_delimiter = ',', requires = "output")]
    provenance: Vec<Provenance>,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: distal_core::Error| e.to_string())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(g: &Global) -> Result<Config> {
    let mut cfg = match &g.config {
        Some(p) => Config::parse(
            &std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        )?,
        None => Config::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(s) = g.strategy {
        cfg.strategy = s;
    }
    if g.mock_providers {
        cfg.providers.mock = true;
    }
    if let Some(d) = &g.state_dir {
        cfg.state_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the workspace, or starts one if none exists yet.
fn load_workspace(cfg: &Config, g: &Global) -> Result<Workspace> {
    let path = cfg.state_file();
    if !path.exists() {
        return Ok(Workspace::new(cfg, cfg.logical_clock));
    }
    let mut ws = Workspace::load(&path)?;
    if g.seed.is_some_and(|s| s != ws.loop_state.rng_seed) {
        return Err(Error::state(format!(
            "workspace was created with seed {}",
            ws.loop_state.rng_seed
        )));
    }
    if let Some(s) = g.strategy.filter(|s| *s != ws.loop_state.strategy) {
        if ws.iterations_started() {
            return Err(Error::state(format!(
                "cannot switch to {s} after iterations started with {}",
                ws.loop_state.strategy
            )));
        }
        ws.loop_state.strategy = s;
    }
    Ok(ws)
}

fn orchestrator(cfg: &Config, g: &Global) -> Result<Orchestrator> {
    let ws = load_workspace(cfg, g)?;
    let engine = Engine::new(cfg.clone(), cfg.providers(cfg.transport()?))?;
    Ok(Orchestrator::new(engine, ws).with_snapshot(cfg.state_file()))
}

fn report(outcome: StepOutcome, ws: &Workspace) {
    let l = &ws.loop_state;
    match outcome {
        StepOutcome::AwaitingVerification { pending } => {
            println!("{pending} items await verification; start `distal serve` to review them")
        }
        _ => println!(
            "phase {}: {} iterations done, budget {}/{}, {} training pairs, learner {}",
            ws.phase.name(),
            l.iteration,
            l.budget_remaining,
            l.budget_initial,
            ws.pool.training_pairs().count(),
            l.learner_revision
        ),
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest { path } => {
            let cfg = load_config(g)?;
            let mut ws = load_workspace(&cfg, g)?;
            let n = ws.ingest(&path)?;
            ws.save(&cfg.state_file())?;
            println!("ingested {n} instances ({} in pool)", ws.pool.len());
        }
        Command::Bootstrap => {
            let cfg = load_config(g)?;
            let mut o = orchestrator(&cfg, g)?;
            let out = o.bootstrap()?;
            report(out, &o.ws);
        }
        Command::Cluster => {
            let cfg = load_config(g)?;
            let mut o = orchestrator(&cfg, g)?;
            o.cluster()?;
            let sizes =
                o.ws.cluster_model
                    .as_ref()
                    .map(|m| m.sizes())
                    .unwrap_or_default();
            println!("fitted {} clusters, sizes {sizes:?}", sizes.len());
        }
        Command::Iterate => {
            let cfg = load_config(g)?;
            let mut o = orchestrator(&cfg, g)?;
            let out = o.iterate()?;
            report(out, &o.ws);
        }
        Command::Run => {
            let cfg = load_config(g)?;
            let mut o = orchestrator(&cfg, g)?;
            let out = o.run()?;
            report(out, &o.ws);
        }
        Command::Serve { bind, no_drive } => {
            let cfg = load_config(g)?;
            let ws = load_workspace(&cfg, g)?;
            let hub = Hub::new(ws, Some(cfg.state_file()));
            let driver = if no_drive {
                None
            } else {
                let engine = Engine::new(cfg.clone(), cfg.providers(cfg.transport()?))?;
                Some(hub.spawn_driver(engine))
            };
            let bind = bind.unwrap_or_else(|| cfg.server.bind.clone());
            let router = server::router(hub, cfg.server.token.clone(), cfg.server.ui_dir.clone());
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::state(e.to_string()))?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&bind)
                    .await
                    .map_err(|e| Error::Config(format!("cannot bind {bind}: {e}")))?;
                println!(
                    "listening on http://{}",
                    listener
                        .local_addr()
                        .map_err(|e| Error::state(e.to_string()))?
                );
                server::serve(listener, router)
                    .await
                    .map_err(|e| Error::state(e.to_string()))
            })?;
            if let Some(d) = driver.filter(|d| d.is_finished()) {
                d.join()
                    .map_err(|_| Error::state("loop driver panicked"))??;
            }
        }
        Command::ExportSplits(args) => {
            let cfg = load_config(g)?;
            let ws = load_workspace(&cfg, g)?;
            if let Some(out) = args.out {
                if ws.iterations_started() {
                    return Err(Error::state(
                        "splits are built from a state before the first iteration; start from a fresh ingest",
                    ));
                }
                let engine = Engine::new(cfg.clone(), cfg.providers(cfg.transport()?))?;
                let runs = run_strategies(engine, ws, &Strategy::ALL)?;
                let summary = build_splits(&runs, &out)?;
                for (name, n) in &summary.files {
                    println!("{name}: {n} pairs");
                }
                println!("total: {} pairs", summary.total);
            } else {
                let output = args.output.ok_or_else(|| {
                    Error::Config("pass --out DIR or --provenance with --output FILE".into())
                })?;
                let filter = if args.provenance.is_empty() {
                    vec![Provenance::Bootstrap, ws.loop_state.strategy.into()]
                } else {
                    args.provenance
                };
                let n = store::export_split(&ws.pool, &filter, &output)?;
                println!("{n} pairs written to {}", output.display());
            }
        }
        Command::Evaluate { csv } => {
            let cfg = load_config(g)?;
            let mut o = orchestrator(&cfg, g)?;
            let Some((judgments, tokens)) = o.engine.judge_test_set(&mut o.ws)? else {
                return Err(Error::state("no test set to evaluate"));
            };
            let metrics = distal::orchestrator::metrics_for(&judgments, tokens)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            if let Some(path) = csv {
                write_group_csv(&path, &judgments)?;
            }
        }
        Command::Simulate {
            spec,
            strategies,
            seeds,
            out,
            jobs,
        } => {
            let spec = match spec {
                Some(p) => SimSpec::load(&p)?,
                None => SimSpec::default(),
            };
            let start = g.seed.unwrap_or(0);
            let seeds: Vec<u64> = (start..start + seeds).collect();
            let report = run_experiment(&spec, &strategies, &seeds, jobs, Some(&out))?;
            for (s, sum) in &report.strategies {
                println!(
                    "{s:>8}: error-ratio variance {:.6}, score {:.1}, min group labels {:.1}, transfer variance {:.6}",
                    sum.mean_error_ratio_variance,
                    sum.mean_cs_score,
                    sum.mean_min_group_labeled,
                    sum.mean_transfer_error_ratio_variance
                );
            }
            println!("report written to {}", out.join("report.json").display());
        }
        Command::Replay { log, pool, output } => {
            let mut cfg = load_config(g)?;
            if !cfg.verification.auto_approve {
                return Err(Error::Config(
                    "replay requires verification.auto_approve".into(),
                ));
            }
            cfg.providers.record = None;
            let mut ws = Workspace::new(&cfg, cfg.logical_clock);
            ws.ingest(&pool)?;
            let engine = Engine::new(cfg.clone(), cfg.providers(Config::replay_transport(&log)?))?;
            let mut o = Orchestrator::new(engine, ws);
            let out = o.run()?;
            let n = store::export_split(
                &o.ws.pool,
                &[
                    Provenance::Bootstrap,
                    Provenance::Random,
                    Provenance::Topn,
                    Provenance::Cluster,
                ],
                &output,
            )?;
            report(out, &o.ws);
            println!("{n} pairs written to {}", output.display());
        }
    }
    Ok(())
}

fn write_group_csv(path: &Path, judgments: &[distal_core::metrics::Judgment]) -> Result<()> {
    let mut out = String::from("group,errors,total,ratio\n");
    for (g, t) in group_tallies(judgments) {
        let _ = writeln!(out, "{g},{},{},{}", t.errors, t.total, t.ratio());
    }
    store::write_atomic(path, out.as_bytes())
}
