//! The `seastar` command line: run a service tier, run a simulated cluster
//! with a master in front of it, replay and validate event logs, send
//! queries and export state.

pub mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use seastar_api::{master_router, serve, tier_router, Dispatcher, DispatcherConfig, Master, Mode, TierProxy};
use seastar_core::bus::{Bus, BusConfig};
use seastar_core::entity::{parse_duration, Timestamp};
use seastar_core::event::{read_log, LogError, StructuralEvent};
use seastar_core::metric::DEFAULT_LOOKBACK;
use seastar_core::model::{ModelError, ModelStore};
use seastar_core::pipeline::{Pipeline, PipelineConfig, PipelineError, PipelineStats, Shared};
use seastar_core::sensors::ObservedState;
use seastar_core::sim::{ClusterSim, ClusterSpec, SimError, WorkloadScript};
use seastar_core::timeseries::{SeriesKey, StoreConfig};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::watch;

use config::{FileConfig, Overrides, ServeSettings, DEFAULT_LISTEN};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("event {index} rejected: {error}")]
    Replay { index: usize, error: ModelError },
    #[error("{} structural violations, first: {first}", .count)]
    Invalid { count: usize, first: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Http(String),
    #[error("server answered {0}")]
    Status(u16),
    #[error("i/o: {0}")]
    Runtime(#[from] std::io::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "seastar", version, about = "Temporal anatomy and context graphs of a cluster, served over HTTP")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an API instance (master, forwarder or frontend).
    Serve(ServeArgs),
    /// Simulate a cluster and serve its model as a master.
    Sim(SimArgs),
    /// Rebuild a model from an event log and summarise it.
    Replay(ReplayArgs),
    /// POST a selection query and print the response body.
    Query(QueryArgs),
    /// Print observed state from a log, or one series from a simulation as CSV.
    Export(ExportArgs),
    /// Check an event log, or a cluster spec and workload script.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML file with any of: listen, mode, upstream, cache_ttl, cache_capacity, partition, log.
    #[arg(long, env = "SEASTAR_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "SEASTAR_LISTEN")]
    pub listen: Option<String>,
    #[arg(long, env = "SEASTAR_MODE")]
    pub mode: Option<String>,
    #[arg(long, env = "SEASTAR_UPSTREAM")]
    pub upstream: Option<String>,
    #[arg(long, env = "SEASTAR_CACHE_TTL")]
    pub cache_ttl: Option<String>,
    #[arg(long, env = "SEASTAR_CACHE_CAPACITY")]
    pub cache_capacity: Option<u64>,
    /// Entity-id prefixes this tier caches (comma separated).
    #[arg(long, env = "SEASTAR_PARTITION", value_delimiter = ',')]
    pub partition: Option<Vec<String>>,
    /// Event log to preload (master only).
    #[arg(long, env = "SEASTAR_LOG")]
    pub log: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Cluster spec (JSON).
    #[arg(long, env = "SEASTAR_SPEC")]
    pub spec: PathBuf,
    /// Workload script (JSON).
    #[arg(long, env = "SEASTAR_SCRIPT")]
    pub script: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long, env = "SEASTAR_SEED")]
    pub seed: Option<u64>,
    /// Simulated time to run.
    #[arg(long, env = "SEASTAR_DURATION", default_value = "120s", value_parser = duration_arg)]
    pub duration: Timestamp,
    /// Simulator step.
    #[arg(long, env = "SEASTAR_TICK", default_value = "100ms", value_parser = duration_arg)]
    pub tick: Timestamp,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Write applied structural events here as NDJSON.
    #[arg(long, env = "SEASTAR_LOG")]
    pub log: Option<PathBuf>,
    #[arg(long, env = "SEASTAR_LISTEN", default_value = DEFAULT_LISTEN)]
    pub listen: String,
    /// Simulated seconds per wall second; 0 runs unthrottled.
    #[arg(long, env = "SEASTAR_SPEED", default_value_t = 0.0)]
    pub speed: f64,
    /// Keep serving after the simulation ends, until interrupted.
    #[arg(long)]
    pub hold: bool,
    /// Persist bus topics under this directory.
    #[arg(long, env = "SEASTAR_SPILL_DIR")]
    pub spill_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub file: PathBuf,
    /// Instant to summarise (default: the last event).
    #[arg(long, value_parser = duration_arg)]
    pub at: Option<Timestamp>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Base URL of an instance, e.g. http://127.0.0.1:7400
    pub url: String,
    pub query_file: PathBuf,
    #[arg(long, value_parser = duration_arg)]
    pub at: Option<Timestamp>,
    #[arg(long)]
    pub node: Option<String>,
    #[arg(long)]
    pub pid: Option<u64>,
    #[arg(long)]
    pub tid: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Event log to export observed state from.
    #[arg(long, conflicts_with_all = ["entity", "metric", "spec"])]
    pub log: Option<PathBuf>,
    #[arg(long, value_parser = duration_arg, requires = "log")]
    pub at: Option<Timestamp>,
    /// Full entity id of the series to export.
    #[arg(long, requires_all = ["metric", "spec"])]
    pub entity: Option<String>,
    #[arg(long, requires = "entity")]
    pub metric: Option<String>,
    #[arg(long, requires = "script")]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "120s", value_parser = duration_arg)]
    pub duration: Timestamp,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, conflicts_with_all = ["spec", "script"], required_unless_present = "spec")]
    pub log: Option<PathBuf>,
    #[arg(long, requires = "script")]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub script: Option<PathBuf>,
}

fn duration_arg(text: &str) -> Result<Timestamp, String> {
    parse_duration(text).ok_or_else(|| format!("`{text}` is not a duration (e.g. 60s, 500ms, 2m)"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Loads a scenario and builds its simulator.
pub fn load_sim(spec: &Path, script: &Path, seed: Option<u64>) -> Result<ClusterSim, CliError> {
    let mut spec: ClusterSpec = read_json(spec)?;
    let script: WorkloadScript = read_json(script)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    Ok(ClusterSim::build(spec, script)?)
}

pub fn load_log(path: &Path) -> Result<Vec<StructuralEvent>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_log(BufReader::new(file))?)
}

pub fn replay_log(path: &Path) -> Result<ModelStore, CliError> {
    let events = load_log(path)?;
    ModelStore::replay(&events).map_err(|(index, error)| CliError::Replay { index, error })
}

fn print_json(value: &serde_json::Value) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(std::io::Error::from)?;
    writeln!(out)?;
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

/// Resolves when the process is interrupted or `stop` flips to true.
async fn interrupted(mut stop: watch::Receiver<bool>) {
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = stop.wait_for(|s| *s) => {}
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Serve(args) => serve_cmd(args),
        Command::Sim(args) => sim_cmd(args),
        Command::Replay(args) => replay_cmd(args),
        Command::Query(args) => query_cmd(args),
        Command::Export(args) => export_cmd(args),
        Command::Validate(args) => validate_cmd(args),
    }
}

fn serve_cmd(args: ServeArgs) -> Result<(), CliError> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let settings = ServeSettings::resolve(
        file,
        Overrides {
            listen: args.listen,
            mode: args.mode,
            upstream: args.upstream,
            cache_ttl: args.cache_ttl,
            cache_capacity: args.cache_capacity,
            partition: args.partition,
            log: args.log,
        },
    )?;
    if settings.tier.mode != Mode::Master && settings.log.is_some() {
        return Err(CliError::Config("--log preloads a master only".into()));
    }
    let preload = settings.log.as_deref().map(|p| replay_log(Path::new(p))).transpose()?;
    runtime()?.block_on(async move {
        let router = match settings.tier.mode {
            Mode::Master => {
                let shared = Shared::new(Bus::in_memory(BusConfig::default()), StoreConfig::default(), DEFAULT_LOOKBACK);
                if let Some(model) = preload {
                    shared.clock.store(model.last_ts().unwrap_or(0), Ordering::Release);
                    *shared.model.write() = model;
                }
                let dispatcher = Dispatcher::spawn(DispatcherConfig::default());
                master_router(Master::new(shared).with_dispatcher(dispatcher))
            }
            Mode::Forwarder | Mode::Frontend => tier_router(TierProxy::new(settings.tier.clone()).map_err(CliError::Config)?),
        };
        let listener = TcpListener::bind(&settings.listen)
            .await
            .map_err(|e| CliError::Config(format!("cannot listen on {}: {e}", settings.listen)))?;
        eprintln!("seastar {} listening on {}", settings.tier.mode, listener.local_addr()?);
        let (_keep, stop) = watch::channel(false);
        serve(listener, router, interrupted(stop)).await?;
        Ok(())
    })
}

fn sim_cmd(args: SimArgs) -> Result<(), CliError> {
    if !(args.speed.is_finite() && args.speed >= 0.0) {
        return Err(CliError::Config("--speed must be a non-negative number".into()));
    }
    let scenario = args.scenario.clone();
    let sim = load_sim(&scenario.spec, &scenario.script, scenario.seed)?;
    let mut config = PipelineConfig {
        tick: scenario.tick,
        ..PipelineConfig::default()
    };
    config.bus.spill_dir = args.spill_dir.clone();
    let mut pipeline = Pipeline::new(sim, config)?;
    if let Some(path) = &args.log {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        pipeline.shared().model.write().set_sink(Box::new(BufWriter::new(file)));
    }

    runtime()?.block_on(async move {
        let shared = pipeline.shared();
        let dispatcher = Dispatcher::spawn(DispatcherConfig::default());
        let latest = Arc::new(Mutex::new(PipelineStats::default()));
        let hook_stats = latest.clone();
        let master = Master::new(shared)
            .with_dispatcher(dispatcher.clone())
            .with_stats(Arc::new(move || json!(*hook_stats.lock().expect("stats lock"))));
        let listener = TcpListener::bind(&args.listen)
            .await
            .map_err(|e| CliError::Config(format!("cannot listen on {}: {e}", args.listen)))?;
        eprintln!("seastar sim listening on {}", listener.local_addr()?);

        let (stop_tx, stop_rx) = watch::channel(false);
        let server = tokio::spawn(serve(listener, master_router(master), interrupted(stop_rx.clone())));
        let halted = Arc::new(AtomicBool::new(false));
        let flag = halted.clone();
        let mut watch_stop = stop_rx.clone();
        tokio::spawn(async move {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => flag.store(true, Ordering::Release),
                _ = watch_stop.wait_for(|s| *s) => {}
            }
        });

        let submit = dispatcher.clone();
        let flag = halted.clone();
        let (duration, speed) = (scenario.duration, args.speed);
        let stats = tokio::task::spawn_blocking(move || -> Result<PipelineStats, CliError> {
            let wall = Instant::now();
            let start = pipeline.clock();
            let outcome = (|| {
                while pipeline.clock() <= duration && !flag.load(Ordering::Acquire) {
                    for note in pipeline.step()? {
                        submit.submit(note);
                    }
                    *latest.lock().expect("stats lock") = pipeline.stats();
                    if speed > 0.0 {
                        let due = Duration::from_secs_f64((pipeline.clock() - start) as f64 / 1e9 / speed);
                        if let Some(wait) = due.checked_sub(wall.elapsed()) {
                            std::thread::sleep(wait);
                        }
                    }
                }
                Ok::<_, CliError>(())
            })();
            // Flush whatever was applied, also on error or interrupt.
            pipeline.flush()?;
            outcome?;
            Ok(pipeline.stats())
        })
        .await
        .map_err(|e| CliError::Config(format!("simulation thread failed: {e}")))??;

        dispatcher.drain(Duration::from_secs(10)).await;
        if args.hold && !halted.load(Ordering::Acquire) {
            eprintln!("simulation finished at {}ns; serving until interrupted", stats.clock);
        } else {
            let _ = stop_tx.send(true);
        }
        server.await.map_err(|e| CliError::Config(format!("server task failed: {e}")))??;
        print_json(&json!({
            "clock": stats.clock,
            "ticks": stats.ticks,
            "structural_events": stats.structural_events,
            "notifications": stats.notifications,
            "ingest": stats.ingest,
            "exporters": stats.exporters,
            "webhooks": dispatcher.stats(),
            "interrupted": halted.load(Ordering::Acquire),
        }))
    })
}

/// Counts of what is alive in `model` at `t`.
pub fn summarize(model: &ModelStore, t: Timestamp) -> serde_json::Value {
    let state = ObservedState::from_model(model, t);
    json!({
        "events": model.next_seq(),
        "last_ts": model.last_ts(),
        "at": t,
        "applications": model.applications().count(),
        "entities": state.entities.len(),
        "edges": state.edges.len(),
        "mappings": state.mappings.len(),
        "violations": model.validate_all().len(),
    })
}

fn replay_cmd(args: ReplayArgs) -> Result<(), CliError> {
    let model = replay_log(&args.file)?;
    let t = args.at.or(model.last_ts()).unwrap_or(0);
    print_json(&summarize(&model, t))
}

fn query_cmd(args: QueryArgs) -> Result<(), CliError> {
    let body = std::fs::read(&args.query_file).map_err(|e| CliError::io(&args.query_file, e))?;
    let mut url = format!("{}/query", args.url.trim_end_matches('/'));
    if let Some(t) = args.at {
        url.push_str(&format!("?t={t}"));
    }
    runtime()?.block_on(async move {
        let mut req = reqwest::Client::new().post(&url).body(body);
        let identity = [
            (seastar_api::view::HEADER_NODE, args.node),
            (seastar_api::view::HEADER_PID, args.pid.map(|p| p.to_string())),
            (seastar_api::view::HEADER_TID, args.tid.map(|t| t.to_string())),
        ];
        for (name, value) in identity {
            if let Some(v) = value {
                req = req.header(name, v);
            }
        }
        let resp = req.send().await.map_err(|e| CliError::Http(format!("{url}: {e}")))?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| CliError::Http(format!("{url}: {e}")))?;
        let mut out = std::io::stdout().lock();
        out.write_all(&bytes)?;
        out.flush()?;
        if status.is_success() {
            Ok(())
        } else {
            Err(CliError::Status(status.as_u16()))
        }
    })
}

fn export_cmd(args: ExportArgs) -> Result<(), CliError> {
    if let Some(path) = &args.log {
        let model = replay_log(path)?;
        let t = args.at.or(model.last_ts()).unwrap_or(0);
        return print_json(&json!(ObservedState::from_model(&model, t)));
    }
    let (Some(entity), Some(metric), Some(spec), Some(script)) = (&args.entity, &args.metric, &args.spec, &args.script)
    else {
        return Err(CliError::Config(
            "export needs --log, or --entity --metric --spec --script".into(),
        ));
    };
    let sim = load_sim(spec, script, args.seed)?;
    let mut pipeline = Pipeline::new(sim, PipelineConfig::default())?;
    pipeline.run_until(args.duration, |_| {})?;
    let key = SeriesKey::new(entity.as_str(), metric.as_str());
    pipeline
        .shared()
        .samples
        .export_csv(&key, std::io::stdout().lock())
        .map_err(|e| CliError::Config(format!("{entity} {metric}: {e}")))?;
    Ok(())
}

fn validate_cmd(args: ValidateArgs) -> Result<(), CliError> {
    if let Some(path) = &args.log {
        let model = replay_log(path)?;
        let violations = model.validate_all();
        if let Some(first) = violations.first() {
            return Err(CliError::Invalid {
                count: violations.len(),
                first: format!("{first:?}"),
            });
        }
    } else if let (Some(spec), Some(script)) = (&args.spec, &args.script) {
        load_sim(spec, script, None)?;
    }
    println!("ok");
    Ok(())
}
