use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::{Arc, RwLock};

use anyhow::{anyhow, bail, Context, Result};
use chrono::{NaiveDate, NaiveDateTime};
use clap::{Parser, Subcommand, ValueEnum};
use edf_core::config::Config;
use edf_core::event_store::{write_csv, write_jsonl, EventStore, InputFormat};
use edf_core::forecaster::{render_table, train_grid, EvaluationRow, Family, GridOptions};
use edf_core::service::{
    replay, ActionLog, ModelBundle, PredictionLog, RealClock, ReplayClock, Scheduler, Service, StoreSource,
};
use edf_core::simulator::{default_profile, generate, SimProfile};
use edf_core::timefmt;
use edf_core::timeseries::{build_frame, Grid};

#[derive(Parser)]
#[command(name = "edf", version, about = "ED census and arrivals forecasting")]
struct Cli {
    /// TOML or JSON configuration file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load encounters from a CSV or JSONL file into the event store.
    Ingest { file: PathBuf },
    /// Generate synthetic encounters.
    Simulate {
        /// JSON profile; defaults to the built-in profile.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Half-open span `A..B`, dates or minute timestamps.
        #[arg(long)]
        span: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file (.csv or .jsonl); stdout as CSV when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also load the generated encounters into the event store.
        #[arg(long)]
        ingest: bool,
    },
    /// Train and evaluate every model family on every target.
    Train {
        /// First test tick; training uses everything before it.
        #[arg(long)]
        split: String,
        /// End of the series used for training and testing (exclusive).
        #[arg(long)]
        end: Option<String>,
        /// Comma-separated families to train; all six when absent.
        #[arg(long, value_delimiter = ',')]
        families: Vec<String>,
    },
    /// Print the test-set evaluation of the trained grid.
    Evaluate {
        #[arg(long)]
        json: bool,
    },
    /// Run the live loop and the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, value_enum, default_value_t = ClockKind::Real)]
        clock: ClockKind,
        /// Simulated minutes per wall-clock minute for the replay clock.
        #[arg(long, default_value_t = 60.0)]
        speed: f64,
        /// Start of the replay clock.
        #[arg(long)]
        from: Option<String>,
    },
    /// Run every tick in `[from, to)` as fast as possible.
    Replay {
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClockKind {
    Real,
    Replay,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    match cli.command {
        Command::Ingest { file } => ingest(&cfg, &file),
        Command::Simulate { profile, span, seed, out, ingest } => {
            simulate(&cfg, profile.as_deref(), &span, seed, out.as_deref(), ingest)
        }
        Command::Train { split, end, families } => train(&cfg, &split, end.as_deref(), &families),
        Command::Evaluate { json } => evaluate(&cfg, json),
        Command::Serve { port, clock, speed, from } => serve(&cfg, port, clock, speed, from.as_deref()),
        Command::Replay { from, to } => replay_span(&cfg, &from, &to),
    }
}

/// `2017-11-01` or `2017-11-01T06:15`.
fn when(s: &str) -> Result<NaiveDateTime> {
    if let Some(t) = timefmt::parse(s) {
        return Ok(t);
    }
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight"))
        .map_err(|_| anyhow!("{s:?} is neither YYYY-MM-DD nor YYYY-MM-DDTHH:MM"))
}

fn span(s: &str) -> Result<(NaiveDateTime, NaiveDateTime)> {
    let (a, b) = s.split_once("..").ok_or_else(|| anyhow!("span {s:?} must look like A..B"))?;
    let (a, b) = (when(a)?, when(b)?);
    if a >= b {
        bail!("span start must precede its end");
    }
    Ok((a, b))
}

fn open_store(cfg: &Config) -> Result<EventStore> {
    std::fs::create_dir_all(&cfg.data_dir).with_context(|| format!("creating {}", cfg.data_dir.display()))?;
    Ok(EventStore::open(cfg.encounters_log())?)
}

fn load_bundle(cfg: &Config) -> Result<ModelBundle> {
    let path = cfg.model_bundle();
    ModelBundle::load(&path).with_context(|| format!("loading {} (run `edf train` first)", path.display()))
}

fn ingest(cfg: &Config, file: &Path) -> Result<()> {
    let store = open_store(cfg)?;
    let report = store.ingest_path(file).with_context(|| format!("ingesting {}", file.display()))?;
    println!(
        "rows {}  accepted {}  rejected {}  replaced {}  with acuity {}  store size {}",
        report.rows,
        report.accepted,
        report.rejected,
        report.replaced,
        report.with_acuity,
        store.len()
    );
    for r in report.rejects.iter().take(20) {
        println!("  row {}: {}", r.row, r.reason);
    }
    if report.rejects.len() > 20 {
        println!("  ... {} more", report.rejects.len() - 20);
    }
    Ok(())
}

fn simulate(
    cfg: &Config,
    profile: Option<&Path>,
    span_arg: &str,
    seed: Option<u64>,
    out: Option<&Path>,
    load: bool,
) -> Result<()> {
    let (start, end) = span(span_arg)?;
    let mut p: SimProfile = match profile {
        Some(path) => SimProfile::from_json_file(path)?,
        None => default_profile(),
    };
    if let Some(s) = seed {
        p = p.with_seed(s);
    }
    let records = generate(&p, start, end)?.collect::<Vec<_>>();
    match out {
        Some(path) => {
            let w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
            match InputFormat::from_path(path)? {
                InputFormat::Csv => write_csv(w, &records)?,
                InputFormat::Jsonl => write_jsonl(w, &records)?,
            }
            log::info!("wrote {} encounters to {}", records.len(), path.display());
        }
        None if !load => {
            let stdout = std::io::stdout();
            write_csv(stdout.lock(), &records)?;
        }
        None => {}
    }
    if load {
        let store = open_store(cfg)?;
        let n = store.insert_all(records)?;
        log::info!("stored {n} encounters; store size {}", store.len());
    }
    Ok(())
}

fn train(cfg: &Config, split: &str, end: Option<&str>, families: &[String]) -> Result<()> {
    let split = when(split)?;
    let mut opts = GridOptions::default();
    if !families.is_empty() {
        opts.families = families
            .iter()
            .map(|f| Family::parse(f).ok_or_else(|| anyhow!("unknown model family {f:?}")))
            .collect::<Result<_>>()?;
    }
    let store = open_store(cfg)?;
    let snap = store.snapshot();
    let grid = Grid::from_records(snap.records()).ok_or_else(|| anyhow!("the event store is empty"))?;
    let end_tick = match end {
        Some(e) => grid.ceil_tick(when(e)?),
        None => grid.ceil_tick(snap.last_arrival().expect("non-empty store")) + 1,
    };
    let start_tick = grid.tick_at(grid.epoch())?;
    let frame = build_frame(snap.records(), grid, start_tick, end_tick, cfg.stay_cap())?;
    log::info!(
        "training on {} ticks from {} to {}, split at {}",
        frame.len(),
        timefmt::format(&grid.timestamp(start_tick)),
        timefmt::format(&grid.timestamp(end_tick)),
        timefmt::format(&split)
    );
    let models = train_grid(&frame, split, &cfg.train, &opts)?;
    let bundle = ModelBundle::from_grid(&frame, models, cfg.stay_cap())?;
    bundle.save(cfg.model_bundle())?;
    let rows = bundle.models.report();
    serde_json::to_writer_pretty(BufWriter::new(File::create(cfg.evaluation_report())?), &rows)?;
    render_table(std::io::stdout().lock(), &rows)?;
    println!("saved {}", cfg.model_bundle().display());
    Ok(())
}

fn evaluate(cfg: &Config, json: bool) -> Result<()> {
    let bundle = load_bundle(cfg)?;
    let rows: Vec<EvaluationRow> = bundle.models.report();
    let mut out = std::io::stdout().lock();
    if json {
        serde_json::to_writer_pretty(&mut out, &rows)?;
        writeln!(out)?;
    } else {
        writeln!(out, "split {}", timefmt::format(&bundle.models.split))?;
        render_table(&mut out, &rows)?;
        writeln!(out)?;
        writeln!(out, "deployed (lowest test MAE unless configured):")?;
        let overrides = cfg.deployment_overrides()?;
        let deployment = edf_core::service::Deployment::from_grid(&bundle.models, &overrides)?;
        for m in deployment.models() {
            writeln!(out, "  {:<22} {}", m.target.label(), m.family)?;
        }
    }
    Ok(())
}

fn build_service(cfg: &Config) -> Result<Service> {
    let bundle = load_bundle(cfg)?;
    let store = Arc::new(open_store(cfg)?);
    let source = StoreSource::new(store, bundle.grid(), cfg.stay_cap());
    let service = Service::from_bundle(bundle, source, &cfg.deployment_overrides()?, cfg.thresholds)?;
    Ok(service.with_logs(
        PredictionLog::open(cfg.predictions_log())?,
        ActionLog::open(cfg.actions_log())?,
    ))
}

fn replay_span(cfg: &Config, from: &str, to: &str) -> Result<()> {
    let (from, to) = (when(from)?, when(to)?);
    let mut service = build_service(cfg)?;
    let summary = replay(&mut service, from, to)?;
    println!(
        "ticks {}  predictions {}  reconciled {}  unreconcilable {}",
        summary.ticks, summary.predictions, summary.reconciled, summary.unreconcilable
    );
    Ok(())
}

fn serve(cfg: &Config, port: Option<u16>, clock: ClockKind, speed: f64, from: Option<&str>) -> Result<()> {
    let service = Arc::new(RwLock::new(build_service(cfg)?));
    let scheduler = match clock {
        ClockKind::Real => Scheduler::new(RealClock),
        ClockKind::Replay => {
            let origin = when(from.ok_or_else(|| anyhow!("--clock replay needs --from"))?)?;
            Scheduler::new(ReplayClock::new(origin, speed)?)
        }
    };
    let stop = scheduler.stop_handle();
    let loop_service = Arc::clone(&service);
    let live_loop = std::thread::spawn(move || scheduler.run(&loop_service, None));

    let addr = format!("{}:{}", cfg.bind, port.unwrap_or(cfg.port));
    let state = edf_server::AppState::new(service, cfg.api_token.clone());
    let runtime = tokio::runtime::Runtime::new()?;
    let served = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        };
        edf_server::serve(listener, state, shutdown).await?;
        anyhow::Ok(())
    });
    stop.store(true, Ordering::Relaxed);
    let ticks = live_loop.join().map_err(|_| anyhow!("live loop panicked"))??;
    log::info!("live loop ran {ticks} ticks");
    served
}
