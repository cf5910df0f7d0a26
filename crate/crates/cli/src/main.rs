use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};
use v2x_basestation::client::HttpBaseLink;
use v2x_basestation::region::{RegionConfig, RegionView, DEFAULT_HISTORY};
use v2x_basestation::service::{BaseStation, ServiceConfig};
use v2x_core::nodes::BaseReport;
use v2x_core::sim::log::{read_ndjson, EventDetail};
use v2x_core::sim::scenario::Scenario;
use v2x_core::sim::{self, RunOptions, SimError, SimOutput};
use v2x_core::uplink::BaseLink;

const EXIT_RUNTIME: u8 = 1;
const EXIT_INVALID: u8 = 2;

/// DSRC V2X emergency-vehicle alert simulator and base station.
#[derive(Parser)]
#[command(name = "v2x", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write the event log, link metrics and alert feeds.
    Run(RunArgs),
    /// Run the base-station service until interrupted.
    Serve(ServeArgs),
    /// Re-send the BASE_REPORT records of an event log to a base station.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (*.scenario.json).
    scenario: PathBuf,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for events.ndjson, metrics.csv,
    /// alert_metrics.csv and feeds/<vehicle-id>.ndjson.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Hold each tick until its wall-clock instant. Needs a base station:
    /// --base, --embedded-base, or base_station.endpoint in the scenario.
    #[arg(long)]
    paced: bool,
    /// Base-station URL, e.g. http://127.0.0.1:8080.
    #[arg(long, conflicts_with = "embedded_base")]
    base: Option<String>,
    /// Start a base station inside this process and serve it on --listen.
    #[arg(long)]
    embedded_base: bool,
    /// Listen address for --embedded-base.
    #[arg(long, default_value = "127.0.0.1:8080", requires = "embedded_base")]
    listen: SocketAddr,
    /// Bearer token for --base (or for the embedded base station).
    #[arg(long, env = "V2X_TOKEN", hide_env_values = true)]
    token: Option<String>,
}

#[derive(Args)]
struct ServeArgs {
    /// HTTP listen address.
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Require this bearer token on every API request.
    #[arg(long, env = "V2X_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Append-only advisory log; replayed on start so advisories survive restarts.
    #[arg(long)]
    persist: Option<PathBuf>,
    /// Console assets to serve at `/`. Defaults to console/dist when it exists.
    #[arg(long)]
    assets: Option<PathBuf>,
    /// Also accept NDJSON reports over plain TCP on this address.
    #[arg(long)]
    ingest_listen: Option<SocketAddr>,
    /// Reports kept per vehicle.
    #[arg(long, default_value_t = DEFAULT_HISTORY)]
    history: usize,
    /// Issue ROUTE_BLOCKED automatically when an RSU reports a hard brake.
    #[arg(long)]
    auto_confirm: bool,
}

#[derive(Args)]
struct ReplayArgs {
    /// Event log written by `v2x run`.
    events: PathBuf,
    /// Playback speed; 10 plays ten times faster than recorded.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    /// Base-station URL.
    #[arg(long)]
    base: String,
    /// Bearer token.
    #[arg(long, env = "V2X_TOKEN", hide_env_values = true)]
    token: Option<String>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Serve(args) => cmd_serve(args).map(|()| ExitCode::SUCCESS),
        Command::Replay(args) => cmd_replay(args).map(|()| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(EXIT_RUNTIME)
    })
}

fn invalid(msg: impl std::fmt::Display) -> anyhow::Result<ExitCode> {
    eprintln!("{msg}");
    Ok(ExitCode::from(EXIT_INVALID))
}

fn cmd_run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let text = fs::read_to_string(&args.scenario).with_context(|| format!("reading {}", args.scenario.display()))?;
    let mut scenario = match Scenario::from_json(&text) {
        Ok(s) => s,
        Err(e) => return invalid(format!("{}: {e}", args.scenario.display())),
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let region = RegionConfig {
        auto_confirm_route_blocked: scenario.base_station.auto_confirm_route_blocked,
        ..RegionConfig::default()
    };
    let base_url = args.base.clone().or_else(|| scenario.base_station.endpoint.clone());
    if args.paced && base_url.is_none() && !args.embedded_base {
        return invalid("--paced needs --base URL, --embedded-base, or base_station.endpoint in the scenario");
    }
    let opts = RunOptions { paced: args.paced };

    let output = if args.embedded_base {
        let config = ServiceConfig { region, token: args.token.clone(), ..ServiceConfig::default() };
        let mut station = BaseStation::open(config)?;
        let listener = std::net::TcpListener::bind(args.listen).with_context(|| format!("binding {}", args.listen))?;
        listener.set_nonblocking(true)?;
        tracing::info!("embedded base station on http://{}", listener.local_addr()?);
        let server = station.clone();
        std::thread::spawn(move || serve_blocking(server, listener, None));
        simulate(&scenario, &mut station, &opts)
    } else if let Some(url) = base_url {
        let mut link = HttpBaseLink::new(&url, args.token.clone())?;
        simulate(&scenario, &mut link, &opts)
    } else {
        simulate(&scenario, &mut RegionView::new(region), &opts)
    };
    let output = match output {
        Ok(o) => o,
        Err(SimError::Invalid(e)) => return invalid(e),
        Err(e) => return Err(e.into()),
    };
    write_outputs(&args.out, &output)?;
    tracing::info!(
        "{} events, {} feeds written to {}",
        output.log.len(),
        output.feeds.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn simulate(scenario: &Scenario, link: &mut dyn BaseLink, opts: &RunOptions) -> Result<SimOutput, SimError> {
    sim::run(scenario, link, opts)
}

fn write_outputs(dir: &Path, output: &SimOutput) -> anyhow::Result<()> {
    let feeds = dir.join("feeds");
    fs::create_dir_all(&feeds).with_context(|| format!("creating {}", feeds.display()))?;
    fs::write(dir.join("events.ndjson"), output.log_ndjson())?;
    let metrics = output.metrics();
    fs::write(dir.join("metrics.csv"), metrics.links_csv())?;
    fs::write(dir.join("alert_metrics.csv"), metrics.alerts_csv())?;
    for (id, entries) in &output.feeds {
        let mut buf = Vec::new();
        for e in entries {
            serde_json::to_writer(&mut buf, e)?;
            buf.push(b'\n');
        }
        fs::write(feeds.join(format!("{id}.ndjson")), buf)?;
    }
    Ok(())
}

fn serve_blocking(
    station: BaseStation,
    listener: std::net::TcpListener,
    ingest: Option<std::net::TcpListener>,
) -> anyhow::Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let http = tokio::net::TcpListener::from_std(listener)?;
        if let Some(ingest) = ingest {
            let ingest = tokio::net::TcpListener::from_std(ingest)?;
            tokio::spawn(station.clone().serve_ingest_stream(ingest));
        }
        tokio::select! {
            r = station.serve(http) => r?,
            _ = tokio::signal::ctrl_c() => tracing::info!("interrupted"),
        }
        Ok(())
    })
}

fn cmd_serve(args: ServeArgs) -> anyhow::Result<()> {
    let assets = args.assets.or_else(|| Some(PathBuf::from("console/dist")).filter(|p| p.is_dir()));
    if let Some(dir) = &assets {
        if !dir.is_dir() {
            bail!("assets directory {} does not exist", dir.display());
        }
    }
    let config = ServiceConfig {
        region: RegionConfig { history: args.history, auto_confirm_route_blocked: args.auto_confirm, ..RegionConfig::default() },
        token: args.token,
        persist: args.persist,
        assets,
    };
    let station = BaseStation::open(config).context("opening base station")?;
    let listener = std::net::TcpListener::bind(args.listen).with_context(|| format!("binding {}", args.listen))?;
    listener.set_nonblocking(true)?;
    let ingest = match args.ingest_listen {
        Some(addr) => {
            let l = std::net::TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            l.set_nonblocking(true)?;
            tracing::info!("NDJSON ingest on tcp://{}", l.local_addr()?);
            Some(l)
        }
        None => None,
    };
    tracing::info!("base station on http://{}", listener.local_addr()?);
    serve_blocking(station, listener, ingest)
}

fn cmd_replay(args: ReplayArgs) -> anyhow::Result<()> {
    if !(args.speed.is_finite() && args.speed > 0.0) {
        bail!("--speed must be a positive number, got {}", args.speed);
    }
    let file = fs::File::open(&args.events).with_context(|| format!("opening {}", args.events.display()))?;
    let log = read_ndjson(BufReader::new(file)).with_context(|| format!("reading {}", args.events.display()))?;
    let mut batches: Vec<(u64, Vec<BaseReport>)> = Vec::new();
    for rec in log {
        if let EventDetail::BaseReport(report) = rec.detail {
            match batches.last_mut() {
                Some((t, batch)) if *t == rec.t => batch.push(report),
                _ => batches.push((rec.t, vec![report])),
            }
        }
    }
    let link = HttpBaseLink::new(&args.base, args.token)?;
    let Some(&(t0, _)) = batches.first() else {
        tracing::warn!("{} has no BASE_REPORT records", args.events.display());
        return Ok(());
    };
    let start = Instant::now();
    let mut sent = 0;
    for (t, batch) in batches {
        let due = Duration::from_secs_f64((t - t0) as f64 / 1000.0 / args.speed);
        if let Some(wait) = due.checked_sub(start.elapsed()) {
            std::thread::sleep(wait);
        }
        let mut body = String::new();
        for r in &batch {
            body.push_str(&serde_json::to_string(r)?);
            body.push('\n');
        }
        let summary = link.ingest_ndjson(body).with_context(|| format!("sending reports for t={t} ms"))?;
        for r in &summary.rejected {
            tracing::warn!("t={t} ms: report {} rejected: {}", r.line, r.reason);
        }
        sent += batch.len();
    }
    tracing::info!("replayed {sent} reports in {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}
