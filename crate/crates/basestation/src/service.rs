//! HTTP front end for the region view.

use crate::region::{
    Advisory, AdvisoryError, Delta, IngestOutcome, RegionConfig, RegionView, RsuEntry, Snapshot,
};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use std::convert::Infallible;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};
use tokio::io::{AsyncBufReadExt, BufReader as AsyncBufReader};
use tokio::net::TcpListener;
use tokio::sync::broadcast;
use tower_http::services::ServeDir;
use v2x_core::geo::GeoPoint;
use v2x_core::nodes::BaseReport;
use v2x_core::uplink::{AdvisoryCommand, BaseLink, LinkError, RsuDirectives};
use v2x_core::wire::{AlertKind, NodeId};

/// Deltas buffered per stream client before it is considered lagging.
const STREAM_BUFFER: usize = 4096;
const HOUSEKEEPING_PERIOD: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    pub region: RegionConfig,
    /// Static bearer token required on every API request when set.
    pub token: Option<String>,
    /// Append-only log of advisories and RSUs, replayed on start.
    pub persist: Option<PathBuf>,
    /// Directory of console assets served at `/`.
    pub assets: Option<PathBuf>,
}

/// Simulation time as seen by the service: the newest timestamp any client
/// has reported, advanced by wall time since.
#[derive(Debug)]
struct Clock {
    base_ms: u64,
    at: Instant,
}

impl Clock {
    fn now(&self) -> u64 {
        self.base_ms + self.at.elapsed().as_millis() as u64
    }

    fn observe(&mut self, t: u64) {
        if t > self.now() {
            self.base_ms = t;
            self.at = Instant::now();
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum PersistRecord {
    Advisory(Advisory),
    Rsu(RsuEntry),
}

struct Shared {
    view: Mutex<RegionView>,
    clock: Mutex<Clock>,
    tx: broadcast::Sender<Arc<str>>,
    token: Option<String>,
    persist: Option<Mutex<File>>,
    assets: Option<PathBuf>,
}

/// A running base station; cheap to clone.
#[derive(Clone)]
pub struct BaseStation {
    shared: Arc<Shared>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn load_persisted(path: &PathBuf, view: &mut RegionView) -> io::Result<u64> {
    let mut newest = 0;
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(e),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PersistRecord>(&line) {
            Ok(PersistRecord::Advisory(a)) => {
                newest = newest.max(a.issued_at_ms);
                view.restore_advisory(a);
            }
            Ok(PersistRecord::Rsu(r)) => {
                newest = newest.max(r.last_seen_ms);
                view.restore_rsu(r);
            }
            Err(e) => tracing::warn!("{}:{}: skipping unreadable record: {e}", path.display(), i + 1),
        }
    }
    Ok(newest)
}

impl BaseStation {
    pub fn open(config: ServiceConfig) -> io::Result<BaseStation> {
        let mut view = RegionView::new(config.region.clone());
        let mut start_ms = 0;
        let persist = match &config.persist {
            Some(path) => {
                start_ms = load_persisted(path, &mut view)?;
                Some(Mutex::new(OpenOptions::new().create(true).append(true).open(path)?))
            }
            None => None,
        };
        let (tx, _) = broadcast::channel(STREAM_BUFFER);
        Ok(BaseStation {
            shared: Arc::new(Shared {
                view: Mutex::new(view),
                clock: Mutex::new(Clock { base_ms: start_ms, at: Instant::now() }),
                tx,
                token: config.token,
                persist,
                assets: config.assets,
            }),
        })
    }

    pub fn now(&self) -> u64 {
        lock(&self.shared.clock).now()
    }

    fn observe(&self, t: u64) -> u64 {
        let mut clock = lock(&self.shared.clock);
        clock.observe(t);
        clock.now()
    }

    /// Runs `f` under the view lock and publishes what changed, in order.
    fn apply<R>(&self, f: impl FnOnce(&mut RegionView) -> (R, Vec<Delta>)) -> R {
        let mut view = lock(&self.shared.view);
        let (result, deltas) = f(&mut view);
        for d in &deltas {
            self.persist(d);
            if let Ok(json) = serde_json::to_string(d) {
                // No receivers is fine.
                let _ = self.shared.tx.send(json.into());
            }
        }
        result
    }

    fn persist(&self, delta: &Delta) {
        let Some(file) = &self.shared.persist else { return };
        let record = match delta {
            Delta::Advisory(a) => PersistRecord::Advisory(a.clone()),
            Delta::Rsu(r) => PersistRecord::Rsu(r.clone()),
            _ => return,
        };
        let mut file = lock(file);
        let result = serde_json::to_writer(&mut *file, &record)
            .map_err(io::Error::from)
            .and_then(|_| file.write_all(b"\n"))
            .and_then(|_| file.flush());
        if let Err(e) = result {
            tracing::error!("persisting {record:?}: {e}");
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        let now = self.now();
        self.apply(|v| {
            let deltas = v.advance_clock(now);
            (v.snapshot(), deltas)
        })
    }

    pub fn ingest(&self, report: BaseReport) -> Result<IngestOutcome, String> {
        let now = self.observe(report.timestamp_ms);
        self.apply(|v| {
            let (r, d) = v.ingest(report, now);
            (r.map_err(|e| e.to_string()), d)
        })
    }

    /// Ingests one NDJSON line.
    pub fn ingest_line(&self, line: &str) -> Result<IngestOutcome, String> {
        match serde_json::from_str::<BaseReport>(line) {
            Ok(report) => self.ingest(report),
            Err(_) => {
                let now = self.now();
                self.apply(|v| {
                    let (r, d) = v.ingest_line(line, now);
                    (r.map_err(|e| e.to_string()), d)
                })
            }
        }
    }

    pub fn issue_advisory(&self, cmd: &AdvisoryCommand) -> Result<u32, AdvisoryError> {
        let now = self.now();
        self.apply(|v| match v.issue_advisory(cmd, now) {
            Ok((id, d)) => (Ok(id), d),
            Err(e) => (Err(e), Vec::new()),
        })
    }

    pub fn poll_rsu(&self, rsu: NodeId, position: Option<GeoPoint>, now_ms: Option<u64>) -> RsuDirectives {
        let now = match now_ms {
            Some(t) => self.observe(t),
            None => self.now(),
        };
        self.apply(|v| v.poll_rsu(rsu, position, now))
    }

    /// Retires expired alerts and advisories.
    pub fn housekeeping(&self) {
        let now = self.now();
        self.apply(|v| ((), v.advance_clock(now)));
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<str>> {
        self.shared.tx.subscribe()
    }

    pub fn router(&self) -> Router {
        let api = Router::new()
            .route("/ingest", post(ingest))
            .route("/vehicles", get(vehicles))
            .route("/vehicles/{id}", get(vehicle))
            .route("/rsus", get(rsus))
            .route("/alerts", get(alerts))
            .route("/advisories", get(advisories).post(create_advisory))
            .route("/candidates", get(candidates))
            .route("/stats", get(stats))
            .route("/snapshot", get(snapshot))
            .route("/rsu/poll", post(poll))
            .route("/stream", get(stream))
            .route_layer(middleware::from_fn_with_state(self.clone(), require_token))
            .route("/healthz", get(|| async { "ok" }));
        let app = match &self.shared.assets {
            Some(dir) => api.fallback_service(ServeDir::new(dir)),
            None => api,
        };
        app.with_state(self.clone())
    }

    /// Serves HTTP on `listener` until the future is dropped.
    pub async fn serve(self, listener: TcpListener) -> io::Result<()> {
        let ticker = self.clone();
        let housekeeping = tokio::spawn(async move {
            let mut every = tokio::time::interval(HOUSEKEEPING_PERIOD);
            loop {
                every.tick().await;
                ticker.housekeeping();
            }
        });
        let result = axum::serve(listener, self.router()).await;
        housekeeping.abort();
        result
    }

    /// Accepts NDJSON report streams over plain TCP, one report per line.
    pub async fn serve_ingest_stream(self, listener: TcpListener) -> io::Result<()> {
        loop {
            let (socket, peer) = listener.accept().await?;
            let station = self.clone();
            tokio::spawn(async move {
                let mut lines = AsyncBufReader::new(socket).lines();
                loop {
                    match lines.next_line().await {
                        Ok(Some(line)) if line.trim().is_empty() => {}
                        Ok(Some(line)) => {
                            if let Err(e) = station.ingest_line(&line) {
                                tracing::debug!("{peer}: rejected report: {e}");
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            tracing::debug!("{peer}: {e}");
                            break;
                        }
                    }
                }
            });
        }
    }
}

/// In-process link for a simulator sharing the service's address space.
impl BaseLink for BaseStation {
    fn push_reports(&mut self, reports: &[BaseReport]) -> Result<(), LinkError> {
        for r in reports {
            self.ingest(r.clone()).map_err(LinkError::Rejected)?;
        }
        Ok(())
    }

    fn poll(&mut self, rsu: NodeId, position: GeoPoint, now_ms: u64) -> Result<RsuDirectives, LinkError> {
        Ok(self.poll_rsu(rsu, Some(position), Some(now_ms)))
    }

    fn issue_advisory(&mut self, cmd: &AdvisoryCommand, now_ms: u64) -> Result<u32, LinkError> {
        self.observe(now_ms);
        BaseStation::issue_advisory(self, cmd).map_err(|e| LinkError::Rejected(e.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

#[derive(Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

async fn require_token(State(station): State<BaseStation>, Query(q): Query<TokenQuery>, req: Request, next: Next) -> Response {
    let Some(expected) = &station.shared.token else {
        return next.run(req).await;
    };
    let bearer = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|h| h.to_str().ok())
        .and_then(|h| h.strip_prefix("Bearer "));
    // EventSource cannot set headers, so the stream also accepts ?token=.
    if bearer == Some(expected.as_str()) || q.token.as_deref() == Some(expected.as_str()) {
        next.run(req).await
    } else {
        error(StatusCode::UNAUTHORIZED, "missing or wrong bearer token")
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub duplicates: usize,
    pub rejected: Vec<Rejection>,
}

async fn ingest(State(station): State<BaseStation>, body: String) -> Response {
    let mut summary = IngestSummary::default();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match station.ingest_line(line) {
            Ok(IngestOutcome::Accepted) => summary.accepted += 1,
            Ok(IngestOutcome::Duplicate) => summary.duplicates += 1,
            Err(reason) => summary.rejected.push(Rejection { line: i + 1, reason }),
        }
    }
    let status = if summary.rejected.is_empty() { StatusCode::OK } else { StatusCode::UNPROCESSABLE_ENTITY };
    (status, Json(summary)).into_response()
}

async fn vehicles(State(station): State<BaseStation>) -> Response {
    Json(station.snapshot().vehicles).into_response()
}

async fn vehicle(State(station): State<BaseStation>, Path(id): Path<String>) -> Response {
    let Ok(id) = id.parse::<NodeId>() else {
        return error(StatusCode::BAD_REQUEST, format!("bad vehicle id {id:?}"));
    };
    match lock(&station.shared.view).vehicle(id) {
        Some(v) => Json(v).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown vehicle {id}")),
    }
}

async fn rsus(State(station): State<BaseStation>) -> Response {
    Json(station.snapshot().rsus).into_response()
}

#[derive(Deserialize)]
struct AlertQuery {
    kind: Option<String>,
}

async fn alerts(State(station): State<BaseStation>, Query(q): Query<AlertQuery>) -> Response {
    let kind = match q.kind.as_deref().map(str::parse::<AlertKind>) {
        None => None,
        Some(Ok(k)) => Some(k),
        Some(Err(e)) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let all = station.snapshot().alerts;
    Json(all.into_iter().filter(|a| kind.is_none_or(|k| a.kind == k)).collect::<Vec<_>>()).into_response()
}

async fn advisories(State(station): State<BaseStation>) -> Response {
    Json(station.snapshot().advisories).into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreatedId {
    pub id: u32,
}

async fn create_advisory(State(station): State<BaseStation>, Json(cmd): Json<AdvisoryCommand>) -> Response {
    match station.issue_advisory(&cmd) {
        Ok(id) => (StatusCode::CREATED, Json(CreatedId { id })).into_response(),
        Err(e @ AdvisoryError::UnknownRsu(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    }
}

async fn candidates(State(station): State<BaseStation>) -> Response {
    Json(station.snapshot().candidates).into_response()
}

async fn stats(State(station): State<BaseStation>) -> Response {
    Json(station.snapshot().stats).into_response()
}

async fn snapshot(State(station): State<BaseStation>) -> Response {
    Json(station.snapshot()).into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PollRequest {
    pub rsu: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<GeoPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub now_ms: Option<u64>,
}

async fn poll(State(station): State<BaseStation>, Json(req): Json<PollRequest>) -> Response {
    if !req.rsu.is_rsu() {
        return error(StatusCode::BAD_REQUEST, format!("{} is not an RSU", req.rsu));
    }
    Json(station.poll_rsu(req.rsu, req.position, req.now_ms)).into_response()
}

fn snapshot_event(station: &BaseStation) -> Event {
    Event::default().event("snapshot").json_data(station.snapshot()).unwrap_or_else(|_| Event::default().comment("snapshot failed"))
}

/// Server-sent events: one `snapshot`, then a `delta` per change. A client
/// that falls behind gets a fresh snapshot instead of the missed deltas.
async fn stream(State(station): State<BaseStation>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = station.subscribe();
    let first = snapshot_event(&station);
    let deltas = futures::stream::unfold((station, rx), |(station, mut rx)| async move {
        let event = match rx.recv().await {
            Ok(json) => Event::default().event("delta").data(json.as_ref()),
            Err(broadcast::error::RecvError::Lagged(_)) => snapshot_event(&station),
            Err(broadcast::error::RecvError::Closed) => return None,
        };
        Some((Ok(event), (station, rx)))
    });
    let events = futures::StreamExt::chain(futures::stream::once(async move { Ok(first) }), deltas);
    Sse::new(events).keep_alive(KeepAlive::default())
}
