//! `iotarch serve`: the simulation on its own thread, the HTTP/WebSocket API
//! on tokio. Handlers never touch the simulation. Mutations and telemetry
//! queries go through a [`CommandQueue`] drained at each tick boundary; reads
//! come from the snapshot published after the boundary.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, oneshot, watch};

use iotarch::app::{convert_unit, AppError, Preferences};
use iotarch::device::Payload;
use iotarch::kernel::{CommandQueue, LogEntry};
use iotarch::orchestration::Mode;
use iotarch::readmodel::{Snapshot, TelemetryPoint};
use iotarch::scenario::Scenario;
use iotarch::sim::{Request, Simulation};

pub struct Options {
    pub host: String,
    pub port: u16,
    pub tick_ms: u64,
    pub ticks: Option<u64>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
}

enum Job {
    Apply(Request, oneshot::Sender<Result<Value, AppError>>),
    Telemetry { device: u32, property: Option<String>, since: u64, reply: oneshot::Sender<Vec<TelemetryPoint>> },
}

#[derive(Clone)]
struct Shared {
    jobs: CommandQueue<Job>,
    snapshot: watch::Receiver<Arc<Snapshot>>,
    events: broadcast::Sender<Arc<Value>>,
}

/// The wire form of a published envelope, rebuilt from its `pub` log line.
fn envelope(e: &LogEntry) -> Value {
    let b = &e.body;
    json!({
        "id": b["msg"],
        "schema": b["schema"],
        "topic": b["topic"],
        "publisher": b["publisher"],
        "tickPublished": e.tick,
        "body": b["body"],
    })
}

struct Driver {
    sim: Simulation,
    limit: u64,
    cursor: usize,
    snapshot: watch::Sender<Arc<Snapshot>>,
    events: broadcast::Sender<Arc<Value>>,
}

impl Driver {
    fn publish(&mut self) {
        for e in &self.sim.log()[self.cursor..] {
            if e.kind == "pub" {
                // no receivers is fine
                let _ = self.events.send(Arc::new(envelope(e)));
            }
        }
        self.cursor = self.sim.log().len();
        self.snapshot.send_replace(Arc::new(self.sim.snapshot()));
    }

    fn handle(&mut self, job: Job) {
        match job {
            Job::Apply(req, reply) => {
                let _ = reply.send(self.sim.apply(req));
            }
            Job::Telemetry { device, property, since, reply } => {
                let _ = reply.send(self.sim.read.telemetry(device, property.as_deref(), since));
            }
        }
    }

    /// Runs until `next`, answering queued jobs between ticks, then steps.
    fn tick(&mut self, jobs: &CommandQueue<Job>, next: Instant) {
        loop {
            let pending = jobs.drain();
            if !pending.is_empty() {
                pending.into_iter().for_each(|j| self.handle(j));
                self.publish();
            }
            let left = next.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break;
            }
            thread::sleep(left.min(Duration::from_millis(5)));
        }
        if self.sim.ticks() < self.limit {
            self.sim.step();
            self.publish();
        }
    }
}

pub fn serve(scenario: Scenario, opts: Options) -> std::io::Result<()> {
    let limit = opts.ticks.unwrap_or(scenario.horizon);
    let seed = opts.seed.unwrap_or(scenario.seed);
    let mode = opts.mode.unwrap_or(scenario.mode);
    let sim = Simulation::new(scenario, seed, mode);
    let (snap_tx, snap_rx) = watch::channel(Arc::new(sim.snapshot()));
    let (events, _) = broadcast::channel(4096);
    let jobs = CommandQueue::new();
    let shared = Shared { jobs: jobs.clone(), snapshot: snap_rx, events: events.clone() };

    let tick = Duration::from_millis(opts.tick_ms.max(1));
    thread::Builder::new().name("kernel".into()).spawn(move || {
        let mut d = Driver { sim, limit, cursor: 0, snapshot: snap_tx, events };
        d.publish();
        // tick 0 runs straight away so devices appear at once
        let mut next = Instant::now();
        loop {
            d.tick(&jobs, next);
            next += tick;
        }
    })?;

    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((opts.host.as_str(), opts.port)).await?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(shared))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}

fn router(shared: Shared) -> Router {
    Router::new()
        .route("/devices", get(devices))
        .route("/devices/:id", get(device))
        .route("/devices/:id/commands", post(command))
        .route("/telemetry", get(telemetry))
        .route("/users", post(create_user))
        .route("/users/:id", get(user))
        .route("/subscriptions", post(subscribe))
        .route("/subscriptions/:id", delete(unsubscribe))
        .route("/notifications", get(notifications))
        .route("/notifications/:id/read", post(mark_read))
        .route("/loops", get(loops))
        .route("/loops/:id", get(loop_state))
        .route("/plans", get(plans))
        .route("/rules", get(rules).post(submit_rule))
        .route("/dashboard/snapshot", get(snapshot))
        .route("/events", get(events))
        .with_state(shared)
}

struct ApiError(StatusCode, Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<AppError> for ApiError {
    fn from(e: AppError) -> Self {
        let status = match e {
            AppError::DuplicateEmail(_) => StatusCode::CONFLICT,
            AppError::UnknownUser(_) | AppError::UnknownDevice(_) | AppError::UnknownSubscription(_) | AppError::UnknownNotification(_) => {
                StatusCode::NOT_FOUND
            }
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.body())
    }
}

fn not_found(what: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, json!({ "code": "NotFound", "message": format!("no {what}") }))
}

fn bad_request(message: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, json!({ "code": "BadRequest", "message": message.to_string() }))
}

fn parse<T: serde::de::DeserializeOwned>(body: &str) -> Result<T, ApiError> {
    serde_json::from_str(body).map_err(bad_request)
}

type ApiResult = Result<Response, ApiError>;

fn ok(v: impl serde::Serialize) -> ApiResult {
    Ok(Json(v).into_response())
}

fn created(v: Value) -> ApiResult {
    Ok((StatusCode::CREATED, Json(v)).into_response())
}

impl Shared {
    fn snap(&self) -> Arc<Snapshot> {
        self.snapshot.borrow().clone()
    }

    async fn apply(&self, req: Request) -> Result<Value, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.jobs.push(Job::Apply(req, tx));
        let r = rx.await.map_err(|_| ApiError(StatusCode::SERVICE_UNAVAILABLE, json!({ "code": "Unavailable", "message": "simulation stopped" })))?;
        Ok(r?)
    }

    fn units_for(&self, user: Option<u64>) -> Option<String> {
        let snap = self.snap();
        user.and_then(|u| snap.users.iter().find(|x| x.id == u)).map(|u| u.preferences.units.clone())
    }
}

/// Converts float readings to the user's display units; the simulation
/// itself stays metric.
fn localize(value: &mut Value, units: Option<&str>) {
    let Some(units) = units else { return };
    match value {
        Value::Object(map) => {
            if let (Some(v), Some(u)) = (map.get("value").and_then(Value::as_f64), map.get("unit").and_then(Value::as_str)) {
                let (v, u) = convert_unit(v, u, units);
                map.insert("value".into(), json!(v));
                map.insert("unit".into(), json!(u));
            }
            for child in map.values_mut() {
                localize(child, Some(units));
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|i| localize(i, Some(units))),
        _ => {}
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ForUser {
    user_id: Option<u64>,
}

async fn devices(State(s): State<Shared>, Query(q): Query<ForUser>) -> ApiResult {
    let mut v = serde_json::to_value(&s.snap().devices).expect("serializable");
    localize(&mut v, s.units_for(q.user_id).as_deref());
    ok(v)
}

async fn device(State(s): State<Shared>, Path(id): Path<u32>, Query(q): Query<ForUser>) -> ApiResult {
    let snap = s.snap();
    let d = snap.devices.iter().find(|d| d.device_id == id).ok_or_else(|| not_found(&format!("device {id}")))?;
    let mut v = serde_json::to_value(d).expect("serializable");
    localize(&mut v, s.units_for(q.user_id).as_deref());
    ok(v)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CommandIn {
    user_id: Option<u64>,
    resource_id: u16,
    value: Payload,
}

async fn command(State(s): State<Shared>, Path(id): Path<u32>, body: String) -> ApiResult {
    let c: CommandIn = parse(&body)?;
    // without a userId the command is issued for the first registered user
    let user = c.user_id.or_else(|| s.snap().users.first().map(|u| u.id)).ok_or_else(|| bad_request("userId is required when no users exist"))?;
    created(s.apply(Request::IssueCommand { user, device: id, resource: c.resource_id, value: c.value }).await?)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct TelemetryQuery {
    device_id: u32,
    property: Option<String>,
    since_tick: Option<u64>,
    user_id: Option<u64>,
}

async fn telemetry(State(s): State<Shared>, Query(q): Query<TelemetryQuery>) -> ApiResult {
    let (tx, rx) = oneshot::channel();
    s.jobs.push(Job::Telemetry { device: q.device_id, property: q.property, since: q.since_tick.unwrap_or(0), reply: tx });
    let points = rx.await.map_err(|_| bad_request("simulation stopped"))?;
    let mut v = serde_json::to_value(points).expect("serializable");
    localize(&mut v, s.units_for(q.user_id).as_deref());
    ok(v)
}

#[derive(Deserialize)]
struct UserIn {
    name: String,
    email: String,
    #[serde(default)]
    preferences: Preferences,
}

async fn create_user(State(s): State<Shared>, body: String) -> ApiResult {
    let u: UserIn = parse(&body)?;
    created(s.apply(Request::CreateUser { name: u.name, email: u.email, preferences: u.preferences }).await?)
}

async fn user(State(s): State<Shared>, Path(id): Path<u64>) -> ApiResult {
    let snap = s.snap();
    let u = snap.users.iter().find(|u| u.id == id).ok_or_else(|| not_found(&format!("user {id}")))?;
    let subs: Vec<_> = snap.subscriptions.iter().filter(|x| x.user == id).collect();
    ok(json!({ "user": u, "subscriptions": subs, "unread": snap.unread.get(&id).copied().unwrap_or(0) }))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct SubscriptionIn {
    user_id: u64,
    pattern: String,
}

async fn subscribe(State(s): State<Shared>, body: String) -> ApiResult {
    let b: SubscriptionIn = parse(&body)?;
    created(s.apply(Request::Subscribe { user: b.user_id, pattern: b.pattern }).await?)
}

async fn unsubscribe(State(s): State<Shared>, Path(id): Path<u64>) -> ApiResult {
    ok(s.apply(Request::Unsubscribe { id }).await?)
}

async fn notifications(State(s): State<Shared>, Query(q): Query<ForUser>) -> ApiResult {
    let snap = s.snap();
    let list: Vec<_> = snap.notifications.iter().filter(|n| q.user_id.map_or(true, |u| n.user == u)).collect();
    ok(list)
}

async fn mark_read(State(s): State<Shared>, Path(id): Path<u64>) -> ApiResult {
    ok(s.apply(Request::MarkRead { id }).await?)
}

async fn loops(State(s): State<Shared>) -> ApiResult {
    ok(&s.snap().loop_states)
}

async fn loop_state(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult {
    let snap = s.snap();
    ok(snap.loop_states.iter().find(|l| l.id == id).ok_or_else(|| not_found(&format!("loop {id}")))?)
}

#[derive(Deserialize)]
struct PlanQuery {
    region: Option<String>,
}

async fn plans(State(s): State<Shared>, Query(q): Query<PlanQuery>) -> ApiResult {
    let snap = s.snap();
    let list: Vec<&Value> = snap
        .plans
        .iter()
        .filter(|p| {
            q.region.as_deref().map_or(true, |r| {
                p["region"] == r || p["scope"].as_array().is_some_and(|s| s.iter().any(|x| x == r))
            })
        })
        .collect();
    ok(list)
}

async fn rules(State(s): State<Shared>) -> ApiResult {
    ok(&s.snap().rules)
}

async fn submit_rule(State(s): State<Shared>, body: String) -> ApiResult {
    created(s.apply(Request::SubmitRule { text: body }).await?)
}

async fn snapshot(State(s): State<Shared>) -> ApiResult {
    ok(&*s.snap())
}

async fn events(State(s): State<Shared>, Query(q): Query<BTreeMap<String, String>>, ws: WebSocketUpgrade) -> Response {
    let prefix = q.get("prefix").cloned().unwrap_or_default();
    let rx = s.events.subscribe();
    ws.on_upgrade(move |socket| stream(socket, rx, prefix))
}

async fn stream(mut socket: WebSocket, mut rx: broadcast::Receiver<Arc<Value>>, prefix: String) {
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(env) => {
                    if !env["topic"].as_str().is_some_and(|t| t.starts_with(&prefix)) {
                        continue;
                    }
                    if socket.send(Message::Text(env.to_string())).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    // tell the client to resync from a fresh snapshot
                    let note = json!({ "lagged": n }).to_string();
                    if socket.send(Message::Text(note)).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                _ => {}
            },
        }
    }
}
