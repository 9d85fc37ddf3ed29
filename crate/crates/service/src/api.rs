//! `/api/v1` routes. Every handler takes the single state mutex, which is
//! the linearization point for mutations.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use veriflow_core::bus::Bus;
use veriflow_core::clock::{Clock, VirtualClock};
use veriflow_core::policy_trust::DecisionRecord;

use crate::error::{ApiError, ServiceError};
use crate::ops::{self, ResolveRequest, SimulateRequest};
use crate::store::Store;

pub struct Core {
    pub store: Store,
    pub bus: Bus,
}

#[derive(Clone)]
pub struct AppState {
    core: Arc<Mutex<Core>>,
    clock: Arc<dyn Clock>,
    virtual_clock: Option<VirtualClock>,
    requests: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(store: Store, clock: Arc<dyn Clock>, virtual_clock: Option<VirtualClock>) -> Self {
        let mut bus = Bus::new();
        ops::register_persist(&mut bus, store.dir());
        AppState {
            core: Arc::new(Mutex::new(Core { store, bus })),
            clock,
            virtual_clock,
            requests: Arc::new(AtomicU64::new(0)),
        }
    }

    /// A system clock, or a virtual one starting now when `virtual_clock`.
    pub fn with_clock(store: Store, virtual_clock: bool) -> Self {
        if virtual_clock {
            let vc = VirtualClock::new(chrono::Utc::now());
            Self::new(store, Arc::new(vc.clone()), Some(vc))
        } else {
            Self::new(store, Arc::new(veriflow_core::clock::SystemClock), None)
        }
    }

    fn lock(&self) -> MutexGuard<'_, Core> {
        // a panicking handler leaves the store as persisted; keep serving
        self.core.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn request_id(&self) -> String {
        format!("req-{:06}", self.requests.fetch_add(1, Ordering::Relaxed) + 1)
    }
}

struct Failure(ApiError);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.code.http_status()).expect("valid status");
        (status, Json(self.0)).into_response()
    }
}

type Reply<T> = Result<(StatusCode, Json<T>), Failure>;

fn fail(state: &AppState, e: ServiceError) -> Failure {
    Failure(e.to_api(&state.request_id()))
}

fn body<T>(state: &AppState, b: Result<Json<T>, JsonRejection>) -> Result<T, Failure> {
    b.map(|Json(v)| v)
        .map_err(|e| fail(state, ServiceError::Invalid(e.body_text())))
}

fn with_core<T: Serialize>(
    state: &AppState,
    code: StatusCode,
    f: impl FnOnce(&mut Core, &dyn Clock) -> Result<T, ServiceError>,
) -> Reply<T> {
    let mut core = state.lock();
    let now = state.clock.now();
    core.store.sweep(now).map_err(|e| fail(state, e))?;
    f(&mut core, &*state.clock).map(|v| (code, Json(v))).map_err(|e| fail(state, e))
}

async fn list_reviews(State(s): State<AppState>) -> Reply<Vec<ops::ReviewView>> {
    with_core(&s, StatusCode::OK, |core, _| Ok(ops::list_reviews(&core.store)))
}

async fn resolve_review(
    State(s): State<AppState>,
    Path(id): Path<String>,
    req: Result<Json<ResolveRequest>, JsonRejection>,
) -> Reply<ops::ReviewView> {
    let req = body(&s, req)?;
    with_core(&s, StatusCode::OK, |core, clock| ops::resolve(&mut core.store, &id, &req, clock.now()))
}

async fn trust(State(s): State<AppState>) -> Reply<ops::TrustView> {
    with_core(&s, StatusCode::OK, |core, _| Ok(ops::trust(&core.store)))
}

async fn metrics_latest(State(s): State<AppState>) -> Reply<ops::MetricsLatest> {
    with_core(&s, StatusCode::OK, |core, _| ops::read_latest_metrics(core.store.dir()))
}

async fn audit_verify(State(s): State<AppState>) -> Reply<ops::AuditStatus> {
    with_core(&s, StatusCode::OK, |core, _| ops::audit_status(core.store.dir()))
}

async fn simulate(
    State(s): State<AppState>,
    req: Result<Json<SimulateRequest>, JsonRejection>,
) -> Reply<ops::SimulateResponse> {
    let req = body(&s, req)?;
    let state = s.clone();
    tokio::task::spawn_blocking(move || {
        with_core(&state, StatusCode::OK, |core, clock| {
            let Core { store, bus } = core;
            ops::simulate_and_store(store, bus, clock, &req)
        })
    })
    .await
    .map_err(|e| fail(&s, ServiceError::Domain(format!("simulation task failed: {e}"))))?
}

async fn get_run(State(s): State<AppState>, Path(id): Path<String>) -> Reply<veriflow_core::simulator::ScenarioSummary> {
    with_core(&s, StatusCode::OK, |core, _| ops::read_run(core.store.dir(), &id))
}

async fn submit_decision(
    State(s): State<AppState>,
    req: Result<Json<DecisionRecord>, JsonRejection>,
) -> Reply<veriflow_core::policy_trust::SubmitOutcome> {
    let d = body(&s, req)?;
    with_core(&s, StatusCode::CREATED, |core, clock| ops::submit(&mut core.store, d, clock.now()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvanceRequest {
    pub hours: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClockView {
    pub now: chrono::DateTime<chrono::Utc>,
    #[serde(rename = "virtual")]
    pub is_virtual: bool,
}

async fn get_clock(State(s): State<AppState>) -> Json<ClockView> {
    Json(ClockView {
        now: s.clock.now(),
        is_virtual: s.virtual_clock.is_some(),
    })
}

/// Only available under `--virtual-clock`.
async fn advance_clock(
    State(s): State<AppState>,
    req: Result<Json<AdvanceRequest>, JsonRejection>,
) -> Reply<ClockView> {
    let req = body(&s, req)?;
    let Some(vc) = &s.virtual_clock else {
        return Err(fail(&s, ServiceError::Invalid("server runs on the system clock".into())));
    };
    if !(req.hours.is_finite() && req.hours >= 0.0) {
        return Err(fail(&s, ServiceError::Invalid(format!("cannot advance by {} h", req.hours))));
    }
    vc.advance(std::time::Duration::from_secs_f64(req.hours * 3600.0));
    with_core(&s, StatusCode::OK, |_, clock| {
        Ok(ClockView {
            now: clock.now(),
            is_virtual: true,
        })
    })
}

async fn not_found(State(s): State<AppState>) -> Failure {
    fail(&s, ServiceError::NotFound("no such endpoint".into()))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/reviews", get(list_reviews))
        .route("/api/v1/reviews/{id}/resolve", post(resolve_review))
        .route("/api/v1/trust", get(trust))
        .route("/api/v1/metrics/latest", get(metrics_latest))
        .route("/api/v1/audit/verify", get(audit_verify))
        .route("/api/v1/simulate", post(simulate))
        .route("/api/v1/runs/{id}", get(get_run))
        .route("/api/v1/decisions", post(submit_decision))
        .route("/api/v1/clock", get(get_clock))
        .route("/api/v1/clock/advance", post(advance_clock))
        .fallback(not_found)
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("veriflow listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
