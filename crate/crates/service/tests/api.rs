use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::{DateTime, Utc};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use veriflow_core::clock::{Clock, VirtualClock};
use veriflow_service::api::{router, AppState};
use veriflow_service::store::Store;

fn t0() -> DateTime<Utc> {
    "2025-03-03T09:00:00Z".parse().unwrap()
}

struct Harness {
    _tmp: tempfile::TempDir,
    dir: std::path::PathBuf,
    clock: VirtualClock,
    app: Router,
}

fn harness() -> Harness {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    let clock = VirtualClock::new(t0());
    let store = Store::open(&dir, None).unwrap();
    let app = router(AppState::new(store, Arc::new(clock.clone()), Some(clock.clone())));
    Harness { _tmp: tmp, dir, clock, app }
}

impl Harness {
    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let req = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        self.raw(req).await
    }

    async fn raw(&self, req: Request<Body>) -> (StatusCode, Value) {
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, v)
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call("GET", uri, None).await
    }

    async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.call("POST", uri, Some(body)).await
    }

    async fn audit_entries(&self) -> u64 {
        let (s, v) = self.get("/api/v1/audit/verify").await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["ok"], true, "{v}");
        v["entries"].as_u64().unwrap()
    }
}

fn decision(id: &str, confidence: f64) -> Value {
    json!({
        "id": id,
        "proposed_action": "promote_build",
        "severity": "routine",
        "confidence": confidence,
        "parity_gap": 0.01,
        "timestamp": t0(),
        "rationale": "suite green"
    })
}

fn resolution(approve: bool, rationale: &str) -> Value {
    json!({
        "resolution": if approve { "approve" } else { "reject" },
        "reviewer": "alice",
        "rationale": rationale
    })
}

fn assert_error(v: &Value, code: &str) {
    assert_eq!(v["code"], code, "{v}");
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    assert!(v["request_id"].as_str().unwrap().starts_with("req-"));
}

#[tokio::test]
async fn empty_service_answers_every_read() {
    let h = harness();
    let (s, v) = h.get("/api/v1/reviews").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!([]));

    let (s, v) = h.get("/api/v1/trust").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["level"], "recommend");
    assert_eq!(v["override_rate"], 0.0);

    let (s, v) = h.get("/api/v1/audit/verify").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["ok"], true);
    assert_eq!(v["entries"], 0);

    let (s, v) = h.get("/api/v1/metrics/latest").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&v, "not_found");

    let (s, v) = h.get("/api/v1/nothing/here").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&v, "not_found");

    let (s, v) = h.get("/api/v1/clock").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["virtual"], true);
    assert_eq!(v["now"], json!(t0()));
}

#[tokio::test]
async fn review_is_resolved_once() {
    let h = harness();
    let (s, v) = h.post("/api/v1/decisions", decision("D1", 0.6)).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["disposition"], "queued");

    let (_, v) = h.get("/api/v1/reviews").await;
    assert_eq!(v.as_array().unwrap().len(), 1);
    assert_eq!(v[0]["id"], "D1");
    assert_eq!(v[0]["status"], "pending");
    assert_eq!(v[0]["deadline"], json!(t0() + chrono::Duration::hours(24)));

    let (s, v) = h.post("/api/v1/decisions", decision("D1", 0.6)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&v, "conflict");

    let (s, v) = h.post("/api/v1/reviews/D1/resolve", resolution(true, "")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "invalid");

    let before = h.audit_entries().await;
    let (s, v) = h.post("/api/v1/reviews/D1/resolve", resolution(true, "looked fine")).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["status"], "approved");
    assert_eq!(v["reviewer"], "alice");
    assert!(h.audit_entries().await > before);

    let (s, v) = h.post("/api/v1/reviews/D1/resolve", resolution(false, "second thoughts")).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&v, "conflict");

    let (s, v) = h.post("/api/v1/reviews/NOPE/resolve", resolution(true, "x")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&v, "not_found");

    let (_, v) = h.get("/api/v1/trust").await;
    assert_eq!(v["window_len"], 1);
}

#[tokio::test]
async fn confident_routine_decisions_auto_apply() {
    let h = harness();
    let (s, v) = h.post("/api/v1/decisions", decision("D1", 0.97)).await;
    assert_eq!(s, StatusCode::CREATED);
    // the recommend level queues everything for review
    assert_eq!(v["disposition"], "queued");
    let mut blocked = decision("D2", 0.99);
    blocked["parity_gap"] = json!(0.2);
    let (s, v) = h.post("/api/v1/decisions", blocked).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_ne!(v["disposition"], "auto_applied");
}

#[tokio::test]
async fn review_expires_just_after_its_deadline() {
    let h = harness();
    h.post("/api/v1/decisions", decision("D1", 0.6)).await;
    let entries = h.audit_entries().await;

    let (s, _) = h.post("/api/v1/clock/advance", json!({"hours": 24.0})).await;
    assert_eq!(s, StatusCode::OK);
    let (_, v) = h.get("/api/v1/reviews").await;
    assert_eq!(v[0]["status"], "pending");
    assert_eq!(h.audit_entries().await, entries);

    h.clock.advance(Duration::from_millis(1));
    let (_, v) = h.get("/api/v1/reviews").await;
    assert_eq!(v[0]["status"], "expired_auto_rejected");
    assert_eq!(h.audit_entries().await, entries + 1);

    let (s, v) = h.post("/api/v1/reviews/D1/resolve", resolution(true, "too late")).await;
    assert_eq!(s, StatusCode::GONE);
    assert_error(&v, "expired");
    // repeated reads do not expire the review a second time
    assert_eq!(h.audit_entries().await, entries + 1);
}

#[tokio::test]
async fn bad_requests_are_400() {
    let h = harness();
    let req = Request::builder()
        .method("POST")
        .uri("/api/v1/decisions")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let (s, v) = h.raw(req).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "invalid");

    let (s, v) = h.post("/api/v1/decisions", json!({"id": "D1"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "invalid");

    let (s, v) = h.post("/api/v1/decisions", decision("D1", 1.5)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "invalid");

    let (s, v) = h.post("/api/v1/simulate", json!({"scenario": "nope"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "invalid");

    let (s, _) = h.post("/api/v1/clock/advance", json!({"hours": -1.0})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, v) = h.get("/api/v1/runs/..%2Fstate").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "invalid");
    let (s, _) = h.get("/api/v1/runs/unknown-seed1").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn request_ids_are_unique() {
    let h = harness();
    let (_, a) = h.get("/api/v1/nope").await;
    let (_, b) = h.get("/api/v1/nope").await;
    assert_ne!(a["request_id"], b["request_id"]);
}

#[tokio::test]
async fn simulation_runs_are_stored_and_served() {
    let h = harness();
    let (s, v) = h.post("/api/v1/simulate", json!({"scenario": "compliance", "seed": 2})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["run_id"], "compliance-seed2");
    assert_eq!(v["persisted"], true);
    assert_eq!(v["summary"]["kind"], "pipeline");

    let (s, run) = h.get("/api/v1/runs/compliance-seed2").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(run, v["summary"]);
    assert!(h.dir.join("runs/compliance-seed2/ai/audit.jsonl").exists());

    let (s, m) = h.get("/api/v1/metrics/latest").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(m["run_id"], "compliance-seed2");
    assert_eq!(m["current"], v["summary"]["ai"]["snapshot"]);
    assert_eq!(m["baseline"], v["summary"]["manual"]["snapshot"]);

    let (s, b) = h.post("/api/v1/simulate", json!({"scenario": "convergence-bench", "seed": 1})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["summary"]["kind"], "convergence_bench");
    // a bench run has no arms to compare, so the latest pipeline metrics stay
    let (_, m2) = h.get("/api/v1/metrics/latest").await;
    assert_eq!(m2["run_id"], "compliance-seed2");
    h.audit_entries().await;
}

#[tokio::test]
async fn failed_persistence_goes_to_the_dead_letter_log() {
    let h = harness();
    // a plain file where the runs directory belongs
    std::fs::write(h.dir.join("runs"), "").unwrap();
    let start = h.clock.now();
    let (s, v) = h.post("/api/v1/simulate", json!({"scenario": "compliance", "seed": 3})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["persisted"], false);
    // four back-offs of 100, 200, 400 and 800 ms on the virtual clock
    assert_eq!(h.clock.now() - start, chrono::Duration::milliseconds(1500));

    let log = std::fs::read_to_string(h.dir.join("audit.jsonl")).unwrap();
    let last: Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["actor"], "bus");
    assert!(last["rationale"].as_str().unwrap().contains("dead-letter"));
    assert_eq!(h.audit_entries().await, log.lines().count() as u64);

    let (s, _) = h.get("/api/v1/runs/compliance-seed3").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn tampering_shows_up_in_verify() {
    let h = harness();
    for i in 0..3 {
        h.post("/api/v1/decisions", decision(&format!("D{i}"), 0.6)).await;
    }
    let n = h.audit_entries().await;
    let path = h.dir.join("audit.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut e: Value = serde_json::from_str(&lines[1]).unwrap();
    e["rationale"] = json!("edited");
    lines[1] = serde_json::to_string(&e).unwrap();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();

    let (s, v) = h.get("/api/v1/audit/verify").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["ok"], false);
    assert_eq!(v["broken_seq"], 1);
    assert_eq!(v["entries"], n);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_resolutions_have_one_winner() {
    let h = harness();
    h.post("/api/v1/decisions", decision("D1", 0.6)).await;
    let before = h.audit_entries().await;
    let mut tasks = Vec::new();
    for i in 0..8 {
        let app = h.app.clone();
        tasks.push(tokio::spawn(async move {
            let body = resolution(i % 2 == 0, &format!("reviewer {i}"));
            let req = Request::builder()
                .method("POST")
                .uri("/api/v1/reviews/D1/resolve")
                .header("content-type", "application/json")
                .body(Body::from(body.to_string()))
                .unwrap();
            app.oneshot(req).await.unwrap().status()
        }));
    }
    let mut statuses = Vec::new();
    for t in tasks {
        statuses.push(t.await.unwrap());
    }
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::OK).count(), 1, "{statuses:?}");
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::CONFLICT).count(), 7);
    // the winning resolution plus its trust bookkeeping, nothing from the losers
    let after = h.audit_entries().await;
    let (_, again) = h.post("/api/v1/reviews/D1/resolve", resolution(true, "late")).await;
    assert_error(&again, "conflict");
    assert_eq!(h.audit_entries().await, after);
    assert!(after > before);
}

#[tokio::test]
async fn restart_keeps_state() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    let clock = VirtualClock::new(t0());
    {
        let store = Store::open(&dir, None).unwrap();
        assert!(Store::open(&dir, None).is_err(), "second open must fail while locked");
        let h = Harness {
            _tmp: tempfile::tempdir().unwrap(),
            dir: dir.clone(),
            clock: clock.clone(),
            app: router(AppState::new(store, Arc::new(clock.clone()), Some(clock.clone()))),
        };
        h.post("/api/v1/decisions", decision("D1", 0.6)).await;
        h.post("/api/v1/decisions", decision("D2", 0.6)).await;
        h.post("/api/v1/reviews/D1/resolve", resolution(false, "no")).await;
    }
    let store = Store::open(&dir, None).unwrap();
    let app = router(AppState::new(store, Arc::new(clock.clone()), Some(clock.clone())));
    let h = Harness { _tmp: tmp, dir, clock, app };
    let (_, v) = h.get("/api/v1/reviews").await;
    assert_eq!(v[0]["status"], "rejected");
    assert_eq!(v[1]["status"], "pending");
    let (_, t) = h.get("/api/v1/trust").await;
    assert_eq!(t["window_len"], 1);
    h.audit_entries().await;
}

#[tokio::test]
async fn serves_over_tcp() {
    let tmp = tempfile::tempdir().unwrap();
    let store = Store::open(tmp.path(), None).unwrap();
    let app = router(AppState::with_clock(store, false));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });

    let out = tokio::task::spawn_blocking(move || {
        use std::io::{Read, Write};
        let mut stream = std::net::TcpStream::connect(addr).unwrap();
        stream
            .write_all(b"GET /api/v1/reviews HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
            .unwrap();
        let mut out = String::new();
        stream.read_to_string(&mut out).unwrap();
        out
    })
    .await
    .unwrap();
    assert!(out.starts_with("HTTP/1.1 200"), "{out}");
    assert!(out.ends_with("[]"), "{out}");
}
