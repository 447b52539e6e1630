use std::sync::Arc;

use active_measure::EstimateReport;
use active_measure_service::http::{router, AppState, NextResponse};
use active_measure_service::{parse_log, replay, simulate_log, SessionStore, SessionSummary};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(pool_dir: Option<std::path::PathBuf>, ui: Option<&std::path::Path>) -> Router {
    let state = AppState {
        store: Arc::new(SessionStore::in_memory()),
        pool_dir,
    };
    router(state, ui)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn json_call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn units(n: usize) -> Value {
    Value::Array(
        (0..n)
            .map(|i| json!({"id": format!("u{i}"), "payload_ref": format!("tile{i}.png")}))
            .collect(),
    )
}

async fn create(app: &Router, body: Value) -> String {
    let (status, v) = json_call(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn next(app: &Router, id: &str) -> NextResponse {
    let (status, v) = json_call(app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn label(app: &Router, id: &str, unit: &str, value: f64) -> (StatusCode, Value) {
    json_call(
        app,
        "POST",
        &format!("/sessions/{id}/labels"),
        Some(json!({"unit_id": unit, "value": value})),
    )
    .await
}

#[tokio::test]
async fn health_ok() {
    let app = app(None, None);
    let (status, v) = json_call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok"}));
}

#[tokio::test]
async fn full_label_loop() {
    let app = app(None, None);
    let id = create(&app, json!({"units": units(5), "scheme": "lure", "seed": 3})).await;

    let (_, summary) = json_call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let summary: SessionSummary = serde_json::from_value(summary).unwrap();
    assert_eq!(summary.t, 0);
    assert_eq!(summary.horizon, 5);

    let (_, traj) = json_call(&app, "GET", &format!("/sessions/{id}/trajectory"), None).await;
    assert_eq!(traj, json!([]));

    let values = [4.0, 0.0, 2.5, 7.0, 1.0];
    let mut total = 0.0;
    let mut last: Option<EstimateReport> = None;
    for (k, v) in values.iter().enumerate() {
        let first = next(&app, &id).await;
        let again = next(&app, &id).await;
        assert_eq!(first.status, "pending");
        let sample = first.sample.unwrap();
        assert_eq!(Some(&sample), again.sample.as_ref());
        assert_eq!(sample.t, k + 1);
        assert!(sample.payload_ref.ends_with(".png"));
        let (status, report) = label(&app, &id, &sample.unit_id, *v).await;
        assert_eq!(status, StatusCode::OK, "{report}");
        let report: EstimateReport = serde_json::from_value(report).unwrap();
        assert_eq!(report.t, k + 1);
        total += v;
        last = Some(report);
    }
    let last = last.unwrap();
    assert!((last.estimate - total).abs() <= 1e-12 * total);
    assert_eq!(last.var_cond, 0.0);

    let (_, traj) = json_call(&app, "GET", &format!("/sessions/{id}/trajectory"), None).await;
    let traj: Vec<EstimateReport> = serde_json::from_value(traj).unwrap();
    assert_eq!(traj.len(), 5);
    assert_eq!(traj.last(), Some(&last));

    let done = next(&app, &id).await;
    assert_eq!(done.status, "exhausted");
    assert_eq!(done.report.as_ref(), Some(&last));

    let (_, list) = json_call(&app, "GET", "/sessions", None).await;
    assert_eq!(list[0]["status"], "exhausted");
}

#[tokio::test]
async fn error_codes() {
    let app = app(None, None);
    let (status, v) = json_call(&app, "GET", "/sessions/missing/next", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "not_found");
    assert!(v["message"].is_string());

    let id = create(&app, json!({"units": units(3)})).await;
    let (status, v) = label(&app, &id, "u0", 1.0).await;
    assert_eq!(status, StatusCode::CONFLICT, "{v}");
    assert_eq!(v["code"], "conflict");

    let sample = next(&app, &id).await.sample.unwrap();
    let other = if sample.unit_id == "u0" { "u1" } else { "u0" };
    let (status, v) = label(&app, &id, other, 1.0).await;
    assert_eq!((status, v["code"].as_str()), (StatusCode::CONFLICT, Some("conflict")));

    let (status, v) = label(&app, &id, &sample.unit_id, -1.0).await;
    assert_eq!(
        (status, v["code"].as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, Some("validation"))
    );

    let (status, v) = json_call(
        &app,
        "POST",
        &format!("/sessions/{id}/labels"),
        Some(json!({"unit_id": sample.unit_id})),
    )
    .await;
    assert_eq!(
        (status, v["code"].as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, Some("validation"))
    );

    let (status, v) = json_call(
        &app,
        "POST",
        &format!("/sessions/{id}/predictions"),
        Some(json!({"predictions": {"u0": 1.0, "u1": 1.0, "u2": 1.0}})),
    )
    .await;
    assert_eq!((status, v["code"].as_str()), (StatusCode::CONFLICT, Some("conflict")));

    let (status, _) = label(&app, &id, &sample.unit_id, 2.0).await;
    assert_eq!(status, StatusCode::OK);
    let (status, v) = json_call(
        &app,
        "POST",
        &format!("/sessions/{id}/predictions"),
        Some(json!({"predictions": {"u0": 1.0}})),
    )
    .await;
    assert_eq!(
        (status, v["code"].as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, Some("validation"))
    );
}

#[tokio::test]
async fn create_validation() {
    let app = app(None, None);
    let cases = [
        json!({"units": []}),
        json!({"units": units(2), "scheme": "bogus"}),
        json!({"units": units(2), "level": 1.5}),
        json!({"units": units(2), "clamp": {"mode": "absolute", "value": -1.0}}),
        json!({"units": units(2), "predictions": {"u0": 1.0}, "uniform_fallback": false}),
        json!({"units": units(2), "uniform_fallback": false}),
        json!({"units": [{"id": "a"}, {"id": "a"}]}),
        json!({"pool": "demo.tsv"}),
        json!({}),
    ];
    for body in cases {
        let (status, v) = json_call(&app, "POST", "/sessions", Some(body.clone())).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body} -> {v}");
        assert_eq!(v["code"], "validation");
    }
    let (status, v) = call(&app, "POST", "/sessions", None).await;
    assert_eq!(
        status,
        StatusCode::UNPROCESSABLE_ENTITY,
        "{}",
        String::from_utf8_lossy(&v)
    );
}

#[tokio::test]
async fn named_pools() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("demo.tsv"), "a\tgrid:0,0\nb\tgrid:0,1\nc\tgrid:1,0\n").unwrap();
    std::fs::write(dir.path().join("sim.tsv"), "a\tx\t1\nb\ty\t2\n").unwrap();
    let app = app(Some(dir.path().to_path_buf()), None);

    let id = create(&app, json!({"pool": "demo.tsv", "seed": 1})).await;
    let sample = next(&app, &id).await.sample.unwrap();
    assert!(sample.payload_ref.starts_with("grid:"));

    for name in ["sim.tsv", "../demo.tsv", "missing.tsv"] {
        let (status, v) = json_call(&app, "POST", "/sessions", Some(json!({"pool": name}))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{name}: {v}");
    }
}

#[tokio::test]
async fn same_seed_same_first_sample() {
    let app = app(None, None);
    let body = json!({
        "units": units(20),
        "seed": 99,
        "predictions": (0..20).map(|i| (format!("u{i}"), json!(1.0 + i as f64))).collect::<serde_json::Map<_, _>>(),
    });
    let a = create(&app, body.clone()).await;
    let b = create(&app, body).await;
    assert_ne!(a, b);
    assert_eq!(next(&app, &a).await.sample, next(&app, &b).await.sample);
}

#[tokio::test]
async fn oracle_predictions_make_estimates_exact() {
    let app = app(None, None);
    let truth: Vec<f64> = (0..8).map(|i| (i % 3) as f64 + 1.5).collect();
    let total: f64 = truth.iter().sum();
    let oracle: serde_json::Map<String, Value> = truth
        .iter()
        .enumerate()
        .map(|(i, v)| (format!("u{i}"), json!(v)))
        .collect();
    let id = create(&app, json!({"units": units(8), "seed": 5, "predictions": oracle})).await;

    for step in 0..5 {
        if step == 2 {
            // pushing the current table again changes nothing
            let (status, ack) = json_call(
                &app,
                "POST",
                &format!("/sessions/{id}/predictions"),
                Some(json!({"predictions": oracle})),
            )
            .await;
            assert_eq!(status, StatusCode::OK, "{ack}");
            assert_eq!(ack["table_versions"], 1);
        }
        let s = next(&app, &id).await.sample.unwrap();
        let idx: usize = s.unit_id[1..].parse().unwrap();
        let (_, r) = label(&app, &id, &s.unit_id, truth[idx]).await;
        let r: EstimateReport = serde_json::from_value(r).unwrap();
        assert!((r.estimate - total).abs() <= 1e-9 * total, "{r:?}");
    }
}

#[tokio::test]
async fn export_replays_bit_identically() {
    let app = app(None, None);
    let id = create(&app, json!({"units": units(12), "scheme": "comb", "seed": 8})).await;
    for k in 0..9 {
        if k == 4 {
            let preds: serde_json::Map<String, Value> = (0..12)
                .map(|i| (format!("u{i}"), json!(0.5 + (i * 7 % 5) as f64)))
                .collect();
            let (status, _) = json_call(
                &app,
                "POST",
                &format!("/sessions/{id}/predictions"),
                Some(json!({"predictions": preds})),
            )
            .await;
            assert_eq!(status, StatusCode::OK);
        }
        let s = next(&app, &id).await.sample.unwrap();
        let (status, _) = label(&app, &id, &s.unit_id, (k * 3 % 4) as f64 + 0.25).await;
        assert_eq!(status, StatusCode::OK);
    }
    next(&app, &id).await;

    let (status, log) = call(&app, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(log).unwrap();
    assert!(text.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));

    let (_, traj) = json_call(&app, "GET", &format!("/sessions/{id}/trajectory"), None).await;
    let traj: Vec<EstimateReport> = serde_json::from_value(traj).unwrap();
    let events = parse_log(&text).unwrap();
    let folded = replay(events.clone()).unwrap();
    let simulated = simulate_log(&events).unwrap();
    assert_eq!(folded.len(), 9);
    for ((a, b), c) in folded.iter().zip(&traj).zip(&simulated) {
        assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
        assert_eq!(a.var_cond.to_bits(), b.var_cond.to_bits());
        assert_eq!(a.var_simp.to_bits(), c.var_simp.to_bits());
        assert_eq!(a.estimate.to_bits(), c.estimate.to_bits());
        assert_eq!(a.ci_lo.to_bits(), c.ci_lo.to_bits());
    }
}

#[tokio::test]
async fn persisted_sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (id, pending, traj) = {
        let store = Arc::new(SessionStore::open(dir.path()).unwrap());
        let app = router(AppState { store, pool_dir: None }, None);
        let id = create(&app, json!({"units": units(6), "seed": 2})).await;
        let s = next(&app, &id).await.sample.unwrap();
        label(&app, &id, &s.unit_id, 3.0).await;
        let pending = next(&app, &id).await.sample.unwrap();
        let (_, traj) = json_call(&app, "GET", &format!("/sessions/{id}/trajectory"), None).await;
        (id, pending, traj)
    };
    let store = Arc::new(SessionStore::open(dir.path()).unwrap());
    let app = router(AppState { store, pool_dir: None }, None);
    let (_, again) = json_call(&app, "GET", &format!("/sessions/{id}/trajectory"), None).await;
    assert_eq!(again, traj);
    assert_eq!(next(&app, &id).await.sample, Some(pending));
}

#[tokio::test]
async fn serves_ui_bundle() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>console</html>").unwrap();
    std::fs::write(ui.path().join("app.js"), "console.log(1)").unwrap();
    let app = app(None, Some(ui.path()));
    let (status, body) = call(&app, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>console</html>");
    let (status, body) = call(&app, "GET", "/app.js", None).await;
    assert_eq!(
        (status, body.as_slice()),
        (StatusCode::OK, b"console.log(1)".as_slice())
    );
    let (status, _) = json_call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&app, "GET", "/nothing.css", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn refuses_duplicate_bind() {
    let first = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = first.local_addr().unwrap().to_string();
    let state = AppState {
        store: Arc::new(SessionStore::in_memory()),
        pool_dir: None,
    };
    let err = active_measure_service::serve(&addr, state, None).await.unwrap_err();
    assert_eq!(err.kind(), std::io::ErrorKind::AddrInUse);
}

#[tokio::test]
async fn live_server_answers_health() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let state = AppState {
        store: Arc::new(SessionStore::in_memory()),
        pool_dir: None,
    };
    let server = tokio::spawn(active_measure_service::serve_on(listener, state, None));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream
        .write_all(b"GET /health HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut buf = String::new();
    stream.read_to_string(&mut buf).await.unwrap();
    assert!(buf.starts_with("HTTP/1.1 200"), "{buf}");
    assert!(buf.ends_with("{\"status\":\"ok\"}"), "{buf}");
    server.abort();
}
