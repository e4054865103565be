use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use imeforge::{is_input_prefix, Engine, KeyLayout, KeySequence, Lexicon};
use imeforge_service::{router, AppState, Clock, DecodeResponse, LabelsResponse, StateOptions};
use serde_json::{json, Value};
use tower::ServiceExt;

fn engine() -> Arc<Engine> {
    static ENGINE: OnceLock<Arc<Engine>> = OnceLock::new();
    ENGINE.get_or_init(|| Arc::new(Engine::bundled().unwrap())).clone()
}

struct Fixture {
    _dir: tempfile::TempDir,
    log_path: std::path::PathBuf,
    now: Arc<AtomicU64>,
    app: Router,
    state: Arc<AppState>,
}

fn clock(now: &Arc<AtomicU64>) -> Clock {
    let now = now.clone();
    Arc::new(move || now.load(Ordering::SeqCst) as f64)
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("selections.jsonl");
    let now = Arc::new(AtomicU64::new(1_000_000));
    let state = AppState::new(engine(), &StateOptions::new(&log_path), clock(&now)).unwrap();
    Fixture {
        app: router(state.clone(), None),
        state,
        _dir: dir,
        log_path,
        now,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn decode(app: &Router, body: Value) -> (StatusCode, Option<DecodeResponse>) {
    let (status, bytes) = call(app, "POST", "/api/decode", Some(body)).await;
    let parsed = (status == StatusCode::OK).then(|| serde_json::from_slice(&bytes).unwrap());
    (status, parsed)
}

fn log_lines(path: &std::path::Path) -> usize {
    std::fs::read_to_string(path).map(|s| s.lines().count()).unwrap_or(0)
}

#[tokio::test]
async fn decode_returns_candidates_that_restore_the_keys() {
    let f = fixture();
    let (status, resp) = decode(&f.app, json!({"keys": "woban", "layout": "26", "top_k": 5})).await;
    assert_eq!(status, StatusCode::OK);
    let resp = resp.unwrap();
    assert!(!resp.candidates.is_empty() && resp.candidates.len() <= 5);
    let x = KeySequence::parse("woban", KeyLayout::TwentySixKey).unwrap();
    for (i, c) in resp.candidates.iter().enumerate() {
        assert_eq!(c.rank, i + 1);
        assert_eq!(c.chars.chars().count(), c.pyseg.split('\'').count());
        // noise-free pysegs type back to a prefix of the input
        if !c.pyseg.contains('>') {
            let chunks: Vec<&str> = c.pyseg.split('\'').map(|t| t.split(':').next().unwrap()).collect();
            assert!(is_input_prefix(&chunks, &x).unwrap(), "{}", c.pyseg);
        }
    }
    assert_eq!(log_lines(&f.log_path), 1);
}

#[tokio::test]
async fn keypad_input_decodes() {
    let f = fixture();
    let (status, resp) = decode(&f.app, json!({"keys": "96", "layout": "9", "top_k": 10})).await;
    assert_eq!(status, StatusCode::OK);
    let lex = Lexicon::bundled();
    let has_wo = resp.unwrap().candidates.iter().any(|c| {
        c.chars.chars().count() == 1
            && lex
                .c2p_all(c.chars.chars().next().unwrap(), imeforge::ChunkMode::Perfect)
                .unwrap()
                .contains(&"wo")
    });
    assert!(has_wo);
}

#[tokio::test]
async fn invalid_decode_requests_are_rejected() {
    let f = fixture();
    for body in [
        json!({"keys": "", "layout": "26"}),
        json!({"keys": "woban", "layout": "12"}),
        json!({"keys": "wo1", "layout": "26"}),
        json!({"keys": "woban", "layout": "26", "top_k": 0}),
        json!({"keys": "woban", "layout": "26", "top_k": 51}),
        json!({"layout": "26"}),
        json!({"keys": "wany", "layout": "26", "user_words": [{"word": "婉莹", "pinyin": ["wan"], "boost": 10.0}]}),
    ] {
        let (status, _) = decode(&f.app, body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    }
    let (status, _) = call(&f.app, "POST", "/api/decode", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    // "v" starts no syllable and cannot be repaired by a single typo
    let (status, _) = decode(&f.app, json!({"keys": "vvvvvv", "layout": "26"})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(log_lines(&f.log_path), 0);
}

#[tokio::test]
async fn extension_fields_reach_the_decoder() {
    let f = fixture();
    let plain = decode(&f.app, json!({"keys": "wany", "layout": "26"})).await.1.unwrap();
    let boosted = decode(
        &f.app,
        json!({"keys": "wany", "layout": "26", "user_words": [{"word": "婉莹", "pinyin": ["wan", "ying"], "boost": 1000.0}]}),
    )
    .await
    .1
    .unwrap();
    assert_eq!(boosted.candidates[0].chars, "婉莹");
    assert_ne!(plain.candidates[0].chars, "婉莹");
}

#[tokio::test]
async fn select_is_logged_once() {
    let f = fixture();
    let resp = decode(&f.app, json!({"keys": "woban", "layout": "26"})).await.1.unwrap();
    let before = log_lines(&f.log_path);
    let select = json!({"request_id": resp.request_id, "selected_rank": 1});
    let (status, _) = call(&f.app, "POST", "/api/select", Some(select.clone())).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert_eq!(log_lines(&f.log_path), before + 1);
    let (status, _) = call(&f.app, "POST", "/api/select", Some(select)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(log_lines(&f.log_path), before + 1);

    let (status, _) = call(&f.app, "POST", "/api/select", Some(json!({"request_id": "nope", "selected_rank": 1}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let other = decode(&f.app, json!({"keys": "woban", "layout": "26"})).await.1.unwrap();
    let bad_rank = json!({"request_id": other.request_id, "selected_rank": 99});
    let (status, _) = call(&f.app, "POST", "/api/select", Some(bad_rank)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn labels_follow_selections() {
    let f = fixture();
    let (_, body) = call(&f.app, "GET", "/api/labels", None).await;
    let empty: LabelsResponse = serde_json::from_slice(&body).unwrap();
    assert!(empty.rows.is_empty());

    let first = decode(&f.app, json!({"keys": "woban", "layout": "26"})).await.1.unwrap();
    let second = decode(&f.app, json!({"keys": "woban", "layout": "26"})).await.1.unwrap();
    assert_eq!(first.candidates, second.candidates);
    let pick = first.candidates[0].chars.clone();
    let (status, _) = call(
        &f.app,
        "POST",
        "/api/select",
        Some(json!({"request_id": first.request_id, "selected_rank": 1})),
    )
    .await;
    assert_eq!(status, StatusCode::NO_CONTENT);

    let (status, body) = call(&f.app, "GET", "/api/labels", None).await;
    assert_eq!(status, StatusCode::OK);
    let labels: LabelsResponse = serde_json::from_slice(&body).unwrap();
    let row = labels.rows.iter().find(|r| r.answer == pick).unwrap();
    assert_eq!((row.provided, row.selected), (2, 1));
    assert_eq!(row.rank_label, Some(50.0));
    assert_eq!(row.binary_label, 1);
    let untouched = labels.rows.iter().find(|r| r.answer != pick).unwrap();
    assert_eq!(untouched.binary_label, 0);

    // a window that ends before the events is empty
    let (_, body) = call(&f.app, "GET", "/api/labels?to=10", None).await;
    let windowed: LabelsResponse = serde_json::from_slice(&body).unwrap();
    assert!(windowed.rows.is_empty());
}

#[tokio::test]
async fn request_ids_expire_and_survive_restarts() {
    let f = fixture();
    let old = decode(&f.app, json!({"keys": "woaini", "layout": "26"})).await.1.unwrap();
    f.now.fetch_add(25 * 3600, Ordering::SeqCst);
    let (status, _) = call(
        &f.app,
        "POST",
        "/api/select",
        Some(json!({"request_id": old.request_id, "selected_rank": 1})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let fresh = decode(&f.app, json!({"keys": "woaini", "layout": "26"})).await.1.unwrap();
    let done = decode(&f.app, json!({"keys": "zhongguo", "layout": "26"})).await.1.unwrap();
    let (status, _) = call(
        &f.app,
        "POST",
        "/api/select",
        Some(json!({"request_id": done.request_id, "selected_rank": 1})),
    )
    .await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert_eq!(f.state.live_requests(), 1);

    // a new process over the same log knows which ids are still open
    let restarted = AppState::new(engine(), &StateOptions::new(&f.log_path), clock(&f.now)).unwrap();
    assert_eq!(restarted.live_requests(), 1);
    let app = router(restarted, None);
    let (status, _) = call(&app, "POST", "/api/select", Some(json!({"request_id": fresh.request_id, "selected_rank": 1}))).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = call(&app, "POST", "/api/select", Some(json!({"request_id": done.request_id, "selected_rank": 1}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn health_and_static_files() {
    let f = fixture();
    let (status, body) = call(&f.app, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");

    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<p>pad</p>").unwrap();
    let app = router(f.state.clone(), Some(ui.path()));
    let (status, body) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<p>pad</p>");
    let (status, _) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn serves_over_tcp() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let f = fixture();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = f.app.clone();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream
        .write_all(b"GET /api/health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut out = String::new();
    tokio::time::timeout(Duration::from_secs(10), stream.read_to_string(&mut out))
        .await
        .unwrap()
        .unwrap();
    assert!(out.starts_with("HTTP/1.1 200"), "{out}");
    assert!(out.contains("\"status\":\"ok\""));
}
