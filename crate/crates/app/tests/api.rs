use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use fcluster::server::{open_review, router, AppState, ServeOptions};
use fcluster_core::eval::{Assignments, EvaluationSession};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    session: PathBuf,
    options: ServeOptions,
}

/// Three clusters: c0 = {a, b, c}, c1 = {d, e}, c2 = {f}.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let ids = ["a", "b", "c", "d", "e", "f"];
    let mut manifest = String::from("image_id,file_path,donor_id,taken_at\n");
    for id in ids {
        manifest.push_str(&format!("{id},img/{id}.jpg,d1,2015-06-01T10:00:00Z\n"));
    }
    manifest.push_str("evil,../outside.png,d1,2015-06-01T10:00:00Z\n");
    std::fs::write(root.join("manifest.csv"), manifest).unwrap();
    std::fs::create_dir_all(root.join("img")).unwrap();
    std::fs::write(root.join("img/a.jpg"), b"\xff\xd8jpeg-a").unwrap();
    std::fs::write(root.join("scatter.csv"), "image_id,x,y,cluster\na,0.5,1.5,0\n").unwrap();
    Assignments::new(ids.iter().map(|s| s.to_string()).collect(), vec![0, 0, 0, 1, 1, 2])
        .unwrap()
        .save(root.join("assignments.csv"))
        .unwrap();
    let session = root.join("session.json");
    let options = ServeOptions {
        assignments: root.join("assignments.csv"),
        session: session.clone(),
        manifest: Some(root.join("manifest.csv")),
        image_root: None,
        scatter: Some(root.join("scatter.csv")),
        static_dir: None,
        addr: SocketAddr::from(([127, 0, 0, 1], 0)),
    };
    Fixture { _dir: dir, root, session, options }
}

fn app(f: &Fixture) -> Router {
    let (data, session) = open_review(&f.options).unwrap();
    router(AppState::new(data, session, f.session.clone()))
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, String, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ctype, bytes)
}

async fn json(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, _, bytes) = send(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn on_disk(path: &Path) -> EvaluationSession {
    EvaluationSession::load(path).unwrap()
}

#[tokio::test]
async fn missing_session_is_created() {
    let f = fixture();
    assert!(!f.session.exists());
    let _app = app(&f);
    assert!(on_disk(&f.session).marks.is_empty());
}

#[tokio::test]
async fn clusters_report_sizes_labels_and_marks() {
    let f = fixture();
    let app = app(&f);
    json(&app, Method::POST, "/api/marks", Some(json!({"image_id": "d"}))).await;
    json(&app, Method::POST, "/api/labels", Some(json!({"cluster_id": 1, "keyword": "  tattoo "}))).await;
    let (status, body) = json(&app, Method::GET, "/api/clusters", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        body,
        json!([
            {"cluster_id": 0, "size": 3, "marked": 0},
            {"cluster_id": 1, "size": 2, "label": "tattoo", "marked": 1},
            {"cluster_id": 2, "size": 1, "marked": 0},
        ])
    );
}

#[tokio::test]
async fn cluster_images_are_paged() {
    let f = fixture();
    let app = app(&f);
    json(&app, Method::POST, "/api/marks", Some(json!({"image_id": "b"}))).await;
    let (status, body) = json(&app, Method::GET, "/api/clusters/0/images?offset=1&limit=1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        body,
        json!({
            "cluster_id": 0, "total": 3, "offset": 1, "limit": 1,
            "images": [{"image_id": "b", "url": "/api/images/b", "marked": true}],
        })
    );
    let (_, body) = json(&app, Method::GET, "/api/clusters/0/images", None).await;
    assert_eq!(body["limit"], 60);
    assert_eq!(body["images"].as_array().unwrap().len(), 3);
    let (status, body) = json(&app, Method::GET, "/api/clusters/9/images", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].as_str().unwrap().contains('9'));
}

#[tokio::test]
async fn images_are_served_with_their_type() {
    let f = fixture();
    let app = app(&f);
    let (status, ctype, bytes) = send(&app, Method::GET, "/api/images/a", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype, "image/jpeg");
    assert_eq!(bytes, b"\xff\xd8jpeg-a");
    let (status, _, _) = send(&app, Method::GET, "/api/images/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = send(&app, Method::GET, "/api/images/b", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = send(&app, Method::GET, "/api/images/evil", None).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
}

#[tokio::test]
async fn scatter_is_passed_through() {
    let f = fixture();
    let app = app(&f);
    let (status, ctype, bytes) = send(&app, Method::GET, "/api/scatter", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ctype.starts_with("text/csv"));
    assert_eq!(bytes, std::fs::read(f.root.join("scatter.csv")).unwrap());
}

#[tokio::test]
async fn marks_persist_before_the_response() {
    let f = fixture();
    let app = app(&f);
    for id in ["e", "a", "e"] {
        let (status, _) = json(&app, Method::POST, "/api/marks", Some(json!({"image_id": id}))).await;
        assert_eq!(status, StatusCode::OK);
        assert!(on_disk(&f.session).marks.contains(&id.to_string()));
    }
    assert_eq!(on_disk(&f.session).marks, ["e", "a"]);

    let (status, body) = json(&app, Method::DELETE, "/api/marks/e", None).await;
    assert_eq!((status, body["changed"].clone()), (StatusCode::OK, json!(true)));
    assert_eq!(on_disk(&f.session).marks, ["a"]);
    let (status, body) = json(&app, Method::DELETE, "/api/marks/e", None).await;
    assert_eq!((status, body["changed"].clone()), (StatusCode::OK, json!(false)));

    let (status, _, text) = send(&app, Method::GET, "/api/export", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(text, b"a\n");
}

#[tokio::test]
async fn bad_mutations_are_rejected_and_not_written() {
    let f = fixture();
    let app = app(&f);
    let before = std::fs::read(&f.session).unwrap();
    let cases = [
        (Method::POST, "/api/marks", Some(json!({"image_id": "zzz"})), StatusCode::NOT_FOUND),
        (Method::DELETE, "/api/marks/zzz", None, StatusCode::NOT_FOUND),
        (Method::POST, "/api/labels", Some(json!({"cluster_id": 7, "keyword": "x"})), StatusCode::NOT_FOUND),
        (Method::POST, "/api/labels", Some(json!({"cluster_id": 0, "keyword": "  "})), StatusCode::BAD_REQUEST),
        (Method::POST, "/api/merge", Some(json!({"merge_map": {"0": 0, "1": 0}})), StatusCode::BAD_REQUEST),
    ];
    for (method, uri, body, expected) in cases {
        let (status, resp) = json(&app, method, uri, body).await;
        assert_eq!(status, expected, "{uri}: {resp}");
        assert!(resp["error"].is_string());
    }
    assert_eq!(std::fs::read(&f.session).unwrap(), before);
}

#[tokio::test]
async fn merge_drives_metrics() {
    let f = fixture();
    let app = app(&f);
    json(&app, Method::POST, "/api/marks", Some(json!({"image_id": "a"}))).await;
    let (_, m) = json(&app, Method::GET, "/api/metrics", None).await;
    assert_eq!(m["grouping"], "clusters");
    assert_eq!(m["micro_precision"].as_f64().unwrap(), 5.0 / 6.0);
    assert!((m["macro_precision"].as_f64().unwrap() - (2.0 / 3.0 + 1.0 + 1.0) / 3.0).abs() < 1e-12);

    let (status, body) = json(&app, Method::POST, "/api/merge", Some(json!({"merge_map": {"0": 40, "1": 40, "2": 7}}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"merge_map": {"0": 1, "1": 1, "2": 0}, "groups": 2}));
    assert_eq!(on_disk(&f.session).merge_map.len(), 3);

    let (_, m) = json(&app, Method::GET, "/api/metrics", None).await;
    assert_eq!(m["grouping"], "merged");
    assert_eq!(m["per_group"]["1"], json!({"total": 5, "missed": 1, "precision": 0.8}));
    assert!((m["macro_precision"].as_f64().unwrap() - 0.9).abs() < 1e-12);
    assert_eq!(m["clusters"]["per_cluster"]["0"]["total"], 3);

    let (_, clusters) = json(&app, Method::GET, "/api/clusters", None).await;
    assert_eq!(clusters[1]["group"], 1);
    let (_, s) = json(&app, Method::GET, "/api/session", None).await;
    assert_eq!(s["marks"], json!(["a"]));
}

#[tokio::test]
async fn corrupt_session_refuses_to_start() {
    let f = fixture();
    std::fs::write(&f.session, "{ not json").unwrap();
    let err = open_review(&f.options).unwrap_err().to_string();
    assert!(err.contains("session.json"), "{err}");
    assert_eq!(std::fs::read_to_string(&f.session).unwrap(), "{ not json");
}

#[tokio::test]
async fn session_for_other_assignments_refuses_to_start() {
    let f = fixture();
    let other = Assignments::new(vec!["q".into()], vec![0]).unwrap();
    let mut s = EvaluationSession::new("s", "elsewhere.csv");
    s.add_mark(&other, "q").unwrap();
    s.save_atomic(&f.session).unwrap();
    let err = open_review(&f.options).unwrap_err().to_string();
    assert!(err.contains("session.json") && err.contains('q'), "{err}");
}

#[tokio::test]
async fn root_serves_a_page_and_unknown_api_paths_are_json_404() {
    let f = fixture();
    let app = app(&f);
    let (status, ctype, body) = send(&app, Method::GET, "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ctype.starts_with("text/html"));
    assert!(String::from_utf8(body).unwrap().contains("/api/clusters"));
    let (status, body) = json(&app, Method::GET, "/api/nothing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
}

#[tokio::test]
async fn static_dir_is_served_without_escapes() {
    let mut f = fixture();
    let ui = f.root.join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<p>ui</p>").unwrap();
    std::fs::write(ui.join("app.js"), "let x;").unwrap();
    f.options.static_dir = Some(ui);
    let app = app(&f);
    let (_, _, body) = send(&app, Method::GET, "/", None).await;
    assert_eq!(body, b"<p>ui</p>");
    let (status, ctype, _) = send(&app, Method::GET, "/app.js", None).await;
    assert_eq!((status, ctype.starts_with("text/javascript")), (StatusCode::OK, true));
    let (status, _, _) = send(&app, Method::GET, "/../manifest.csv", None).await;
    assert_ne!(status, StatusCode::OK);
}

#[tokio::test]
async fn concurrent_marks_are_all_kept() {
    let f = fixture();
    let app = app(&f);
    let ids = ["a", "b", "c", "d", "e", "f"];
    let tasks: Vec<_> = ids
        .iter()
        .map(|id| {
            let app = app.clone();
            let id = id.to_string();
            tokio::spawn(async move { json(&app, Method::POST, "/api/marks", Some(json!({"image_id": id}))).await })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap().0, StatusCode::OK);
    }
    let mut marks = on_disk(&f.session).marks;
    marks.sort();
    assert_eq!(marks, ids);
}
