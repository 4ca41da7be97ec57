use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use protopart_core::checkpoint::{Checkpoint, SourceRow};
use protopart_core::data::synth::{write_synthetic, SynthConfig};
use protopart_core::data::ValidPrototypeSet;
use protopart_core::model::{cell_bbox, ModelConfig, PatchSource, ProtoPartModel};
use protopart_core::review::{SessionStore, EVENTS_FILE};

/// Ten synthetic 224x224 images, `syn00000` .. `syn00009`.
fn fixture_images() -> PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("protopart-review-fixture-{}", std::process::id()));
        write_synthetic(&SynthConfig { n_per_class: 5, seed: 3, ..SynthConfig::default() }, &dir).unwrap();
        dir.join("images")
    })
    .clone()
}

/// 18 prototypes; prototype j sits at cell (j % 7, 3j % 7) of image `syn{j % 10}`.
fn projected_checkpoint() -> Checkpoint {
    let config = ModelConfig { depth: 4, ..ModelConfig::default() };
    let mut model = ProtoPartModel::init(config).unwrap();
    let mut sources = Vec::new();
    for (j, p) in model.prototypes.iter_mut().enumerate() {
        let (row, col) = (j % 7, (3 * j) % 7);
        let image_id = format!("syn{:05}", j % 10);
        p.source = Some(PatchSource { image_id: image_id.clone(), row, col });
        sources.push(SourceRow {
            prototype: j,
            class: p.class_id,
            image_id: image_id.clone(),
            image_path: Some(fixture_images().join(format!("{image_id}.png"))),
            row,
            col,
            bbox: cell_bbox(row, col, 7, 224),
        });
    }
    Checkpoint::new(model, sources)
}

fn app(dir: &Path, allow_partial: bool) -> Router {
    protopart_review::app(SessionStore::open(projected_checkpoint(), dir).unwrap(), allow_partial)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn get_json(app: &Router, uri: &str) -> Value {
    let (status, body) = call(app, "GET", uri, None).await;
    assert_eq!(status, StatusCode::OK, "{uri}");
    serde_json::from_slice(&body).unwrap()
}

async fn mark(app: &Router, id: usize, verdict: &str, note: &str) -> StatusCode {
    let uri = format!("/api/prototypes/{id}/verdict");
    call(app, "POST", &uri, Some(json!({"verdict": verdict, "note": note}))).await.0
}

#[tokio::test]
async fn roster_lists_eighteen_prototypes_nine_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    let roster = get_json(&app, "/api/prototypes").await;
    let roster = roster.as_array().unwrap();
    assert_eq!(roster.len(), 18);
    for class in 0..2 {
        assert_eq!(roster.iter().filter(|e| e["class"] == class).count(), 9);
    }
    assert!(roster.iter().all(|e| e["verdict"] == "pending"));
    assert_eq!(roster[4]["bbox"], json!([160, 128, 32, 32]));
    let session = get_json(&app, "/api/session").await;
    assert_eq!(session["num_prototypes"], 18);
    assert_eq!(session["pending"], 18);
    assert_eq!(session["export_ready"], false);
    assert_eq!(session["hints"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn unknown_prototype_is_404() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    assert_eq!(mark(&app, 18, "valid", "").await, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/api/prototypes/99/patch.png", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/api/prototypes/abc/context.png", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_verdicts_are_400() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    assert_eq!(mark(&app, 0, "maybe", "").await, StatusCode::BAD_REQUEST);
    assert_eq!(mark(&app, 0, "pending", "").await, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/api/prototypes/0/verdict", Some(json!({"note": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn last_write_wins_and_both_events_are_kept() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    assert_eq!(mark(&app, 3, "valid", "first").await, StatusCode::OK);
    assert_eq!(mark(&app, 3, "discard", "second").await, StatusCode::OK);
    let roster = get_json(&app, "/api/prototypes").await;
    assert_eq!(roster[3]["verdict"], "discard");
    assert_eq!(roster[3]["note"], "second");
    let events = std::fs::read_to_string(dir.path().join(EVENTS_FILE)).unwrap();
    let events: Vec<Value> = events.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.len(), 2);
    assert_eq!(events[0]["verdict"], "valid");
    assert_eq!(events[1]["verdict"], "discard");
    assert!(events.iter().all(|e| e["prototype"] == 3));
}

#[tokio::test]
async fn export_waits_for_every_verdict_unless_partial() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    mark(&app, 0, "valid", "").await;
    assert_eq!(call(&app, "POST", "/api/export", None).await.0, StatusCode::CONFLICT);
    let (status, body) = call(&app, "POST", "/api/export", Some(json!({"allow_partial": true}))).await;
    assert_eq!(status, StatusCode::OK);
    let view: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(view["entries"], 1);

    let dir2 = tempfile::tempdir().unwrap();
    let lenient = protopart_review::app(SessionStore::open(projected_checkpoint(), dir2.path()).unwrap(), true);
    assert_eq!(get_json(&lenient, "/api/session").await["export_ready"], true);
    assert_eq!(call(&lenient, "POST", "/api/export", None).await.0, StatusCode::OK);
}

#[tokio::test]
async fn all_valid_exports_eighteen_entries() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    for j in 0..18 {
        assert_eq!(mark(&app, j, "valid", "").await, StatusCode::OK);
    }
    let (status, body) = call(&app, "POST", "/api/export", None).await;
    assert_eq!(status, StatusCode::OK);
    let view: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(view["entries"], 18);
    assert_eq!(view["per_class"], json!([9, 9]));
    assert!(view["warnings"].as_array().unwrap().is_empty());
    let set = ValidPrototypeSet::read(Path::new(view["path"].as_str().unwrap()), 2, 224).unwrap();
    assert_eq!(set.class_counts(2), vec![9, 9]);
}

#[tokio::test]
async fn all_discard_exports_empty_set_with_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    for j in 0..18 {
        mark(&app, j, "discard", "").await;
    }
    let (status, body) = call(&app, "POST", "/api/export", None).await;
    assert_eq!(status, StatusCode::OK);
    let view: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(view["entries"], 0);
    let warnings = view["warnings"].as_array().unwrap();
    assert_eq!(warnings.len(), 2);
    assert!(warnings[0].as_str().unwrap().contains("NV"));
    assert!(warnings[1].as_str().unwrap().contains("MEL"));
}

#[tokio::test]
async fn mixed_session_exports_expected_file() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    for j in 0..18 {
        let (v, note) = match j {
            0 => ("valid", "rim"),
            4 | 12 => ("valid", ""),
            _ => ("discard", ""),
        };
        mark(&app, j, v, note).await;
    }
    let (status, body) = call(&app, "POST", "/api/export", None).await;
    assert_eq!(status, StatusCode::OK);
    let view: Value = serde_json::from_slice(&body).unwrap();
    let written: Value = serde_json::from_str(&std::fs::read_to_string(view["path"].as_str().unwrap()).unwrap()).unwrap();
    let expected = json!({
        "version": 1,
        "entries": [
            {"class": 0, "image": "syn00000", "bbox": [0, 0, 32, 32], "note": "rim"},
            {"class": 0, "image": "syn00004", "bbox": [160, 128, 32, 32], "note": ""},
            {"class": 1, "image": "syn00002", "bbox": [32, 160, 32, 32], "note": ""}
        ]
    });
    assert_eq!(written, expected);
}

#[tokio::test]
async fn verdicts_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    {
        let app = app(dir.path(), false);
        mark(&app, 7, "valid", "keep").await;
        mark(&app, 8, "discard", "").await;
    }
    let app = app(dir.path(), false);
    let roster = get_json(&app, "/api/prototypes").await;
    assert_eq!(roster[7]["verdict"], "valid");
    assert_eq!(roster[7]["note"], "keep");
    assert_eq!(roster[8]["verdict"], "discard");
    assert_eq!(get_json(&app, "/api/session").await["pending"], 16);
    mark(&app, 9, "valid", "").await;
    let events = std::fs::read_to_string(dir.path().join(EVENTS_FILE)).unwrap();
    let seqs: Vec<u64> = events.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, vec![0, 1, 2]);
}

#[tokio::test]
async fn thumbnails_are_deterministic_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), false);
    for kind in ["patch", "context"] {
        let uri = format!("/api/prototypes/5/{kind}.png");
        let (s1, a) = call(&app, "GET", &uri, None).await;
        let (s2, b) = call(&app, "GET", &uri, None).await;
        assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK), "{}", String::from_utf8_lossy(&a));
        assert_eq!(&a[..8], b"\x89PNG\r\n\x1a\n");
        assert_eq!(a, b);
    }
}

#[test]
fn unprojected_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let model = ProtoPartModel::init(ModelConfig { depth: 4, ..ModelConfig::default() }).unwrap();
    let err = SessionStore::open(Checkpoint::new(model, Vec::new()), dir.path()).err().unwrap();
    assert!(err.is_validation());
    assert!(err.to_string().contains("source table"), "{err}");
}

#[test]
fn session_of_another_checkpoint_is_a_conflict() {
    let dir = tempfile::tempdir().unwrap();
    SessionStore::open(projected_checkpoint(), dir.path()).unwrap();
    let mut other = projected_checkpoint();
    other.model.prototypes[0].vector[0] += 1.0;
    other = Checkpoint::new(other.model, other.sources);
    assert!(SessionStore::open(other, dir.path()).is_err());
}
