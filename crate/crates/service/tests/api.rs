mod common;

use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use cellattr::api::{router, AppState};
use cellattr::store::{ReviewItem, ReviewStore};
use cellattr::workspace::{run_next_iteration, Workspace};
use cellattr_core::annotator::{merge_corrections, AnnotationRecord, ReviewStatus};
use cellattr_core::data::{generate_synthetic, AttributeSchema};
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (
        status,
        to_bytes(resp.into_body(), usize::MAX)
            .await
            .unwrap()
            .to_vec(),
    )
}

async fn json_of(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn ids_by_confidence(dir: &std::path::Path) -> Vec<String> {
    let text = std::fs::read_to_string(dir.join("annotations.json")).unwrap();
    let mut recs: Vec<AnnotationRecord> = serde_json::from_str(&text).unwrap();
    recs.sort_by(|a, b| a.min_confidence.total_cmp(&b.min_confidence));
    recs.into_iter().map(|r| r.id).collect()
}

#[tokio::test]
async fn queue_orders_by_ascending_min_confidence() {
    let dir = tempfile::tempdir().unwrap();
    common::annotated_dir(dir.path(), &[0.9, 0.3, 0.6]);
    let app = router(AppState::open(dir.path()).unwrap(), None);
    let (status, body) = json_of(&app, "GET", "/api/queue", None).await;
    assert_eq!(status, StatusCode::OK);
    let items: Vec<ReviewItem> = serde_json::from_value(body).unwrap();
    let got: Vec<f64> = items.iter().map(|i| i.record.min_confidence).collect();
    assert_eq!(got, vec![0.3, 0.6, 0.9]);
    assert_eq!(
        items.iter().map(|i| i.rank).collect::<Vec<_>>(),
        vec![0, 1, 2]
    );
    assert_eq!(items[0].saliency_heads.len(), 12);

    let (_, body) = json_of(&app, "GET", "/api/queue?limit=1&offset=1", None).await;
    let page: Vec<ReviewItem> = serde_json::from_value(body).unwrap();
    assert_eq!(page.len(), 1);
    assert_eq!(page[0].record.min_confidence, 0.6);
}

#[tokio::test]
async fn review_lifecycle_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    common::annotated_dir(dir.path(), &[0.9, 0.3, 0.6]);
    let ids = ids_by_confidence(dir.path());
    let app = router(AppState::open(dir.path()).unwrap(), None);

    let accept = json!({"decision": "accept"});
    let uri = format!("/api/records/{}/review", ids[0]);
    let (s, rec) = json_of(&app, "POST", &uri, Some(accept.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(rec["review_status"], "accepted");
    let (_, rec) = json_of(&app, "GET", &format!("/api/records/{}", ids[0]), None).await;
    assert_eq!(rec["review_status"], "accepted");

    // idempotent repeat, conflicting repeat
    let (s, _) = json_of(&app, "POST", &uri, Some(accept)).await;
    assert_eq!(s, StatusCode::OK);
    let log = std::fs::read_to_string(dir.path().join("reviews.log")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let (s, _) = json_of(
        &app,
        "POST",
        &uri,
        Some(json!({"decision": "correct", "corrections": {"granularity": "yes"}})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);

    let uri1 = format!("/api/records/{}/review", ids[1]);
    let (s, body) = json_of(
        &app,
        "POST",
        &uri1,
        Some(json!({"decision": "correct", "corrections": {"granule_colour": "green"}})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["attribute"], "granule_colour");
    assert!(body["error"].as_str().unwrap().contains("granule_colour"));

    let correction = json!({"decision": "correct", "corrections": {"granule_colour": "red"}});
    let (s, rec) = json_of(&app, "POST", &uri1, Some(correction.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(rec["review_status"], "corrected");
    assert_eq!(rec["corrected_values"]["granule_colour"], "red");
    let (s, _) = json_of(&app, "POST", &uri1, Some(correction)).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = json_of(
        &app,
        "POST",
        &uri1,
        Some(json!({"decision": "correct", "corrections": {"granule_colour": "purple"}})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, _) = json_of(
        &app,
        "POST",
        "/api/records/nope/review",
        Some(json!({"decision": "accept"})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_of(&app, "GET", "/api/records/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (_, q) = json_of(&app, "GET", "/api/queue", None).await;
    let q: Vec<ReviewItem> = serde_json::from_value(q).unwrap();
    assert_eq!(q.len(), 1);
    assert!(q
        .iter()
        .all(|i| i.record.review_status == ReviewStatus::Machine));

    let (_, stats) = json_of(&app, "GET", "/api/stats", None).await;
    assert_eq!(
        stats["counts"],
        json!({"machine": 1, "accepted": 1, "corrected": 1})
    );
    assert_eq!(stats["iteration"], 0);
    assert_eq!(stats["gaa"], 0.95);
    assert_eq!(stats["gate"]["qualified"], true);
}

#[tokio::test]
async fn reviews_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    common::annotated_dir(dir.path(), &[0.9, 0.3, 0.6]);
    let ids = ids_by_confidence(dir.path());
    let state = AppState::open(dir.path()).unwrap();
    let app = router(state, None);
    json_of(
        &app,
        "POST",
        &format!("/api/records/{}/review", ids[2]),
        Some(json!({"decision": "accept"})),
    )
    .await;
    json_of(
        &app,
        "POST",
        &format!("/api/records/{}/review", ids[0]),
        Some(json!({"decision": "correct", "corrections": {"cell_type": "basophil"}})),
    )
    .await;
    let (_, before) = json_of(&app, "GET", "/api/stats", None).await;

    let reopened = ReviewStore::open(dir.path()).unwrap();
    assert_eq!(
        reopened.get(&ids[2]).unwrap().review_status,
        ReviewStatus::Accepted
    );
    assert_eq!(reopened.get(&ids[0]).unwrap().labels().0, "basophil");
    let app2 = router(AppState::open(dir.path()).unwrap(), None);
    let (_, after) = json_of(&app2, "GET", "/api/stats", None).await;
    assert_eq!(before["counts"], after["counts"]);
}

#[tokio::test]
async fn images_and_saliency_overlays() {
    let dir = tempfile::tempdir().unwrap();
    common::annotated_dir(dir.path(), &[0.9, 0.3, 0.6]);
    let ids = ids_by_confidence(dir.path());
    let app = router(AppState::open(dir.path()).unwrap(), None);

    let (s, png) = call(&app, "GET", &format!("/api/images/{}", ids[0]), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");
    let (s, _) = call(&app, "GET", "/api/images/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    for head in ["granule_type", "cell_type"] {
        let uri = format!("/api/cam/{}/{head}", ids[0]);
        let (s, a) = call(&app, "GET", &uri, None).await;
        assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&a));
        let img = cellattr_core::data::decode_image(&a).unwrap();
        assert_eq!(img.shape(), &[3, 16, 16]);
        let (_, b) = call(&app, "GET", &uri, None).await;
        assert_eq!(a, b);
    }
    let (s, _) = call(&app, "GET", &format!("/api/cam/{}/nonsense", ids[0]), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn iterations_need_an_iterate_work_dir() {
    let dir = tempfile::tempdir().unwrap();
    common::annotated_dir(dir.path(), &[0.5]);
    let app = router(AppState::open(dir.path()).unwrap(), None);
    let (s, _) = json_of(&app, "POST", "/api/iterations", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[test]
fn review_loop_grows_seed_set() {
    let dir = tempfile::tempdir().unwrap();
    common::annotated_dir(dir.path(), &[0.9, 0.3, 0.6]);
    let ids = ids_by_confidence(dir.path());
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        let app = router(AppState::open(dir.path()).unwrap(), None);
        json_of(
            &app,
            "POST",
            &format!("/api/records/{}/review", ids[0]),
            Some(json!({"decision": "accept"})),
        )
        .await;
        let (s, _) = json_of(
            &app,
            "POST",
            &format!("/api/records/{}/review", ids[1]),
            Some(json!({"decision": "correct", "corrections": {"nucleus_shape": "irregular"}})),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
        let (_, q) = json_of(&app, "GET", "/api/queue", None).await;
        assert_eq!(q.as_array().unwrap().len(), 1);
    });

    let store = ReviewStore::open(dir.path()).unwrap();
    let schema = AttributeSchema::synthetic_default();
    let seed = generate_synthetic(5, &schema, 99, 16);
    let pool = generate_synthetic(3, &schema, 11, 16);
    let merged = merge_corrections(seed, &store.reviewed(), &pool, store.codec().unwrap()).unwrap();
    assert_eq!(merged.len(), 7);
    let corrected = merged.iter().find(|r| r.id == ids[1]).unwrap();
    assert_eq!(corrected.attributes["nucleus_shape"], "irregular");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn iteration_trigger_runs_next_iteration() {
    let root = tempfile::tempdir().unwrap();
    let (seed, pool) = common::seed_and_pool(root.path(), 30, 6);
    let work = root.path().join("work");
    Workspace {
        seed_manifest: seed,
        pool_manifest: pool,
        image_size: 16,
        config: common::tiny_config(),
    }
    .save(&work)
    .unwrap();
    let w = work.clone();
    tokio::task::spawn_blocking(move || run_next_iteration(&w).unwrap())
        .await
        .unwrap();

    let app = router(AppState::open(&work).unwrap(), None);
    let (_, q) = json_of(&app, "GET", "/api/queue", None).await;
    let q: Vec<ReviewItem> = serde_json::from_value(q).unwrap();
    assert_eq!(q.len(), 6);
    let id = q[0].record.id.clone();
    json_of(
        &app,
        "POST",
        &format!("/api/records/{id}/review"),
        Some(json!({"decision": "accept"})),
    )
    .await;

    let (s, body) = json_of(&app, "POST", "/api/iterations", None).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(body["iteration"], 1);
    let (s, _) = json_of(&app, "POST", "/api/iterations", None).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let mut stats = Value::Null;
    for _ in 0..600 {
        tokio::time::sleep(Duration::from_millis(100)).await;
        stats = json_of(&app, "GET", "/api/stats", None).await.1;
        if stats["iteration_running"].is_null() {
            break;
        }
    }
    assert!(stats["last_error"].is_null(), "{stats}");
    assert_eq!(stats["iteration"], 1);
    assert_eq!(stats["counts"]["machine"], 5);
    let ws = Workspace::load(&work).unwrap();
    let seed = cellattr_core::data::load_manifest(
        &ws.seed_manifest,
        &AttributeSchema::synthetic_default(),
        16,
    )
    .unwrap();
    assert_eq!(seed.len(), 31);
    assert!(seed.iter().any(|r| r.id == id));
}
