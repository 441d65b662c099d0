use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;
use vitrine_core::audit::{generate_synthetic_shop, SyntheticShopSpec};
use vitrine_core::http::{router, API_KEY_HEADER};
use vitrine_core::hybrid::catalog_to_jsonl;
use vitrine_core::service::{Service, ServiceConfig};
use vitrine_core::Timestamp;

fn setup(dir: &Path, api_key: Option<&str>) -> Arc<Service> {
    let spec = SyntheticShopSpec {
        n_users: 60,
        n_items: 40,
        n_events: 1500,
        ..Default::default()
    };
    let shop = generate_synthetic_shop(&spec).unwrap();
    std::fs::write(dir.join("catalog.jsonl"), catalog_to_jsonl(&shop.catalog)).unwrap();
    std::fs::write(dir.join("events.jsonl"), shop.log.to_jsonl()).unwrap();
    let mut cfg = ServiceConfig::in_dir(dir);
    cfg.api_key = api_key.map(str::to_string);
    Arc::new(Service::open(cfg, Timestamp::now()).unwrap())
}

async fn call(svc: &Arc<Service>, method: Method, uri: &str, body: &str) -> (StatusCode, String) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = router(svc.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

fn json(s: &str) -> serde_json::Value {
    serde_json::from_str(s).unwrap_or_else(|e| panic!("{e}: {s}"))
}

#[tokio::test]
async fn frames_need_a_model_and_a_known_id() {
    let dir = tempfile::tempdir().unwrap();
    let svc = setup(dir.path(), None);
    let (status, body) = call(&svc, Method::GET, "/v1/health", "").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body)["model_loaded"], false);

    let (status, _) = call(
        &svc,
        Method::GET,
        "/v1/frames/popular_now?user=user-0001",
        "",
    )
    .await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    let (status, _) = call(&svc, Method::POST, "/v1/admin/retrain", "").await;
    assert_eq!(status, StatusCode::OK);

    let (status, _) = call(
        &svc,
        Method::GET,
        "/v1/frames/no_such_frame?user=user-0001",
        "",
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&svc, Method::GET, "/v1/frames/popular_now", "").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = call(
        &svc,
        Method::GET,
        "/v1/frames/recommended_for_you?user=user-0002",
        "",
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["frame_id"], "recommended_for_you");
    assert_eq!(v["disclosure"]["schema_version"], "1.0");
    assert!(v["disclosure"]["data_categories"].as_array().is_some());
    assert!(!v["disclosure_text"].as_str().unwrap().is_empty());

    let (status, body) = call(
        &svc,
        Method::GET,
        "/v1/frames/others_also_bought?user=user-0002&item=item-0003",
        "",
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let items = json(&body)["items"].as_array().unwrap().clone();
    assert!(items.iter().all(|i| i["item_id"] != "item-0003"));
}

#[tokio::test]
async fn static_disclosure_lists_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let svc = setup(dir.path(), None);
    let (status, body) = call(&svc, Method::GET, "/v1/disclosure/recommended_for_you", "").await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["frame_id"], "recommended_for_you");
    assert!(!v["rules"].as_array().unwrap().is_empty());
    let (status, _) = call(&svc, Method::GET, "/v1/disclosure/nope", "").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn ingest_strict_and_lenient() {
    let dir = tempfile::tempdir().unwrap();
    let svc = setup(dir.path(), None);
    let good = r#"{"event_id":"http-1","user_id":"user-0001","item_id":"item-0001","kind":"view","timestamp":"2026-01-02T00:00:00Z"}"#;
    let bad = r#"{"event_id":"http-2","user_id":"user-0001","kind":"teleport","timestamp":"2026-01-02T00:00:00Z"}"#;
    let batch = format!("{good}\n{bad}\n");
    let (status, _) = call(&svc, Method::POST, "/v1/events?mode=strict", &batch).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, body) = call(&svc, Method::POST, "/v1/events?mode=lenient", &batch).await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["accepted"], 1);
    assert_eq!(v["rejected"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn optout_export_delete() {
    let dir = tempfile::tempdir().unwrap();
    let svc = setup(dir.path(), None);
    call(&svc, Method::POST, "/v1/admin/retrain", "").await;

    let (status, body) = call(
        &svc,
        Method::PUT,
        "/v1/users/user-0005/optout",
        r#"{"opt_out":true}"#,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body)["personalization_opt_out"], true);
    let (_, body) = call(
        &svc,
        Method::GET,
        "/v1/frames/recommended_for_you?user=user-0005",
        "",
    )
    .await;
    let v = json(&body);
    assert_eq!(v["disclosure"]["personalized"], false);
    assert!(!v["disclosure"]["data_categories"]
        .as_array()
        .unwrap()
        .iter()
        .any(|c| c == "purchase_history"));

    let (status, body) = call(&svc, Method::GET, "/v1/users/user-0005/data", "").await;
    assert_eq!(status, StatusCode::OK);
    let mut lines = body.lines();
    assert!(
        json(lines.next().unwrap())["user_controls"]["personalization_opt_out"]
            .as_bool()
            .unwrap()
    );
    assert!(lines.all(|l| json(l)["user_id"] == "user-0005"));

    let (status, _) = call(&svc, Method::GET, "/v1/users/nobody-at-all/data", "").await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = call(&svc, Method::DELETE, "/v1/users/user-0005/data", "").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body)["deleted"], true);
    let (_, body) = call(&svc, Method::GET, "/v1/users/user-0005/data", "").await;
    assert_eq!(body.lines().count(), 1);
    let log = std::fs::read_to_string(dir.path().join("events.jsonl")).unwrap();
    assert!(!log.contains("\"user-0005\""));
}

#[tokio::test]
async fn api_key_guards_mutations() {
    let dir = tempfile::tempdir().unwrap();
    let svc = setup(dir.path(), Some("s3cret"));
    let (status, _) = call(
        &svc,
        Method::PUT,
        "/v1/users/user-0001/optout",
        r#"{"opt_out":true}"#,
    )
    .await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let req = Request::builder()
        .method(Method::PUT)
        .uri("/v1/users/user-0001/optout")
        .header("content-type", "application/json")
        .header(API_KEY_HEADER, "s3cret")
        .body(Body::from(r#"{"opt_out":true}"#))
        .unwrap();
    assert_eq!(
        router(svc.clone()).oneshot(req).await.unwrap().status(),
        StatusCode::OK
    );
    // health stays open for probes
    let (status, _) = call(&svc, Method::GET, "/v1/health", "").await;
    assert_eq!(status, StatusCode::OK);
}
