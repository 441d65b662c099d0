use std::collections::BTreeMap;
use std::path::Path;
use vitrine_core::audit::{generate_synthetic_shop, SyntheticShopSpec};
use vitrine_core::events::{EventLog, IngestMode};
use vitrine_core::hybrid::catalog_to_jsonl;
use vitrine_core::service::*;
use vitrine_core::time::Timestamp;
use vitrine_core::transparency::{DataCategory, FrameAlgorithm};

fn setup(dir: &Path) -> (Service, Timestamp, vitrine_core::audit::SyntheticShop) {
    let spec = SyntheticShopSpec {
        n_users: 60,
        n_items: 40,
        n_events: 1200,
        ..Default::default()
    };
    let shop = generate_synthetic_shop(&spec).unwrap();
    std::fs::write(dir.join("catalog.jsonl"), catalog_to_jsonl(&shop.catalog)).unwrap();
    std::fs::write(dir.join("events.jsonl"), shop.log.to_jsonl()).unwrap();
    let svc = Service::open(ServiceConfig::in_dir(dir), spec.as_of).unwrap();
    (svc, spec.as_of, shop)
}

#[test]
fn model_not_loaded_until_trained() {
    let dir = tempfile::tempdir().unwrap();
    let (svc, now, _) = setup(dir.path());
    let err = svc
        .recommend("popular_now", "user-0001", &BTreeMap::new(), now)
        .unwrap_err();
    assert_eq!(err.status(), 503);
    svc.retrain(now).unwrap();
    assert!(svc
        .recommend("popular_now", "user-0001", &BTreeMap::new(), now)
        .is_ok());
    assert_eq!(
        svc.recommend("nope", "user-0001", &BTreeMap::new(), now)
            .unwrap_err()
            .status(),
        404
    );
    // model persisted and picked up on reopen
    let again = Service::open(ServiceConfig::in_dir(dir.path()), now).unwrap();
    assert!(again.health().model_loaded);
}

#[test]
fn optout_switches_to_fallback_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let (svc, now, _) = setup(dir.path());
    svc.retrain(now).unwrap();
    let ctx = BTreeMap::new();
    let before = svc
        .recommend("recommended_for_you", "user-0003", &ctx, now)
        .unwrap();
    assert!(before.disclosure.personalized);
    let c1 = svc.set_optout("user-0003", true, now).unwrap();
    let c2 = svc.set_optout("user-0003", true, now.plus_days(1)).unwrap();
    assert_eq!(c1, c2);
    let after = svc
        .recommend("recommended_for_you", "user-0003", &ctx, now)
        .unwrap();
    assert!(!after.disclosure.personalized);
    assert_eq!(
        after.disclosure.algorithm,
        FrameAlgorithm::PopularityFallback
    );
    assert!(!after.data_read.iter().any(|c| c.is_personal_history()));
    // durable: a fresh process sees the opt-out
    drop(svc);
    let svc = Service::open(ServiceConfig::in_dir(dir.path()), now).unwrap();
    assert!(svc.controls("user-0003").unwrap().personalization_opt_out);
    svc.set_optout("user-0003", false, now).unwrap();
    assert!(
        svc.recommend("recommended_for_you", "user-0003", &ctx, now)
            .unwrap()
            .disclosure
            .personalized
    );
}

#[test]
fn export_is_complete_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let (svc, now, shop) = setup(dir.path());
    let user = "user-0007";
    let archive = svc.export_user_data(user, now).unwrap();
    let lines: Vec<&str> = archive.lines().collect();
    let expected = shop.log.user_events(user).count();
    assert_eq!(lines.len(), expected + 1);
    assert!(lines[0].starts_with("{\"user_controls\""));
    let replayed = EventLog::replay(
        lines[1..].join("\n").as_bytes(),
        svc.registry(),
        IngestMode::Strict,
        now,
    )
    .unwrap();
    assert_eq!(replayed.len(), expected);
    assert_eq!(
        svc.export_user_data("ghost", now).unwrap_err().status(),
        404
    );
}

#[test]
fn delete_removes_events_and_blocks_reingest() {
    let dir = tempfile::tempdir().unwrap();
    let (svc, now, shop) = setup(dir.path());
    svc.retrain(now).unwrap();
    let user = "user-0010";
    let line = serde_json::to_string(shop.log.user_events(user).next().unwrap()).unwrap();
    svc.delete_user_data(user, now).unwrap();
    svc.delete_user_data(user, now).unwrap();
    svc.delete_user_data("ghost", now).unwrap();
    assert_eq!(svc.export_user_data(user, now).unwrap().lines().count(), 1);
    let file = std::fs::read_to_string(dir.path().join("events.jsonl")).unwrap();
    assert!(!file.contains(&format!("\"{user}\"")));
    let r = svc
        .recommend("recommended_for_you", user, &BTreeMap::new(), now)
        .unwrap();
    assert!(!r.disclosure.personalized);
    assert!(!r.data_read.contains(&DataCategory::PurchaseHistory));
    assert!(svc
        .ingest(&line.replace("ev-", "new-"), IngestMode::Strict, now)
        .is_err());
}

#[test]
fn strict_batch_is_all_or_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (svc, now, _) = setup(dir.path());
    let n = svc.event_count();
    let good = r#"{"event_id":"x1","user_id":"u","item_id":"item-0001","kind":"view","timestamp":"2025-12-30T00:00:00Z"}"#;
    let bad = r#"{"event_id":"x2","user_id":"u","item_id":"item-0001","kind":"teleport","timestamp":"2025-12-30T00:00:00Z"}"#;
    let batch = format!("{good}\n{bad}\n");
    assert!(svc.ingest(&batch, IngestMode::Strict, now).is_err());
    assert_eq!(svc.event_count(), n);
    let s = svc.ingest(&batch, IngestMode::Lenient, now).unwrap();
    assert_eq!(s.accepted, 1);
    assert_eq!(s.rejected.len(), 1);
    assert_eq!(svc.event_count(), n + 1);
    assert!(
        svc.ingest(good, IngestMode::Lenient, now)
            .unwrap()
            .rejected
            .len()
            == 1
    );
}

#[test]
fn config_frames_inherit_blend_defaults() {
    let cfg: ServiceConfig = serde_json::from_value(serde_json::json!({
        "blend": {"alpha": 0.5, "beta": 0.0, "gamma": 0.5},
        "frames": [{"frame_id": "f", "title": "F", "algorithm": "POPULARITY_FALLBACK", "max_items": 3}]
    }))
    .unwrap();
    let frames = cfg.frame_catalog().unwrap();
    assert_eq!(frames["f"].blend.alpha, 0.5);
    assert_ne!(cfg.config_hash(), ServiceConfig::default().config_hash());
    assert!(serde_json::from_value::<ServiceConfig>(serde_json::json!({"bogus": 1})).is_err());
}

#[test]
fn readers_keep_serving_through_retrains() {
    let dir = tempfile::tempdir().unwrap();
    let (svc, now, _) = setup(dir.path());
    svc.retrain(now).unwrap();
    let ctx = BTreeMap::new();
    std::thread::scope(|s| {
        let readers: Vec<_> = (0..4)
            .map(|i| {
                let svc = &svc;
                let ctx = &ctx;
                s.spawn(move || {
                    for n in 0..200 {
                        let user = format!("user-{:04}", 1 + (i * 200 + n) % 60);
                        let r = svc
                            .recommend("recommended_for_you", &user, ctx, now)
                            .unwrap();
                        assert_eq!(r.disclosure.frame_id, "recommended_for_you");
                    }
                })
            })
            .collect();
        for k in 0..5 {
            svc.retrain(now.plus_days(k)).unwrap();
        }
        for r in readers {
            r.join().unwrap();
        }
    });
}
