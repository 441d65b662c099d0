use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet};
use vitrine_core::cco::{train_from_log, TrainingParams};
use vitrine_core::cco::{CcoScorer, IndicatorModel};
use vitrine_core::events::{Event, KindRegistry, WeightConfig};
use vitrine_core::events::{EventLog, KIND_PURCHASE, KIND_VIEW};
use vitrine_core::hybrid::{catalog_from_items, popularity_prior};
use vitrine_core::hybrid::{AnchorPolicy, BlendConfig, Catalog, ItemProfile};
use vitrine_core::rules::{compile_rules, protective_rules};
use vitrine_core::rules::{RuleSet, UserProfile};
use vitrine_core::time::Timestamp;
use vitrine_core::time::SECONDS_PER_DAY;
use vitrine_core::transparency::*;

fn now() -> Timestamp {
    Timestamp(19_800 * SECONDS_PER_DAY)
}

fn item(id: &str, cat: &str, tags: &[&str], seller: &str) -> ItemProfile {
    ItemProfile {
        item_id: id.into(),
        categories: BTreeSet::from([cat.to_string()]),
        tags: tags.iter().map(|s| s.to_string()).collect(),
        price: 2.0,
        margin: 0.2,
        stock: 5,
        seller_id: seller.into(),
    }
}

struct Fixture {
    registry: KindRegistry,
    weights: WeightConfig,
    model: IndicatorModel,
    scorer: CcoScorer,
    catalog: Catalog,
    rules: RuleSet,
    prior: BTreeMap<String, f64>,
    log: EventLog,
}

fn fixture(rules: RuleSet) -> Fixture {
    let registry = KindRegistry::default();
    let mut log = EventLog::new();
    let baskets: [(&str, &[&str]); 5] = [
        ("u1", &["A", "B", "C"]),
        ("u2", &["A", "B"]),
        ("u3", &["B", "C", "D"]),
        ("u4", &["D", "E"]),
        ("u5", &["E", "A"]),
    ];
    let mut n = 0;
    for (u, items) in baskets {
        for i in items {
            n += 1;
            log.ingest(
                Event::new(
                    &format!("p{n}"),
                    u,
                    Some(i),
                    KIND_PURCHASE,
                    now().minus_days(3),
                ),
                &registry,
                now(),
            )
            .unwrap();
            n += 1;
            log.ingest(
                Event::new(&format!("v{n}"), u, Some(i), KIND_VIEW, now().minus_days(4)),
                &registry,
                now(),
            )
            .unwrap();
        }
    }
    let model =
        train_from_log(&log, &registry, &TrainingParams::new(KIND_PURCHASE), now()).unwrap();
    let scorer = CcoScorer::new(&model);
    let catalog = catalog_from_items([
        item("A", "food", &[], "s1"),
        item("B", "food", &["animal_derived"], "s1"),
        item("C", "drinks", &["contains_alcohol"], "s2"),
        item("D", "drinks", &[], "s2"),
        item("E", "food", &["vegan"], "s3"),
    ]);
    let prior = popularity_prior(&log, KIND_PURCHASE);
    Fixture {
        registry,
        weights: WeightConfig::default(),
        model,
        scorer,
        catalog,
        rules,
        prior,
        log,
    }
}

impl Fixture {
    fn engine(&self) -> EngineView<'_> {
        EngineView {
            registry: &self.registry,
            weights: &self.weights,
            model: Some(&self.model),
            scorer: Some(&self.scorer),
            catalog: &self.catalog,
            rules: &self.rules,
            prior: &self.prior,
            primary_kind: KIND_PURCHASE,
        }
    }
}

fn assemble(
    fx: &Fixture,
    frame: &str,
    user: &str,
    allowed: bool,
    ctx: &[(&str, &str)],
) -> Result<FrameResult, FrameError> {
    let frames = default_frames();
    let cfg = lookup_frame(&frames, frame)?;
    let history: Vec<Event> = fx.log.user_events(user).cloned().collect();
    let profile = UserProfile::anonymous(user).with_age(30);
    let context: BTreeMap<String, String> = ctx
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let req = FrameRequest {
        user_id: user,
        history: &history,
        profile: &profile,
        personalization_allowed: allowed,
        context: &context,
        now: now(),
    };
    assemble_frame(cfg, &req, &fx.engine())
}

#[test]
fn others_also_bought_uses_population_correlations() {
    let fx = fixture(RuleSet::default());
    let r = assemble(
        &fx,
        "others_also_bought",
        "u9",
        true,
        &[(CONTEXT_ITEM, "A")],
    )
    .unwrap();
    assert!(!r.items.is_empty());
    assert!(r.items.iter().all(|i| i.item_id != "A"));
    assert!(r
        .disclosure
        .data_categories
        .contains(&DataCategory::PopulationCorrelations));
    assert!(!r
        .disclosure
        .data_categories
        .iter()
        .any(|c| c.is_personal_history()));
    assert!(!r.disclosure.personalized);
    let names: Vec<&str> = r
        .disclosure
        .parameters
        .iter()
        .map(|p| p.name.as_str())
        .collect();
    assert_eq!(names, [PARAM_CCO]);
}

#[test]
fn opted_out_user_gets_popularity_fallback() {
    let fx = fixture(RuleSet::default());
    let r = assemble(&fx, "recommended_for_you", "u1", false, &[]).unwrap();
    assert_eq!(r.disclosure.algorithm, FrameAlgorithm::PopularityFallback);
    assert!(!r.disclosure.personalized);
    assert!(r.disclosure.fallback_reason.is_some());
    assert!(!r.data_read.iter().any(|c| c.is_personal_history()));
    assert!(r.disclosure.top_signals.is_empty());
    // identical to what an anonymous user sees
    let anon = assemble(&fx, "recommended_for_you", "nobody", false, &[]).unwrap();
    assert_eq!(r.items, anon.items);

    let personal = assemble(&fx, "recommended_for_you", "u1", true, &[]).unwrap();
    assert!(personal.disclosure.personalized);
    assert!(personal
        .disclosure
        .data_categories
        .contains(&DataCategory::PurchaseHistory));
}

#[test]
fn empty_cart_yields_empty_items_with_disclosure() {
    let fx = fixture(RuleSet::default());
    let r = assemble(&fx, "cart_suggestions", "u1", true, &[]).unwrap();
    assert!(r.items.is_empty());
    assert_eq!(r.disclosure.rule_effects.summary, "none");
    assert!(!r.disclosure.render_text().is_empty());
    let full = assemble(
        &fx,
        "cart_suggestions",
        "u1",
        true,
        &[(CONTEXT_CART, "A,B")],
    )
    .unwrap();
    assert!(!full.items.is_empty());
    assert!(full
        .items
        .iter()
        .all(|i| i.item_id != "A" && i.item_id != "B"));
}

#[test]
fn unknown_frame() {
    let fx = fixture(RuleSet::default());
    assert!(matches!(
        assemble(&fx, "nope", "u1", true, &[]),
        Err(FrameError::UnknownFrame(_))
    ));
}

#[test]
fn model_not_loaded() {
    let fx = fixture(RuleSet::default());
    let mut engine = fx.engine();
    engine.scorer = None;
    engine.model = None;
    let frames = default_frames();
    let profile = UserProfile::anonymous("u1");
    let ctx = BTreeMap::new();
    let req = FrameRequest {
        user_id: "u1",
        history: &[],
        profile: &profile,
        personalization_allowed: true,
        context: &ctx,
        now: now(),
    };
    let err = assemble_frame(&frames["recommended_for_you"], &req, &engine).unwrap_err();
    assert!(matches!(err, FrameError::ModelNotLoaded));
    // popularity frames do not need the model
    assert!(assemble_frame(&frames["popular_now"], &req, &engine).is_ok());
}

#[test]
fn max_items_truncates() {
    let fx = fixture(RuleSet::default());
    let mut frames = default_frames();
    frames.get_mut("popular_now").unwrap().max_items = 2;
    let profile = UserProfile::anonymous("u1");
    let ctx = BTreeMap::new();
    let req = FrameRequest {
        user_id: "u1",
        history: &[],
        profile: &profile,
        personalization_allowed: true,
        context: &ctx,
        now: now(),
    };
    let r = assemble_frame(&frames["popular_now"], &req, &fx.engine()).unwrap();
    assert_eq!(r.items.len(), 2);
    assert_eq!(r.items[0].rank, 1);
}

#[test]
fn boosts_are_disclosed_and_marked_sponsored() {
    let boost = compile_rules(&[json!({
        "rule_id": "promo-s2", "target": {"seller": "s2"},
        "action": {"type": "BOOST", "multiplier": 100.0},
        "disclosure_text": "Seller s2 paid for higher placement."
    })])
    .unwrap();
    let fx = fixture(boost);
    let r = assemble(&fx, "popular_now", "u1", true, &[]).unwrap();
    assert_eq!(r.disclosure.rule_effects.boosts.len(), 1);
    let b = &r.disclosure.rule_effects.boosts[0];
    assert_eq!(b.disclosure_text, "Seller s2 paid for higher placement.");
    assert_eq!(b.sponsor_ids, ["s2"]);
    for it in &r.items {
        assert_eq!(it.sponsored, fx.catalog[&it.item_id].seller_id == "s2");
    }
    assert_eq!(fx.catalog[&r.items[0].item_id].seller_id, "s2");
    assert!(r
        .disclosure
        .render_text()
        .contains("Sponsored placement: Seller s2 paid"));
}

#[test]
fn rules_reading_profile_are_disclosed() {
    let fx = fixture(protective_rules());
    let r = assemble(&fx, "popular_now", "u1", false, &[]).unwrap();
    assert!(r
        .disclosure
        .data_categories
        .contains(&DataCategory::ProfileTraits));
}

#[test]
fn single_component_parameters_and_zero_rules() {
    let fx = fixture(RuleSet::default());
    let r = assemble(&fx, "popular_now", "u1", true, &[]).unwrap();
    let names: Vec<&str> = r
        .disclosure
        .parameters
        .iter()
        .map(|p| p.name.as_str())
        .collect();
    assert_eq!(names, [PARAM_POPULARITY]);
    assert_eq!(r.disclosure.rule_effects.summary, "none");
    let json: serde_json::Value = serde_json::from_str(&r.disclosure.to_json()).unwrap();
    assert_eq!(json["rule_effects"]["summary"], "none");
}

#[test]
fn parameters_ordered_by_aggregate_contribution() {
    let fx = fixture(RuleSet::default());
    let r = assemble(&fx, "recommended_for_you", "u2", true, &[]).unwrap();
    let c: Vec<f64> = r
        .disclosure
        .parameters
        .iter()
        .map(|p| p.contribution.abs())
        .collect();
    assert!(c.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(r.disclosure.parameters.len(), 3);
}

#[test]
fn criteria_sheet_lists_scoped_rules() {
    let fx = fixture(protective_rules());
    let frames = default_frames();
    let sheet = criteria_sheet(
        &frames["recommended_for_you"],
        &fx.registry,
        &fx.rules,
        KIND_PURCHASE,
    );
    assert_eq!(sheet.rules.len(), 3);
    assert!(sheet
        .data_categories_personalized
        .contains(&DataCategory::PurchaseHistory));
    assert!(!sheet
        .data_categories_opted_out
        .iter()
        .any(|c| c.is_personal_history()));
}

#[test]
fn disclosure_honesty_over_random_configs() {
    let fx = fixture(protective_rules().merged(&compile_rules(&[json!({
        "rule_id": "ctx", "condition": {"context_equals": {"key": "page", "value": "home"}},
        "target": {"has_tag": "vegan"}, "action": {"type": "BOOST", "multiplier": 2.0}, "disclosure_text": "House brand."
    })]).unwrap()).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let algos = [
        FrameAlgorithm::PersonalHistory,
        FrameAlgorithm::PopulationCooccurrence,
        FrameAlgorithm::CartContext,
        FrameAlgorithm::CategoryContext,
        FrameAlgorithm::PopularityFallback,
    ];
    let kinds = [
        KIND_PURCHASE,
        KIND_VIEW,
        "user_trait",
        "dwell",
        "bought_in_category",
    ];
    let anchors = [
        AnchorPolicy::PrimaryHistory,
        AnchorPolicy::ContextItems,
        AnchorPolicy::None,
    ];
    for i in 0..300 {
        let algorithm = algos[rng.gen_range(0..algos.len())];
        let signals: Vec<String> = if matches!(
            algorithm,
            FrameAlgorithm::PersonalHistory | FrameAlgorithm::CategoryContext
        ) {
            kinds
                .iter()
                .filter(|_| rng.gen_bool(0.5))
                .map(|s| s.to_string())
                .collect()
        } else {
            vec![]
        };
        let mut w = [
            rng.gen_range(0..3) as f64 * 0.5,
            rng.gen_range(0..3) as f64 * 0.5,
            rng.gen_range(0..3) as f64 * 0.5,
        ];
        if algorithm == FrameAlgorithm::PopularityFallback || w.iter().sum::<f64>() == 0.0 {
            w[2] = 1.0;
        }
        let cfg = FrameConfig {
            frame_id: format!("f{i}"),
            title: "t".into(),
            algorithm,
            signals,
            blend: BlendConfig {
                alpha: w[0],
                beta: w[1],
                gamma: w[2],
                anchors: anchors[rng.gen_range(0..3)],
            },
            max_items: rng.gen_range(1..8),
            rule_scope: vec![],
        };
        let user = ["u1", "u2", "u3", "nobody"][rng.gen_range(0..4)];
        let history: Vec<Event> = fx.log.user_events(user).cloned().collect();
        let profile = UserProfile::anonymous(user);
        let mut context = BTreeMap::new();
        if rng.gen_bool(0.5) {
            context.insert(CONTEXT_ITEM.to_string(), "A".to_string());
        }
        if rng.gen_bool(0.5) {
            context.insert(CONTEXT_CART.to_string(), "B,D".to_string());
        }
        if rng.gen_bool(0.5) {
            context.insert(CONTEXT_CATEGORY.to_string(), "food".to_string());
        }
        let req = FrameRequest {
            user_id: user,
            history: &history,
            profile: &profile,
            personalization_allowed: rng.gen_bool(0.7),
            context: &context,
            now: now(),
        };
        let r = assemble_frame(&cfg, &req, &fx.engine()).unwrap();
        assert_eq!(r.disclosure.data_categories, r.data_read, "config {cfg:?}");
        assert!(r.items.len() <= cfg.max_items);
        let boosted = vitrine_core::rules::boosted_items(&r.rule_trace);
        for it in &r.items {
            assert_eq!(it.sponsored, boosted.contains(it.item_id.as_str()));
        }
    }
}

#[test]
fn price_reference_examples() {
    let pts = |v: &[(i64, f64)]| -> Vec<PricePoint> {
        v.iter()
            .map(|(d, p)| PricePoint {
                item_id: "x".into(),
                timestamp: now().minus_days(*d),
                price: *p,
            })
            .collect()
    };
    assert_eq!(
        lowest_price_reference(&pts(&[(200, 10.0), (100, 8.0), (10, 9.0)]), now(), 180).unwrap(),
        8.0
    );
    assert_eq!(
        lowest_price_reference(&pts(&[(5, 4.5)]), now(), 180).unwrap(),
        4.5
    );
    assert!(matches!(
        lowest_price_reference(&pts(&[(200, 1.0), (181, 2.0)]), now(), 180),
        Err(PriceError::NoPriceData)
    ));
    assert_eq!(
        lowest_price_reference(&pts(&[(180, 3.0)]), now(), 180).unwrap(),
        3.0
    );
}

#[test]
fn price_history_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let mut h = PriceHistory::default();
        let mut raw = Vec::new();
        for _ in 0..rng.gen_range(0..30) {
            let p = PricePoint {
                item_id: "x".into(),
                timestamp: Timestamp(
                    now().0 - rng.gen_range(-10 * SECONDS_PER_DAY..400 * SECONDS_PER_DAY),
                ),
                price: rng.gen_range(1..10_000) as f64 / 100.0,
            };
            raw.push(p.clone());
            h.insert(p).unwrap();
        }
        let brute = raw
            .iter()
            .filter(|p| p.timestamp <= now() && now().0 - p.timestamp.0 <= 180 * SECONDS_PER_DAY)
            .map(|p| p.price)
            .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.min(p))));
        match (brute, h.reference_price("x", now(), 180)) {
            (Some(b), Ok(got)) => assert_eq!(b, got),
            (None, Err(PriceError::NoPriceData)) => {}
            other => panic!("mismatch {other:?}"),
        }
    }
    let mut h = PriceHistory::default();
    assert!(h
        .insert(PricePoint {
            item_id: "x".into(),
            timestamp: now(),
            price: 0.0
        })
        .is_err());
}

#[test]
fn scarcity_claims() {
    let mut one = item("one", "c", &[], "s");
    one.stock = 1;
    let mut many = item("many", "c", &[], "s");
    many.stock = 500;
    let catalog = catalog_from_items([one, many]);
    assert_eq!(
        validate_scarcity_claim(ScarcityClaim::StockLeft(1), "one", &catalog, None).unwrap(),
        ClaimVerdict::Valid
    );
    assert_eq!(
        validate_scarcity_claim(ScarcityClaim::StockLeft(1), "many", &catalog, None).unwrap(),
        ClaimVerdict::Invalid {
            reason: "false urgency".into()
        }
    );
    assert_eq!(
        validate_scarcity_claim(ScarcityClaim::ViewersNow(20), "many", &catalog, None).unwrap(),
        ClaimVerdict::Invalid {
            reason: "unverifiable".into()
        }
    );
    let live = LiveTelemetry {
        viewers_now: BTreeMap::from([("many".to_string(), 20)]),
    };
    assert_eq!(
        validate_scarcity_claim(ScarcityClaim::ViewersNow(20), "many", &catalog, Some(&live))
            .unwrap(),
        ClaimVerdict::Valid
    );
    assert!(matches!(
        validate_scarcity_claim(ScarcityClaim::ViewersNow(21), "many", &catalog, Some(&live))
            .unwrap(),
        ClaimVerdict::Invalid { .. }
    ));
    assert!(validate_scarcity_claim(ScarcityClaim::StockLeft(1), "ghost", &catalog, None).is_err());
}

#[test]
fn text_lists_repeated_boost_texts_once() {
    let rules = compile_rules(
        &(0..3)
            .map(|i| {
                json!({
                    "rule_id": format!("b{i}"), "target": "any_item",
                    "action": {"type": "BOOST", "multiplier": 2.0}, "disclosure_text": "House brand."
                })
            })
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let fx = fixture(rules);
    let r = assemble(&fx, "popular_now", "u1", true, &[]).unwrap();
    assert_eq!(r.disclosure.rule_effects.boosts.len(), 3);
    let text = r.disclosure.render_text();
    assert_eq!(text.matches("House brand.").count(), 1, "{text}");
    assert!(text.contains("(3 rules)"));
}
