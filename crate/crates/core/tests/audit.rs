use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use vitrine_core::audit::*;
use vitrine_core::events::{CONTEXT_CATEGORY, KIND_PURCHASE, KIND_USER_TRAIT};
use vitrine_core::hybrid::{catalog_from_items, ItemProfile};

fn small_spec() -> SyntheticShopSpec {
    SyntheticShopSpec {
        n_users: 100,
        n_items: 60,
        n_events: 2000,
        ..Default::default()
    }
}

fn item(id: &str, cat: &str, tags: &[&str], margin: f64) -> ItemProfile {
    ItemProfile {
        item_id: id.into(),
        categories: BTreeSet::from([cat.to_string()]),
        tags: tags.iter().map(|s| s.to_string()).collect(),
        price: 1.0,
        margin,
        stock: 1,
        seller_id: "s".into(),
    }
}

fn frame(user: &str, items: &[&str]) -> ServedFrame {
    ServedFrame {
        user_id: user.into(),
        frame_id: "f".into(),
        items: items.iter().map(|s| s.to_string()).collect(),
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_synthetic_shop(&small_spec()).unwrap();
    let b = generate_synthetic_shop(&small_spec()).unwrap();
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    assert_eq!(a.catalog, b.catalog);
    assert_eq!(a.users, b.users);
    let c = generate_synthetic_shop(&SyntheticShopSpec {
        seed: 7,
        ..small_spec()
    })
    .unwrap();
    assert_ne!(a.log.to_jsonl(), c.log.to_jsonl());
}

#[test]
fn cohort_sizes_are_exact() {
    let spec = SyntheticShopSpec {
        fraction_vegetarian: 0.3,
        fraction_minors: 0.1,
        ..small_spec()
    };
    let shop = generate_synthetic_shop(&spec).unwrap();
    assert_eq!(shop.users.iter().filter(|u| u.vegetarian).count(), 30);
    assert_eq!(shop.users.iter().filter(|u| u.is_minor()).count(), 10);
    assert_eq!(shop.users.iter().filter(|u| u.gender == "f").count(), 50);
    let behavioral = shop
        .log
        .events()
        .iter()
        .filter(|e| e.kind != KIND_USER_TRAIT)
        .count();
    assert_eq!(behavioral, 2000);
}

#[test]
fn generated_histories_respect_constraints() {
    let shop = generate_synthetic_shop(&small_spec()).unwrap();
    let users: BTreeMap<&str, &SyntheticUser> =
        shop.users.iter().map(|u| (u.user_id.as_str(), u)).collect();
    for e in shop.log.events() {
        let Some(item) = e.item_id.as_ref().map(|i| &shop.catalog[i]) else {
            continue;
        };
        let u = users[e.user_id.as_str()];
        assert!(!(u.vegetarian && item.has_tag(TAG_ANIMAL_DERIVED)));
        assert!(!(u.is_minor() && item.has_tag(TAG_CONTAINS_ALCOHOL)));
    }
}

#[test]
fn invalid_spec() {
    for spec in [
        SyntheticShopSpec {
            n_users: 0,
            ..small_spec()
        },
        SyntheticShopSpec {
            fraction_minors: 1.5,
            ..small_spec()
        },
        SyntheticShopSpec {
            gender_labels: vec![],
            ..small_spec()
        },
    ] {
        assert!(matches!(
            generate_synthetic_shop(&spec),
            Err(AuditError::InvalidSpec(_))
        ));
    }
}

/// G statistic of an r×c contingency table, oracle form 2·ΣO·ln(O/E).
fn g_test(table: &[Vec<f64>]) -> f64 {
    let n: f64 = table.iter().flatten().sum();
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..table[0].len())
        .map(|j| table.iter().map(|r| r[j]).sum())
        .collect();
    let mut g = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &o) in r.iter().enumerate() {
            if o > 0.0 {
                g += o * (o / (rows[i] * cols[j] / n)).ln();
            }
        }
    }
    2.0 * g
}

fn category_by_gender(shop: &SyntheticShop) -> Vec<Vec<f64>> {
    let gender: BTreeMap<&str, &str> = shop
        .users
        .iter()
        .map(|u| (u.user_id.as_str(), u.gender.as_str()))
        .collect();
    let mut t = vec![vec![0.0; CATEGORIES.len()]; 2];
    for e in shop.log.events().iter().filter(|e| e.kind == KIND_PURCHASE) {
        let cat = e.context[CONTEXT_CATEGORY].as_str();
        let c = CATEGORIES.iter().position(|x| *x == cat).unwrap();
        t[(gender[e.user_id.as_str()] == "m") as usize][c] += 1.0;
    }
    t
}

#[test]
fn stereotype_switch_raises_category_gender_dependence() {
    let clean = generate_synthetic_shop(&small_spec()).unwrap();
    let mut spec = small_spec();
    spec.planted.stereotype_correlation = true;
    let planted = generate_synthetic_shop(&spec).unwrap();
    assert!(g_test(&category_by_gender(&planted)) > g_test(&category_by_gender(&clean)));
}

#[test]
fn planted_rules_follow_switches() {
    let mut spec = small_spec();
    assert!(generate_synthetic_shop(&spec)
        .unwrap()
        .planted_rules
        .is_empty());
    spec.planted.margin_boost = true;
    let shop = generate_synthetic_shop(&spec).unwrap();
    assert!(!shop.planted_rules.is_empty());
    assert!(shop
        .planted_rules
        .rules()
        .iter()
        .all(|r| r.rule_id.starts_with("planted-margin")));
}

#[test]
fn violation_rate_examples() {
    let catalog = catalog_from_items([
        item("meat", "meat", &[TAG_ANIMAL_DERIVED], 0.1),
        item("kale", "produce", &[], 0.1),
    ]);
    let mut profiles = Profiles::new();
    profiles.insert(
        "v".into(),
        AuditProfile {
            constraints: BTreeSet::from([Constraint::Vegetarian]),
            ..Default::default()
        },
    );
    profiles.insert("o".into(), AuditProfile::default());
    // nobody declares anything
    let frames = vec![frame("o", &["meat", "kale"])];
    assert_eq!(
        preference_violation_rate(&frames, &profiles, &catalog).rate,
        0.0
    );
    // 10 slots, 2 violating
    let frames = vec![
        frame("v", &["meat", "kale", "kale", "kale", "meat"]),
        frame("o", &["meat", "meat", "meat", "kale", "kale"]),
    ];
    let r = preference_violation_rate(&frames, &profiles, &catalog);
    assert_eq!(r.rate, 0.2);
    assert_eq!(r.per_constraint[&Constraint::Vegetarian].slots, 5);
    assert_eq!(r.per_constraint[&Constraint::Vegetarian].violations, 2);
    assert_eq!(r.samples.len(), 2);
    assert_eq!(r.samples[0].rank, 1);
}

#[test]
fn violation_samples_are_capped() {
    let catalog = catalog_from_items([item("meat", "meat", &[TAG_ANIMAL_DERIVED], 0.1)]);
    let profiles: Profiles = (0..30)
        .map(|i| {
            (
                format!("u{i:02}"),
                AuditProfile {
                    constraints: BTreeSet::from([Constraint::Vegetarian]),
                    ..Default::default()
                },
            )
        })
        .collect();
    let frames: Vec<ServedFrame> = (0..30)
        .map(|i| frame(&format!("u{i:02}"), &["meat"]))
        .collect();
    let r = preference_violation_rate(&frames, &profiles, &catalog);
    assert_eq!(r.rate, 1.0);
    assert_eq!(r.samples.len(), MAX_SAMPLES);
    assert_eq!(r.samples[0].user_id, "u00");
}

fn gendered(g: &str) -> AuditProfile {
    AuditProfile {
        attributes: BTreeMap::from([(ATTR_GENDER.to_string(), g.to_string())]),
        ..Default::default()
    }
}

#[test]
fn exposure_extremes() {
    let catalog = catalog_from_items([item("a", "x", &[], 0.1), item("b", "y", &[], 0.1)]);
    let profiles: Profiles = [("u1", "f"), ("u2", "m")]
        .iter()
        .map(|(u, g)| (u.to_string(), gendered(g)))
        .collect();
    let same = exposure_bias(
        &[frame("u1", &["a", "b"]), frame("u2", &["b", "a"])],
        &profiles,
        &catalog,
        ATTR_GENDER,
    )
    .unwrap();
    assert_eq!(same.parity_diff, 0.0);
    assert_eq!(same.js_divergence, 0.0);
    let disjoint = exposure_bias(
        &[frame("u1", &["a"]), frame("u2", &["b"])],
        &profiles,
        &catalog,
        ATTR_GENDER,
    )
    .unwrap();
    assert_eq!(disjoint.parity_diff, 1.0);
    assert!((disjoint.js_divergence - 1.0).abs() < 1e-12);
    let single = exposure_bias(&[frame("u1", &["a"])], &profiles, &catalog, ATTR_GENDER);
    assert!(matches!(single, Err(AuditError::SingleGroup { .. })));
}

#[test]
fn spearman_examples() {
    assert_eq!(spearman_rank_attribute(&[0.5, 0.4, 0.3, 0.1]), Some(1.0));
    assert_eq!(spearman_rank_attribute(&[0.1, 0.3, 0.4, 0.5]), Some(-1.0));
    assert_eq!(spearman_rank_attribute(&[0.2, 0.2, 0.2]), None);
    assert_eq!(
        average_ranks(&[3.0, 1.0, 3.0, 2.0]),
        vec![3.5, 1.0, 3.5, 2.0]
    );
    let catalog = catalog_from_items([item("a", "x", &[], 0.1), item("b", "x", &[], 0.1)]);
    let r = attribute_rank_correlation(&[frame("u", &["a", "b"])], &catalog, ItemAttribute::Margin)
        .unwrap();
    assert_eq!(r.rho, 0.0);
    assert_eq!(r.constant_frames, 1);
    assert!(matches!(
        attribute_rank_correlation(&[], &catalog, ItemAttribute::Margin),
        Err(AuditError::NoFrames)
    ));
}

/// Spearman via the textbook formula 1 − 6Σd²/(n(n²−1)), valid without ties.
fn spearman_no_ties(values: &[f64]) -> f64 {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    let mut d2 = 0.0;
    for (attr_rank_desc, &pos) in order.iter().enumerate() {
        let d = attr_rank_desc as f64 - pos as f64;
        d2 += d * d;
    }
    1.0 - 6.0 * d2 / (n * (n * n - 1)) as f64
}

#[test]
fn random_rankings_are_uncorrelated_with_margin() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let items: Vec<ItemProfile> = (0..200)
        .map(|i| item(&format!("i{i:03}"), "x", &[], 0.05 + i as f64 * 0.0025))
        .collect();
    let catalog = catalog_from_items(items);
    let ids: Vec<&String> = catalog.keys().collect();
    let mut frames = Vec::new();
    let mut oracle = 0.0;
    for f in 0..1000 {
        let mut pick: Vec<&String> = ids.choose_multiple(&mut rng, 10).copied().collect();
        pick.shuffle(&mut rng);
        let values: Vec<f64> = pick.iter().map(|i| catalog[*i].margin).collect();
        let expected = spearman_no_ties(&values);
        assert!((spearman_rank_attribute(&values).unwrap() - expected).abs() < 1e-12);
        oracle += expected;
        frames.push(ServedFrame {
            user_id: format!("u{f}"),
            frame_id: "f".into(),
            items: pick.into_iter().cloned().collect(),
        });
    }
    let r = attribute_rank_correlation(&frames, &catalog, ItemAttribute::Margin).unwrap();
    assert!((r.rho - oracle / 1000.0).abs() < 1e-12);
    assert!(r.rho.abs() < 0.1, "rho {}", r.rho);
}

#[test]
fn metrics_ignore_frame_order() {
    let shop = generate_synthetic_shop(&small_spec()).unwrap();
    let mut subject = EngineSubject::protective();
    subject.prepare(&shop).unwrap();
    let frames = serve_all(&shop, &subject).unwrap();
    let profiles = profiles_of(&shop);
    let attrs = shop.spec.protected_attributes.clone();
    let base = evaluate_checks(
        &frames,
        &profiles,
        &shop.catalog,
        &attrs,
        &AuditThresholds::default(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..3 {
        let mut shuffled = frames.clone();
        shuffled.shuffle(&mut rng);
        let again = evaluate_checks(
            &shuffled,
            &profiles,
            &shop.catalog,
            &attrs,
            &AuditThresholds::default(),
        )
        .unwrap();
        for (a, b) in base.iter().zip(&again) {
            assert_eq!(a.check_id, b.check_id);
            assert!((a.value - b.value).abs() < 1e-12, "{}", a.check_id);
        }
    }
}

#[test]
fn report_is_deterministic() {
    let spec = small_spec();
    let a = run_audit(
        &mut EngineSubject::protective(),
        &spec,
        &AuditThresholds::default(),
    )
    .unwrap();
    let b = run_audit(
        &mut EngineSubject::protective(),
        &spec,
        &AuditThresholds::default(),
    )
    .unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.verdict == Verdict::Fail, !a.failing_checks.is_empty());
}

#[test]
fn stereotype_switch_flips_only_gender_exposure() {
    let spec = SyntheticShopSpec {
        planted: PlantedBias {
            stereotype_correlation: true,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = run_audit(
        &mut EngineSubject::protective(),
        &spec,
        &AuditThresholds::default(),
    )
    .unwrap();
    assert!(!report.failing_checks.is_empty());
    assert!(
        report
            .failing_checks
            .iter()
            .all(|c| c.ends_with("[gender]") && c.starts_with("exposure_")),
        "{:?}",
        report.failing_checks
    );
}

#[test]
fn fn_subject_audits_a_black_box() {
    let shop = generate_synthetic_shop(&small_spec()).unwrap();
    let alcohol: Vec<String> = shop
        .catalog
        .values()
        .filter(|i| i.has_tag(TAG_CONTAINS_ALCOHOL))
        .map(|i| i.item_id.clone())
        .take(5)
        .collect();
    let mut subject = FnSubject {
        config_hash: "black-box".into(),
        serve: move |_: &ServeRequest<'_>| Ok(alcohol.clone()),
    };
    let report = run_audit(&mut subject, &small_spec(), &AuditThresholds::default()).unwrap();
    assert!(!report.passed());
    assert!(report
        .failing_checks
        .contains(&"preference_violations".to_string()));
    let c = &report.checks[0];
    assert!(c.samples.iter().all(|s| s.contains("minor")));
    assert_eq!(report.config_hash, "black-box");
}

fn dist() -> impl Strategy<Value = BTreeMap<String, f64>> {
    proptest::collection::vec(0.0f64..1.0, 4).prop_filter_map("non-zero", |v| {
        let s: f64 = v.iter().sum();
        (s > 0.0).then(|| {
            v.iter()
                .enumerate()
                .map(|(i, x)| (format!("c{i}"), x / s))
                .collect()
        })
    })
}

proptest! {
    #[test]
    fn js_is_bounded_and_symmetric(p in dist(), q in dist()) {
        let a = js_divergence(&p, &q);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - js_divergence(&q, &p)).abs() < 1e-12);
        prop_assert!(js_divergence(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn exposure_is_label_symmetric(cats in proptest::collection::vec(proptest::collection::vec(0usize..4, 1..6), 2..8)) {
        let catalog = catalog_from_items((0..4).map(|c| item(&format!("i{c}"), &format!("c{c}"), &[], 0.1)));
        let frames: Vec<ServedFrame> = cats
            .iter()
            .enumerate()
            .map(|(u, items)| ServedFrame {
                user_id: format!("u{u}"),
                frame_id: "f".into(),
                items: items.iter().map(|c| format!("i{c}")).collect(),
            })
            .collect();
        let labels = |a: &str, b: &str| -> Profiles {
            (0..cats.len()).map(|u| (format!("u{u}"), gendered(if u % 2 == 0 { a } else { b }))).collect()
        };
        let x = exposure_bias(&frames, &labels("f", "m"), &catalog, ATTR_GENDER).unwrap();
        let y = exposure_bias(&frames, &labels("m", "f"), &catalog, ATTR_GENDER).unwrap();
        prop_assert!((x.parity_diff - y.parity_diff).abs() < 1e-12);
        prop_assert!((x.js_divergence - y.js_divergence).abs() < 1e-12);
    }
}
