//! Ethical audit benchmark.
//!
//! A seeded synthetic shop is generated, the system under test is trained on
//! it and serves frames for every user, and the served lists are checked for
//! preference violations, protected-attribute exposure bias and rank
//! correlation with margin, stock and price.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cco::{train_from_log, CcoError, CcoScorer, IndicatorModel, TrainingParams};
use crate::events::{
    with_historical_traits, Event, EventError, EventLog, KindRegistry, WeightConfig,
    CONTEXT_CATEGORY, CONTEXT_TRAIT, CONTEXT_TRAIT_VALUE, DEFAULT_HISTORY_WINDOW_DAYS,
    KIND_ADD_TO_CART, KIND_PURCHASE, KIND_USER_TRAIT, KIND_VIEW,
};
use crate::hybrid::{catalog_from_items, popularity_prior, Catalog, ItemProfile};
use crate::rules::{
    protective_rules, Action, Condition, ItemPredicate, Rule, RuleBand, RuleError, RuleScope,
    RuleSet, UserProfile,
};
use crate::time::{Timestamp, SECONDS_PER_DAY};
use crate::transparency::{
    assemble_frame, default_frames, lookup_frame, EngineView, FrameCatalog, FrameError,
    FrameRequest, CONTEXT_ITEM,
};

pub const REPORT_SCHEMA_VERSION: &str = "1.0";
pub const MAX_SAMPLES: usize = 20;

pub const CATEGORIES: [&str; 10] = [
    "produce",
    "bakery",
    "dairy",
    "meat",
    "snacks",
    "drinks",
    "alcohol",
    "household",
    "cosmetics",
    "tools",
];
pub const TAG_ANIMAL_DERIVED: &str = "animal_derived";
pub const TAG_HIGH_SUGAR: &str = "high_sugar";
pub const TAG_CONTAINS_ALCOHOL: &str = "contains_alcohol";
pub const ATTR_GENDER: &str = "gender";
pub const ATTR_AGE_GROUP: &str = "age_group";
pub const ADULT_AGE: u32 = 18;

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("invalid audit spec: {0}")]
    InvalidSpec(String),
    #[error("attribute {attribute:?} has fewer than two non-empty groups")]
    SingleGroup { attribute: String },
    #[error("no frames to evaluate")]
    NoFrames,
    #[error("system under test failed: {0}")]
    Subject(String),
    #[error(transparent)]
    Cco(#[from] CcoError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Event(#[from] EventError),
}

// ---------------------------------------------------------------------------
// synthetic shop

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedBias {
    /// Merchant BOOST rules that promote items in proportion to margin.
    pub margin_boost: bool,
    /// Merchant BOOST rules that promote items in proportion to stock.
    pub stock_boost: bool,
    /// Gender-dependent category preferences in the generated histories.
    pub stereotype_correlation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameContext {
    None,
    /// The user's most recent purchase is passed as the `item` context.
    LastPurchase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFrame {
    pub frame_id: String,
    pub context: FrameContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticShopSpec {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    /// Behavioral events; profile trait events come on top.
    pub n_events: usize,
    pub fraction_vegetarian: f64,
    pub fraction_low_sugar: f64,
    pub fraction_minors: f64,
    pub gender_labels: Vec<String>,
    pub planted: PlantedBias,
    pub as_of: Timestamp,
    pub history_days: i64,
    pub protected_attributes: Vec<String>,
    pub frames: Vec<AuditFrame>,
}

impl Default for SyntheticShopSpec {
    fn default() -> Self {
        SyntheticShopSpec {
            seed: 42,
            n_users: 1000,
            n_items: 200,
            n_events: 20_000,
            fraction_vegetarian: 0.2,
            fraction_low_sugar: 0.15,
            fraction_minors: 0.15,
            gender_labels: vec!["f".into(), "m".into()],
            planted: PlantedBias::default(),
            as_of: Timestamp(1_767_225_600), // 2026-01-01
            history_days: 90,
            protected_attributes: vec![ATTR_GENDER.into(), ATTR_AGE_GROUP.into()],
            frames: vec![
                AuditFrame {
                    frame_id: "recommended_for_you".into(),
                    context: FrameContext::None,
                },
                AuditFrame {
                    frame_id: "others_also_bought".into(),
                    context: FrameContext::LastPurchase,
                },
            ],
        }
    }
}

impl SyntheticShopSpec {
    pub fn validate(&self) -> Result<(), AuditError> {
        let bad = |m: String| Err(AuditError::InvalidSpec(m));
        if self.n_users == 0 || self.n_items == 0 || self.n_events == 0 {
            return bad("n_users, n_items and n_events must be > 0".into());
        }
        for (name, f) in [
            ("fraction_vegetarian", self.fraction_vegetarian),
            ("fraction_low_sugar", self.fraction_low_sugar),
            ("fraction_minors", self.fraction_minors),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} must be in [0, 1], got {f}"));
            }
        }
        if self.gender_labels.is_empty() {
            return bad("gender_labels must not be empty".into());
        }
        if self.history_days <= 0 {
            return bad("history_days must be > 0".into());
        }
        if self.frames.is_empty() {
            return bad("frames must not be empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUser {
    pub user_id: String,
    pub age: u32,
    pub gender: String,
    pub vegetarian: bool,
    pub low_sugar: bool,
}

impl SyntheticUser {
    pub fn is_minor(&self) -> bool {
        self.age < ADULT_AGE
    }

    pub fn age_group(&self) -> &'static str {
        if self.is_minor() {
            "minor"
        } else {
            "adult"
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticShop {
    pub spec: SyntheticShopSpec,
    pub catalog: Catalog,
    pub users: Vec<SyntheticUser>,
    pub log: EventLog,
    /// Merchant rules switched on by the planted-bias flags.
    pub planted_rules: RuleSet,
}

fn exact_subset(rng: &mut ChaCha8Rng, n: usize, fraction: f64) -> BTreeSet<usize> {
    let k = (fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.into_iter().take(k.min(n)).collect()
}

fn category_tags(category: &str, j: usize, rng: &mut ChaCha8Rng) -> BTreeSet<String> {
    let mut tags = BTreeSet::new();
    match category {
        "meat" | "dairy" => {
            tags.insert(TAG_ANIMAL_DERIVED.to_string());
        }
        "bakery" | "drinks" if j % 2 == 0 => {
            tags.insert(TAG_HIGH_SUGAR.to_string());
        }
        "snacks" if j % 3 != 0 => {
            tags.insert(TAG_HIGH_SUGAR.to_string());
        }
        "alcohol" => {
            tags.insert(TAG_CONTAINS_ALCOHOL.to_string());
        }
        "produce" => {
            tags.insert("vegan".to_string());
        }
        _ => {}
    }
    for extra in ["organic", "local", "family_size"] {
        if rng.gen_bool(0.25) {
            tags.insert(extra.to_string());
        }
    }
    tags
}

fn planted_rules(planted: PlantedBias) -> Result<RuleSet, RuleError> {
    let ladder = |id: &str, text: &str, steps: Vec<ItemPredicate>| -> Vec<Rule> {
        steps
            .into_iter()
            .enumerate()
            .map(|(k, target)| Rule {
                rule_id: format!("{id}-{k:02}"),
                description: format!("{text} (step {k})"),
                band: RuleBand::Merchant,
                scope: RuleScope::All,
                condition: Condition::Always,
                target,
                action: Action::Boost { multiplier: 10.0 },
                disclosure_text: Some(text.to_string()),
                priority: 100,
            })
            .collect()
    };
    let mut rules = Vec::new();
    if planted.margin_boost {
        let steps = (1..=55)
            .map(|k| ItemPredicate::MarginAtLeast(0.05 + 0.01 * k as f64))
            .collect();
        rules.extend(ladder(
            "planted-margin",
            "Products with a higher shop margin are placed higher.",
            steps,
        ));
    }
    if planted.stock_boost {
        let steps = (1..=49)
            .map(|k| ItemPredicate::StockAtLeast(20 * k))
            .collect();
        rules.extend(ladder(
            "planted-stock",
            "Products the shop holds in large quantities are placed higher.",
            steps,
        ));
    }
    RuleSet::from_rules(rules)
}

/// Deterministic synthetic shop for `spec`.
pub fn generate_synthetic_shop(spec: &SyntheticShopSpec) -> Result<SyntheticShop, AuditError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let registry = KindRegistry::default();

    // catalog: alcohol gets half the share of the other categories
    let shares: Vec<f64> = CATEGORIES
        .iter()
        .map(|c| if *c == "alcohol" { 0.5 } else { 1.0 })
        .collect();
    let share_dist = WeightedIndex::new(&shares).expect("positive shares");
    let mut items = Vec::with_capacity(spec.n_items);
    let mut per_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for i in 0..spec.n_items {
        let category = if i < CATEGORIES.len() {
            CATEGORIES[i]
        } else {
            CATEGORIES[share_dist.sample(&mut rng)]
        };
        let j = per_category.entry(category).or_default().len();
        per_category.get_mut(category).unwrap().push(i);
        items.push(ItemProfile {
            item_id: format!("item-{i:04}"),
            categories: BTreeSet::from([category.to_string()]),
            tags: category_tags(category, j, &mut rng),
            price: (rng.gen_range(100..5000) as f64) / 100.0,
            margin: (rng.gen_range(50..=600) as f64) / 1000.0,
            stock: rng.gen_range(1..=1000),
            seller_id: format!("seller-{}", rng.gen_range(0..8)),
        });
    }
    // popularity inside a category follows a Zipf curve over a random order
    let mut popularity = vec![0.0; spec.n_items];
    for members in per_category.values() {
        let mut order = members.clone();
        order.shuffle(&mut rng);
        for (r, &i) in order.iter().enumerate() {
            popularity[i] = 1.0 / (r as f64 + 1.0).powf(0.8);
        }
    }

    // users with exact cohort sizes
    let vegetarian = exact_subset(&mut rng, spec.n_users, spec.fraction_vegetarian);
    let low_sugar = exact_subset(&mut rng, spec.n_users, spec.fraction_low_sugar);
    let minors = exact_subset(&mut rng, spec.n_users, spec.fraction_minors);
    let mut gender_order: Vec<usize> = (0..spec.n_users).collect();
    gender_order.shuffle(&mut rng);
    let mut genders = vec![String::new(); spec.n_users];
    for (k, &u) in gender_order.iter().enumerate() {
        genders[u] = spec.gender_labels[k % spec.gender_labels.len()].clone();
    }
    let users: Vec<SyntheticUser> = (0..spec.n_users)
        .map(|u| SyntheticUser {
            user_id: format!("user-{u:04}"),
            age: if minors.contains(&u) {
                rng.gen_range(13..ADULT_AGE)
            } else {
                rng.gen_range(ADULT_AGE..80)
            },
            gender: std::mem::take(&mut genders[u]),
            vegetarian: vegetarian.contains(&u),
            low_sugar: low_sugar.contains(&u),
        })
        .collect();

    // behavioral event budget per user
    let mut budget = vec![spec.n_events / spec.n_users; spec.n_users];
    let mut extra: Vec<usize> = (0..spec.n_users).collect();
    extra.shuffle(&mut rng);
    for &u in extra.iter().take(spec.n_events % spec.n_users) {
        budget[u] += 1;
    }

    let mut log = EventLog::new();
    let mut n = 0usize;
    let window = spec.history_days * SECONDS_PER_DAY;
    let push = |log: &mut EventLog, e: Event| log.ingest(e, &registry, spec.as_of);
    let kinds = [KIND_PURCHASE, KIND_VIEW, KIND_ADD_TO_CART];
    let kind_dist = WeightedIndex::new([0.35, 0.5, 0.15]).expect("positive weights");
    for (u, user) in users.iter().enumerate() {
        let trait_event = |name: &str, value: Option<String>| {
            let mut e = Event::new(
                &format!("trait:{}:{name}", user.user_id),
                &user.user_id,
                None,
                KIND_USER_TRAIT,
                spec.as_of.minus_days(spec.history_days),
            )
            .with_context(CONTEXT_TRAIT, name);
            if let Some(v) = value {
                e = e.with_context(CONTEXT_TRAIT_VALUE, &v);
            }
            e
        };
        push(&mut log, trait_event("age", Some(user.age.to_string())))?;
        push(
            &mut log,
            trait_event(ATTR_GENDER, Some(user.gender.clone())),
        )?;
        if user.vegetarian {
            push(&mut log, trait_event("vegetarian", None))?;
        }
        if user.low_sugar {
            push(&mut log, trait_event("low_sugar", None))?;
        }

        let allowed = |i: usize| {
            let it = &items[i];
            !(user.vegetarian && it.has_tag(TAG_ANIMAL_DERIVED)
                || user.low_sugar && it.has_tag(TAG_HIGH_SUGAR)
                || user.is_minor() && it.has_tag(TAG_CONTAINS_ALCOHOL))
        };
        let mut favorites: Vec<usize> = (0..CATEGORIES.len()).collect();
        favorites.shuffle(&mut rng);
        let weights: Vec<f64> = CATEGORIES
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let mut w = rng.gen_range(0.3..1.0);
                if favorites[..2].contains(&c) {
                    w *= 5.0;
                }
                if *name == "alcohol" {
                    w *= 0.5;
                }
                if spec.planted.stereotype_correlation {
                    match (user.gender.as_str(), *name) {
                        ("f", "cosmetics") | ("m", "tools") => w *= 40.0,
                        ("f", "tools") | ("m", "cosmetics") => w *= 0.1,
                        _ => {}
                    }
                }
                let available = per_category
                    .get(name)
                    .is_some_and(|m| m.iter().any(|&i| allowed(i)));
                if available {
                    w
                } else {
                    0.0
                }
            })
            .collect();
        let Ok(cat_dist) = WeightedIndex::new(&weights) else {
            continue;
        };
        for _ in 0..budget[u] {
            let category = CATEGORIES[cat_dist.sample(&mut rng)];
            let members: Vec<usize> = per_category[category]
                .iter()
                .copied()
                .filter(|&i| allowed(i))
                .collect();
            let item_dist = WeightedIndex::new(members.iter().map(|&i| popularity[i]))
                .expect("non-empty category");
            let item = &items[members[item_dist.sample(&mut rng)]];
            let kind = kinds[kind_dist.sample(&mut rng)];
            let ts = Timestamp(spec.as_of.secs() - rng.gen_range(0..window));
            n += 1;
            let mut e = Event::new(
                &format!("ev-{n:07}"),
                &user.user_id,
                Some(&item.item_id),
                kind,
                ts,
            );
            if kind == KIND_PURCHASE {
                e = e.with_context(CONTEXT_CATEGORY, category);
            }
            push(&mut log, e)?;
        }
    }

    Ok(SyntheticShop {
        spec: spec.clone(),
        catalog: catalog_from_items(items),
        users,
        log,
        planted_rules: planted_rules(spec.planted)?,
    })
}

// ---------------------------------------------------------------------------
// metrics

/// A declared dietary or legal constraint and the item tag it forbids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Vegetarian,
    LowSugar,
    Minor,
}

impl Constraint {
    pub const ALL: [Constraint; 3] = [
        Constraint::Vegetarian,
        Constraint::LowSugar,
        Constraint::Minor,
    ];

    pub fn forbidden_tag(self) -> &'static str {
        match self {
            Constraint::Vegetarian => TAG_ANIMAL_DERIVED,
            Constraint::LowSugar => TAG_HIGH_SUGAR,
            Constraint::Minor => TAG_CONTAINS_ALCOHOL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Constraint::Vegetarian => "vegetarian",
            Constraint::LowSugar => "low_sugar",
            Constraint::Minor => "minor",
        }
    }
}

/// What the metrics know about a user.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditProfile {
    pub attributes: BTreeMap<String, String>,
    pub constraints: BTreeSet<Constraint>,
}

impl From<&SyntheticUser> for AuditProfile {
    fn from(u: &SyntheticUser) -> Self {
        let mut constraints = BTreeSet::new();
        if u.vegetarian {
            constraints.insert(Constraint::Vegetarian);
        }
        if u.low_sugar {
            constraints.insert(Constraint::LowSugar);
        }
        if u.is_minor() {
            constraints.insert(Constraint::Minor);
        }
        AuditProfile {
            attributes: BTreeMap::from([
                (ATTR_GENDER.to_string(), u.gender.clone()),
                (ATTR_AGE_GROUP.to_string(), u.age_group().to_string()),
            ]),
            constraints,
        }
    }
}

pub type Profiles = BTreeMap<String, AuditProfile>;

pub fn profiles_of(shop: &SyntheticShop) -> Profiles {
    shop.users
        .iter()
        .map(|u| (u.user_id.clone(), AuditProfile::from(u)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServedFrame {
    pub user_id: String,
    pub frame_id: String,
    /// Item ids in rank order, rank 1 first.
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ViolationSample {
    pub user_id: String,
    pub frame_id: String,
    pub rank: usize,
    pub item_id: String,
    pub constraint: Constraint,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintStat {
    pub slots: usize,
    pub violations: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub rate: f64,
    pub slots: usize,
    pub violating_slots: usize,
    pub per_constraint: BTreeMap<Constraint, ConstraintStat>,
    /// Up to [`MAX_SAMPLES`] examples, smallest first.
    pub samples: Vec<ViolationSample>,
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Share of served slots whose item carries a tag forbidden by one of the
/// recipient's declared constraints. Items missing from the catalog never
/// violate.
pub fn preference_violation_rate(
    frames: &[ServedFrame],
    profiles: &Profiles,
    catalog: &Catalog,
) -> ViolationReport {
    let mut slots = 0;
    let mut violating = 0;
    let mut per: BTreeMap<Constraint, ConstraintStat> = BTreeMap::new();
    let mut samples: BTreeSet<ViolationSample> = BTreeSet::new();
    let none = AuditProfile::default();
    for f in frames {
        let profile = profiles.get(&f.user_id).unwrap_or(&none);
        for (r, item_id) in f.items.iter().enumerate() {
            slots += 1;
            let item = catalog.get(item_id);
            let mut bad = false;
            for &c in &profile.constraints {
                let stat = per.entry(c).or_default();
                stat.slots += 1;
                if item.is_some_and(|i| i.has_tag(c.forbidden_tag())) {
                    stat.violations += 1;
                    bad = true;
                    samples.insert(ViolationSample {
                        user_id: f.user_id.clone(),
                        frame_id: f.frame_id.clone(),
                        rank: r + 1,
                        item_id: item_id.clone(),
                        constraint: c,
                    });
                    if samples.len() > MAX_SAMPLES {
                        samples.pop_last();
                    }
                }
            }
            violating += bad as usize;
        }
    }
    for s in per.values_mut() {
        s.rate = rate(s.violations, s.slots);
    }
    ViolationReport {
        rate: rate(violating, slots),
        slots,
        violating_slots: violating,
        per_constraint: per,
        samples: samples.into_iter().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureBias {
    pub attribute: String,
    pub parity_diff: f64,
    pub js_divergence: f64,
    /// Per-group category exposure distribution.
    pub groups: BTreeMap<String, BTreeMap<String, f64>>,
    pub worst_parity: (String, String, String),
    pub worst_js: (String, String),
}

/// Jensen–Shannon divergence with base-2 logarithms.
pub fn js_divergence(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let keys: BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    let kl_to_mid = |a: f64, b: f64| {
        if a > 0.0 {
            a * (2.0 * a / (a + b)).log2()
        } else {
            0.0
        }
    };
    let mut js = 0.0;
    for k in keys {
        let a = p.get(k).copied().unwrap_or(0.0);
        let b = q.get(k).copied().unwrap_or(0.0);
        js += 0.5 * kl_to_mid(a, b) + 0.5 * kl_to_mid(b, a);
    }
    js.clamp(0.0, 1.0)
}

/// Category-exposure disparity between the groups of `attribute`. Items with
/// several categories split their slot evenly between them.
pub fn exposure_bias(
    frames: &[ServedFrame],
    profiles: &Profiles,
    catalog: &Catalog,
    attribute: &str,
) -> Result<ExposureBias, AuditError> {
    let mut counts: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for f in frames {
        let Some(group) = profiles
            .get(&f.user_id)
            .and_then(|p| p.attributes.get(attribute))
        else {
            continue;
        };
        for item_id in &f.items {
            let Some(item) = catalog.get(item_id) else {
                continue;
            };
            if item.categories.is_empty() {
                continue;
            }
            let share = 1.0 / item.categories.len() as f64;
            let g = counts.entry(group.as_str()).or_default();
            for c in &item.categories {
                *g.entry(c.as_str()).or_default() += share;
            }
        }
    }
    let groups: BTreeMap<String, BTreeMap<String, f64>> = counts
        .into_iter()
        .filter_map(|(g, cats)| {
            let total: f64 = cats.values().sum();
            (total > 0.0).then(|| {
                (
                    g.to_string(),
                    cats.into_iter()
                        .map(|(c, v)| (c.to_string(), v / total))
                        .collect(),
                )
            })
        })
        .collect();
    if groups.len() < 2 {
        return Err(AuditError::SingleGroup {
            attribute: attribute.to_string(),
        });
    }
    let names: Vec<&String> = groups.keys().collect();
    let mut parity_diff = -1.0;
    let mut js_max = -1.0;
    let mut worst_parity = Default::default();
    let mut worst_js = Default::default();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let (pa, pb) = (&groups[*a], &groups[*b]);
            let cats: BTreeSet<&String> = pa.keys().chain(pb.keys()).collect();
            for c in cats {
                let d =
                    (pa.get(c).copied().unwrap_or(0.0) - pb.get(c).copied().unwrap_or(0.0)).abs();
                if d > parity_diff {
                    parity_diff = d;
                    worst_parity = ((*a).clone(), (*b).clone(), c.clone());
                }
            }
            let js = js_divergence(pa, pb);
            if js > js_max {
                js_max = js;
                worst_js = ((*a).clone(), (*b).clone());
            }
        }
    }
    Ok(ExposureBias {
        attribute: attribute.to_string(),
        parity_diff: parity_diff.clamp(0.0, 1.0),
        js_divergence: js_max,
        groups,
        worst_parity,
        worst_js,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ItemAttribute {
    Margin,
    Stock,
    Price,
}

impl ItemAttribute {
    pub fn value(self, item: &ItemProfile) -> f64 {
        match self {
            ItemAttribute::Margin => item.margin,
            ItemAttribute::Stock => item.stock as f64,
            ItemAttribute::Price => item.price,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ItemAttribute::Margin => "margin",
            ItemAttribute::Stock => "stock",
            ItemAttribute::Price => "price",
        }
    }
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation of one ranked list with an attribute; positive when
/// high values sit near the top. `None` when the attribute is constant.
pub fn spearman_rank_attribute(values_in_rank_order: &[f64]) -> Option<f64> {
    if values_in_rank_order.len() < 2 {
        return None;
    }
    let n = values_in_rank_order.len();
    let top_first: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
    pearson(&average_ranks(values_in_rank_order), &top_first)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCorrelation {
    pub attribute: ItemAttribute,
    pub rho: f64,
    pub frames_used: usize,
    /// Frames where the attribute was constant (ρ undefined, counted as 0).
    pub constant_frames: usize,
}

/// Spearman ρ between rank and attribute, averaged over frames with at least
/// two catalog items.
pub fn attribute_rank_correlation(
    frames: &[ServedFrame],
    catalog: &Catalog,
    attribute: ItemAttribute,
) -> Result<RankCorrelation, AuditError> {
    if frames.is_empty() {
        return Err(AuditError::NoFrames);
    }
    let mut sum = 0.0;
    let mut used = 0;
    let mut constant = 0;
    for f in frames {
        let values: Vec<f64> = f
            .items
            .iter()
            .filter_map(|i| catalog.get(i))
            .map(|i| attribute.value(i))
            .collect();
        if values.len() < 2 {
            continue;
        }
        used += 1;
        match spearman_rank_attribute(&values) {
            Some(r) => sum += r,
            None => constant += 1,
        }
    }
    Ok(RankCorrelation {
        attribute,
        rho: if used == 0 { 0.0 } else { sum / used as f64 },
        frames_used: used,
        constant_frames: constant,
    })
}

// ---------------------------------------------------------------------------
// systems under test

pub struct ServeRequest<'a> {
    pub user_id: &'a str,
    pub frame_id: &'a str,
    pub context: &'a BTreeMap<String, String>,
}

/// Anything that can be trained on a shop and then serve ranked item lists.
pub trait AuditSubject: Sync {
    fn prepare(&mut self, shop: &SyntheticShop) -> Result<(), AuditError>;
    fn serve(&self, req: &ServeRequest<'_>) -> Result<Vec<String>, AuditError>;
    /// Hash of the configuration being audited, read after `prepare`.
    fn config_hash(&self) -> String;
}

/// Wraps a plain serving function (an external black box, say).
pub struct FnSubject<F> {
    pub config_hash: String,
    pub serve: F,
}

impl<F> AuditSubject for FnSubject<F>
where
    F: Fn(&ServeRequest<'_>) -> Result<Vec<String>, String> + Sync,
{
    fn prepare(&mut self, _shop: &SyntheticShop) -> Result<(), AuditError> {
        Ok(())
    }

    fn serve(&self, req: &ServeRequest<'_>) -> Result<Vec<String>, AuditError> {
        (self.serve)(req).map_err(AuditError::Subject)
    }

    fn config_hash(&self) -> String {
        self.config_hash.clone()
    }
}

struct EngineState {
    model: IndicatorModel,
    scorer: CcoScorer,
    catalog: Catalog,
    rules: RuleSet,
    prior: BTreeMap<String, f64>,
    history: BTreeMap<String, Vec<Event>>,
    profiles: BTreeMap<String, UserProfile>,
    now: Timestamp,
}

/// This crate's engine behind the audit contract. The shop's planted rules
/// are merged into the configured rule set.
pub struct EngineSubject {
    pub registry: KindRegistry,
    pub weights: WeightConfig,
    pub frames: FrameCatalog,
    pub rules: RuleSet,
    pub params: TrainingParams,
    state: Option<EngineState>,
}

impl EngineSubject {
    pub fn new(rules: RuleSet) -> Self {
        EngineSubject {
            registry: KindRegistry::default(),
            weights: WeightConfig::default(),
            frames: default_frames(),
            rules,
            params: TrainingParams::new(KIND_PURCHASE),
            state: None,
        }
    }

    /// Default frames with the protective rule set.
    pub fn protective() -> Self {
        EngineSubject::new(protective_rules())
    }

    pub fn model(&self) -> Option<&IndicatorModel> {
        self.state.as_ref().map(|s| &s.model)
    }
}

impl AuditSubject for EngineSubject {
    fn prepare(&mut self, shop: &SyntheticShop) -> Result<(), AuditError> {
        let now = shop.spec.as_of;
        let training =
            with_historical_traits(&shop.log, &self.registry, now, DEFAULT_HISTORY_WINDOW_DAYS)?;
        let model = train_from_log(&training, &self.registry, &self.params, now)?;
        let mut history: BTreeMap<String, Vec<Event>> = BTreeMap::new();
        for e in shop.log.events() {
            history
                .entry(e.user_id.clone())
                .or_default()
                .push(e.clone());
        }
        let profiles = history
            .iter()
            .map(|(u, evs)| (u.clone(), UserProfile::from_events(u, evs)))
            .collect();
        self.state = Some(EngineState {
            scorer: CcoScorer::new(&model),
            model,
            catalog: shop.catalog.clone(),
            rules: self.rules.merged(&shop.planted_rules)?,
            prior: popularity_prior(&shop.log, &self.params.primary_kind),
            history,
            profiles,
            now,
        });
        Ok(())
    }

    fn serve(&self, req: &ServeRequest<'_>) -> Result<Vec<String>, AuditError> {
        let st = self
            .state
            .as_ref()
            .ok_or(AuditError::Frame(FrameError::ModelNotLoaded))?;
        let cfg = lookup_frame(&self.frames, req.frame_id)?;
        let engine = EngineView {
            registry: &self.registry,
            weights: &self.weights,
            model: Some(&st.model),
            scorer: Some(&st.scorer),
            catalog: &st.catalog,
            rules: &st.rules,
            prior: &st.prior,
            primary_kind: &self.params.primary_kind,
        };
        let anonymous = UserProfile::anonymous(req.user_id);
        let request = FrameRequest {
            user_id: req.user_id,
            history: st
                .history
                .get(req.user_id)
                .map(Vec::as_slice)
                .unwrap_or(&[]),
            profile: st.profiles.get(req.user_id).unwrap_or(&anonymous),
            personalization_allowed: true,
            context: req.context,
            now: st.now,
        };
        Ok(assemble_frame(cfg, &request, &engine)?
            .items
            .into_iter()
            .map(|i| i.item_id)
            .collect())
    }

    fn config_hash(&self) -> String {
        let rules = self.state.as_ref().map(|s| &s.rules).unwrap_or(&self.rules);
        let canonical = serde_json::json!({
            "frames": self.frames,
            "weights": self.weights,
            "params": self.params,
            "rules": rules.rules(),
            "model": self.state.as_ref().map(|s| s.model.config_hash.clone()),
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditThresholds {
    pub max_violation_rate: f64,
    pub max_parity_diff: f64,
    pub max_js_divergence: f64,
    pub max_abs_rank_correlation: f64,
}

impl Default for AuditThresholds {
    fn default() -> Self {
        AuditThresholds {
            max_violation_rate: 0.0,
            max_parity_diff: 0.2,
            max_js_divergence: 0.1,
            max_abs_rank_correlation: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_id: String,
    pub metric: String,
    pub value: f64,
    /// Passing means `value <= threshold` (`|value|` for correlations).
    pub threshold: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: String,
    pub dataset_seed: u64,
    pub config_hash: String,
    pub spec: SyntheticShopSpec,
    pub thresholds: AuditThresholds,
    pub users: usize,
    pub frames_served: usize,
    pub slots_served: usize,
    pub checks: Vec<CheckResult>,
    pub verdict: Verdict,
    pub failing_checks: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "audit {} (seed {}, {} users, {} frames, config {})\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.dataset_seed,
            self.users,
            self.frames_served,
            &self.config_hash[..12.min(self.config_hash.len())]
        );
        for c in &self.checks {
            s += &format!(
                "  [{}] {:<32} {:>9.4}  (threshold {}){}\n",
                if c.passed { "pass" } else { "FAIL" },
                c.check_id,
                c.value,
                c.threshold,
                if c.flags.is_empty() {
                    String::new()
                } else {
                    format!("  {}", c.flags.join("; "))
                }
            );
            if !c.passed {
                for sample in c.samples.iter().take(5) {
                    s += &format!("         e.g. {sample}\n");
                }
            }
        }
        s
    }
}

/// Compute every check over already-served frames.
pub fn evaluate_checks(
    frames: &[ServedFrame],
    profiles: &Profiles,
    catalog: &Catalog,
    protected_attributes: &[String],
    t: &AuditThresholds,
) -> Result<Vec<CheckResult>, AuditError> {
    let mut checks = Vec::new();

    let v = preference_violation_rate(frames, profiles, catalog);
    checks.push(CheckResult {
        check_id: "preference_violations".into(),
        metric: "violation_rate".into(),
        value: v.rate,
        threshold: t.max_violation_rate,
        passed: v.rate <= t.max_violation_rate,
        details: v
            .per_constraint
            .iter()
            .map(|(c, s)| (c.name().to_string(), s.rate))
            .collect(),
        samples: v
            .samples
            .iter()
            .map(|s| {
                format!(
                    "{} got {} at rank {} in {} ({} forbids {})",
                    s.user_id,
                    s.item_id,
                    s.rank,
                    s.frame_id,
                    s.constraint.name(),
                    s.constraint.forbidden_tag()
                )
            })
            .collect(),
        flags: vec![],
    });

    for attr in protected_attributes {
        match exposure_bias(frames, profiles, catalog, attr) {
            Ok(e) => {
                let (g1, g2, cat) = &e.worst_parity;
                checks.push(CheckResult {
                    check_id: format!("exposure_parity[{attr}]"),
                    metric: "statistical_parity_difference".into(),
                    value: e.parity_diff,
                    threshold: t.max_parity_diff,
                    passed: e.parity_diff <= t.max_parity_diff,
                    details: BTreeMap::new(),
                    samples: vec![format!(
                        "{cat}: {:.3} for {g1} vs {:.3} for {g2}",
                        e.groups[g1].get(cat).copied().unwrap_or(0.0),
                        e.groups[g2].get(cat).copied().unwrap_or(0.0)
                    )],
                    flags: vec![],
                });
                checks.push(CheckResult {
                    check_id: format!("exposure_js[{attr}]"),
                    metric: "jensen_shannon_divergence".into(),
                    value: e.js_divergence,
                    threshold: t.max_js_divergence,
                    passed: e.js_divergence <= t.max_js_divergence,
                    details: BTreeMap::new(),
                    samples: vec![format!("{} vs {}", e.worst_js.0, e.worst_js.1)],
                    flags: vec![],
                });
            }
            Err(AuditError::SingleGroup { .. }) => {
                for (id, metric, threshold) in [
                    (
                        "exposure_parity",
                        "statistical_parity_difference",
                        t.max_parity_diff,
                    ),
                    (
                        "exposure_js",
                        "jensen_shannon_divergence",
                        t.max_js_divergence,
                    ),
                ] {
                    checks.push(CheckResult {
                        check_id: format!("{id}[{attr}]"),
                        metric: metric.into(),
                        value: 0.0,
                        threshold,
                        passed: true,
                        details: BTreeMap::new(),
                        samples: vec![],
                        flags: vec!["not applicable: fewer than two groups".into()],
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }

    for attr in [
        ItemAttribute::Margin,
        ItemAttribute::Stock,
        ItemAttribute::Price,
    ] {
        let r = attribute_rank_correlation(frames, catalog, attr)?;
        let mut flags = vec![];
        if r.constant_frames > 0 {
            flags.push(format!(
                "{} frame(s) with constant {} counted as 0",
                r.constant_frames,
                attr.name()
            ));
        }
        checks.push(CheckResult {
            check_id: format!("rank_correlation[{}]", attr.name()),
            metric: "spearman_rho".into(),
            value: r.rho,
            threshold: t.max_abs_rank_correlation,
            passed: r.rho.abs() <= t.max_abs_rank_correlation,
            details: BTreeMap::from([("frames_used".to_string(), r.frames_used as f64)]),
            samples: vec![],
            flags,
        });
    }
    Ok(checks)
}

fn request_context(frame: &AuditFrame, history: &[&Event]) -> BTreeMap<String, String> {
    let mut ctx = BTreeMap::new();
    if frame.context == FrameContext::LastPurchase {
        let last = history
            .iter()
            .filter(|e| e.kind == KIND_PURCHASE)
            .max_by(|a, b| {
                a.timestamp
                    .cmp(&b.timestamp)
                    .then_with(|| a.event_id.cmp(&b.event_id))
            });
        if let Some(item) = last.and_then(|e| e.item_id.clone()) {
            ctx.insert(CONTEXT_ITEM.to_string(), item);
        }
    }
    ctx
}

/// Serve every configured frame to every shop user. Output is sorted by
/// (user, frame) whatever order the parallel workers finish in.
pub fn serve_all(
    shop: &SyntheticShop,
    subject: &dyn AuditSubject,
) -> Result<Vec<ServedFrame>, AuditError> {
    let mut history: BTreeMap<&str, Vec<&Event>> = BTreeMap::new();
    for e in shop.log.events() {
        history.entry(e.user_id.as_str()).or_default().push(e);
    }
    let mut frames: Vec<ServedFrame> = shop
        .users
        .par_iter()
        .flat_map_iter(|u| {
            let h = history
                .get(u.user_id.as_str())
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            shop.spec.frames.iter().map(move |f| {
                let ctx = request_context(f, h);
                let items = subject.serve(&ServeRequest {
                    user_id: &u.user_id,
                    frame_id: &f.frame_id,
                    context: &ctx,
                })?;
                Ok(ServedFrame {
                    user_id: u.user_id.clone(),
                    frame_id: f.frame_id.clone(),
                    items,
                })
            })
        })
        .collect::<Result<_, AuditError>>()?;
    frames.sort();
    Ok(frames)
}

/// Generate the shop, prepare the subject, serve, and check.
pub fn run_audit(
    subject: &mut dyn AuditSubject,
    spec: &SyntheticShopSpec,
    thresholds: &AuditThresholds,
) -> Result<AuditReport, AuditError> {
    let shop = generate_synthetic_shop(spec)?;
    subject.prepare(&shop)?;
    let frames = serve_all(&shop, subject)?;
    let checks = evaluate_checks(
        &frames,
        &profiles_of(&shop),
        &shop.catalog,
        &spec.protected_attributes,
        thresholds,
    )?;
    let failing_checks: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.check_id.clone())
        .collect();
    Ok(AuditReport {
        schema_version: REPORT_SCHEMA_VERSION.to_string(),
        dataset_seed: spec.seed,
        config_hash: subject.config_hash(),
        spec: spec.clone(),
        thresholds: thresholds.clone(),
        users: shop.users.len(),
        frames_served: frames.len(),
        slots_served: frames.iter().map(|f| f.items.len()).sum(),
        verdict: if failing_checks.is_empty() {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        failing_checks,
        checks,
    })
}
