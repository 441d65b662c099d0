//! Recommendation frames and their disclosures, plus the reference-price and
//! scarcity-claim checks.
//!
//! Frame assembly runs select → blend → rules → truncate → disclose. Every
//! input the pipeline touches goes through [`Instrumented`], which records
//! the data category read. The disclosure lists the categories predicted
//! from the frame configuration and rule set; assembly refuses to serve a
//! frame when the two disagree.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{self, BufRead};

use serde::{Deserialize, Serialize};

use crate::cco::{CcoScore, CcoScorer, IndicatorModel};
use crate::events::{
    derive_historical_traits_from, Event, EventCategory, KindRegistry, WeightConfig,
    DEFAULT_HISTORY_WINDOW_DAYS, KIND_BOUGHT_IN_CATEGORY,
};
use crate::hybrid::{
    blend_scores, AnchorPolicy, BlendConfig, Breakdown, Catalog, HybridError, ItemProfile,
};
use crate::rules::{
    apply_rules_traced, declared_rule_reads, Action, Candidate, RuleRequest, RuleSet, RuleTrace,
    UserProfile,
};
use crate::time::Timestamp;

pub const DISCLOSURE_SCHEMA_VERSION: &str = "1.0";
pub const DEFAULT_PRICE_WINDOW_DAYS: i64 = 180;

/// Request context keys understood by frames.
pub const CONTEXT_ITEM: &str = "item";
pub const CONTEXT_CART: &str = "cart";
pub const CONTEXT_CATEGORY: &str = "category";

pub const PARAM_CCO: &str = "population co-occurrence (CCO)";
pub const PARAM_CONTENT: &str = "content similarity (categories and tags)";
pub const PARAM_POPULARITY: &str = "popularity";

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("unknown frame {0:?}")]
    UnknownFrame(String),
    #[error("no trained model is loaded")]
    ModelNotLoaded,
    #[error("frame {frame_id}: invalid configuration: {message}")]
    InvalidFrame { frame_id: String, message: String },
    #[error(
        "frame {frame_id}: disclosed data categories {declared:?} differ from those read {read:?}"
    )]
    DisclosureMismatch {
        frame_id: String,
        declared: BTreeSet<DataCategory>,
        read: BTreeSet<DataCategory>,
    },
    #[error(transparent)]
    Blend(#[from] HybridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FrameAlgorithm {
    PersonalHistory,
    PopulationCooccurrence,
    CartContext,
    CategoryContext,
    PopularityFallback,
}

impl FrameAlgorithm {
    pub fn describe(self) -> &'static str {
        match self {
            FrameAlgorithm::PersonalHistory => {
                "items correlated, across all shoppers, with your own past activity"
            }
            FrameAlgorithm::PopulationCooccurrence => {
                "items other shoppers bought together with the product you are viewing"
            }
            FrameAlgorithm::CartContext => {
                "items other shoppers bought together with the contents of your cart"
            }
            FrameAlgorithm::CategoryContext => "items from the category you are browsing",
            FrameAlgorithm::PopularityFallback => {
                "the most popular items in the shop, the same for every shopper"
            }
        }
    }

    fn reads_personal_history(self) -> bool {
        matches!(
            self,
            FrameAlgorithm::PersonalHistory | FrameAlgorithm::CategoryContext
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataCategory {
    PurchaseHistory,
    BrowsingHistory,
    ProfileTraits,
    PopulationCorrelations,
    PopularityStatistics,
    ProductAttributes,
    SessionContext,
}

impl DataCategory {
    pub fn label(self) -> &'static str {
        match self {
            DataCategory::PurchaseHistory => "your purchase history",
            DataCategory::BrowsingHistory => "your browsing activity",
            DataCategory::ProfileTraits => "your declared profile",
            DataCategory::PopulationCorrelations => "purchase correlations across all shoppers",
            DataCategory::PopularityStatistics => "shop-wide popularity",
            DataCategory::ProductAttributes => "product attributes",
            DataCategory::SessionContext => "your current page or cart",
        }
    }

    /// Category of personal data an event kind represents.
    pub fn for_kind(kind: &str, category: EventCategory, primary_kind: &str) -> DataCategory {
        match category {
            _ if kind == primary_kind => DataCategory::PurchaseHistory,
            EventCategory::Historical => DataCategory::PurchaseHistory,
            EventCategory::UserTrait => DataCategory::ProfileTraits,
            EventCategory::Action | EventCategory::Behavioral | EventCategory::ItemTrait => {
                DataCategory::BrowsingHistory
            }
        }
    }

    pub fn is_personal_history(self) -> bool {
        matches!(
            self,
            DataCategory::PurchaseHistory | DataCategory::BrowsingHistory
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameConfig {
    pub frame_id: String,
    pub title: String,
    pub algorithm: FrameAlgorithm,
    /// Event kinds of the user's own history this frame may read.
    #[serde(default)]
    pub signals: Vec<String>,
    #[serde(default)]
    pub blend: BlendConfig,
    pub max_items: usize,
    /// Extra scope tags matched by rule scopes, besides the frame id.
    #[serde(default)]
    pub rule_scope: Vec<String>,
}

impl FrameConfig {
    pub fn validate(&self, registry: &KindRegistry) -> Result<(), FrameError> {
        let invalid = |message: String| FrameError::InvalidFrame {
            frame_id: self.frame_id.clone(),
            message,
        };
        if self.max_items == 0 {
            return Err(invalid("max_items must be positive".into()));
        }
        for s in &self.signals {
            if !registry.contains(s) {
                return Err(invalid(format!(
                    "signal {s:?} is not a registered event kind"
                )));
            }
        }
        if !self.algorithm.reads_personal_history() && !self.signals.is_empty() {
            return Err(invalid(format!(
                "{:?} frames cannot read personal history signals",
                self.algorithm
            )));
        }
        self.blend.validate().map_err(|e| invalid(e.to_string()))?;
        if self.algorithm == FrameAlgorithm::PopularityFallback && self.blend.gamma <= 0.0 {
            return Err(invalid("popularity frames need gamma > 0".into()));
        }
        Ok(())
    }

    fn frame_tags(&self) -> Vec<&str> {
        std::iter::once(self.frame_id.as_str())
            .chain(self.rule_scope.iter().map(String::as_str))
            .collect()
    }
}

pub type FrameCatalog = BTreeMap<String, FrameConfig>;

pub fn lookup_frame<'a>(
    frames: &'a FrameCatalog,
    frame_id: &str,
) -> Result<&'a FrameConfig, FrameError> {
    frames
        .get(frame_id)
        .ok_or_else(|| FrameError::UnknownFrame(frame_id.to_string()))
}

/// The stock frame set.
pub fn default_frames() -> FrameCatalog {
    use crate::events::{KIND_ADD_TO_CART, KIND_DWELL, KIND_PURCHASE, KIND_USER_TRAIT, KIND_VIEW};
    let personal_signals: Vec<String> = [
        KIND_PURCHASE,
        KIND_ADD_TO_CART,
        KIND_VIEW,
        KIND_DWELL,
        KIND_BOUGHT_IN_CATEGORY,
        KIND_USER_TRAIT,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let frames = vec![
        FrameConfig {
            frame_id: "recommended_for_you".into(),
            title: "Recommended for you".into(),
            algorithm: FrameAlgorithm::PersonalHistory,
            signals: personal_signals,
            blend: BlendConfig::default(),
            max_items: 10,
            rule_scope: vec!["personalized".into()],
        },
        FrameConfig {
            frame_id: "others_also_bought".into(),
            title: "Other customers also bought".into(),
            algorithm: FrameAlgorithm::PopulationCooccurrence,
            signals: vec![],
            blend: BlendConfig {
                alpha: 1.0,
                beta: 0.0,
                gamma: 0.0,
                anchors: AnchorPolicy::ContextItems,
            },
            max_items: 10,
            rule_scope: vec![],
        },
        FrameConfig {
            frame_id: "cart_suggestions".into(),
            title: "Complete your basket".into(),
            algorithm: FrameAlgorithm::CartContext,
            signals: vec![],
            blend: BlendConfig {
                alpha: 1.0,
                beta: 0.25,
                gamma: 0.0,
                anchors: AnchorPolicy::ContextItems,
            },
            max_items: 6,
            rule_scope: vec![],
        },
        FrameConfig {
            frame_id: "category_picks".into(),
            title: "Picks in this category".into(),
            algorithm: FrameAlgorithm::CategoryContext,
            signals: vec![KIND_PURCHASE.into(), KIND_VIEW.into()],
            blend: BlendConfig {
                alpha: 1.0,
                beta: 0.0,
                gamma: 0.25,
                anchors: AnchorPolicy::None,
            },
            max_items: 10,
            rule_scope: vec!["personalized".into()],
        },
        FrameConfig {
            frame_id: "popular_now".into(),
            title: "Popular right now".into(),
            algorithm: FrameAlgorithm::PopularityFallback,
            signals: vec![],
            blend: BlendConfig::weights(0.0, 0.0, 1.0),
            max_items: 10,
            rule_scope: vec![],
        },
    ];
    frames
        .into_iter()
        .map(|f| (f.frame_id.clone(), f))
        .collect()
}

/// Immutable shared inputs for frame assembly.
pub struct EngineView<'a> {
    pub registry: &'a KindRegistry,
    pub weights: &'a WeightConfig,
    pub model: Option<&'a IndicatorModel>,
    pub scorer: Option<&'a CcoScorer>,
    pub catalog: &'a Catalog,
    pub rules: &'a RuleSet,
    pub prior: &'a BTreeMap<String, f64>,
    pub primary_kind: &'a str,
}

/// Per-request inputs.
pub struct FrameRequest<'a> {
    pub user_id: &'a str,
    /// The user's own events (empty for unknown or erased users).
    pub history: &'a [Event],
    pub profile: &'a UserProfile,
    pub personalization_allowed: bool,
    pub context: &'a BTreeMap<String, String>,
    pub now: Timestamp,
}

/// Read-recording wrapper over every input the assembly path can touch.
struct Instrumented<'a, 'r> {
    engine: &'r EngineView<'a>,
    req: &'r FrameRequest<'a>,
    read: RefCell<BTreeSet<DataCategory>>,
}

impl<'a, 'r> Instrumented<'a, 'r> {
    fn mark(&self, c: DataCategory) {
        self.read.borrow_mut().insert(c);
    }

    /// The user's events of the given kinds, plus derived historical traits
    /// when requested. Marks the category of every requested kind.
    fn history(&self, kinds: &[String]) -> Vec<Event> {
        for k in kinds {
            if let Ok(kind) = self.engine.registry.get(k) {
                self.mark(DataCategory::for_kind(
                    k,
                    kind.category,
                    self.engine.primary_kind,
                ));
            }
        }
        let mut out: Vec<Event> = self
            .req
            .history
            .iter()
            .filter(|e| kinds.contains(&e.kind))
            .cloned()
            .collect();
        if kinds.iter().any(|k| k == KIND_BOUGHT_IN_CATEGORY) {
            out.extend(derive_historical_traits_from(
                self.req.history,
                self.req.now,
                DEFAULT_HISTORY_WINDOW_DAYS,
            ));
        }
        out
    }

    fn context(&self, key: &str) -> Option<&'a String> {
        self.mark(DataCategory::SessionContext);
        self.req.context.get(key)
    }

    fn scorer(&self) -> Result<&'a CcoScorer, FrameError> {
        self.mark(DataCategory::PopulationCorrelations);
        self.engine.scorer.ok_or(FrameError::ModelNotLoaded)
    }

    fn prior(&self) -> &'a BTreeMap<String, f64> {
        self.mark(DataCategory::PopularityStatistics);
        self.engine.prior
    }

    fn catalog(&self) -> &'a Catalog {
        self.mark(DataCategory::ProductAttributes);
        self.engine.catalog
    }
}

fn split_items(raw: Option<&String>) -> Vec<String> {
    raw.map(|s| {
        s.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    })
    .unwrap_or_default()
}

fn primary_events(items: &[String], primary_kind: &str, user: &str, now: Timestamp) -> Vec<Event> {
    items
        .iter()
        .map(|i| Event::new(&format!("ctx:{i}"), user, Some(i), primary_kind, now))
        .collect()
}

/// Which algorithm actually runs, and why it differs from the configured one.
fn effective_algorithm(
    cfg: &FrameConfig,
    req: &FrameRequest<'_>,
) -> (FrameAlgorithm, Option<String>) {
    if cfg.algorithm == FrameAlgorithm::PersonalHistory && !req.personalization_allowed {
        return (
            FrameAlgorithm::PopularityFallback,
            Some("personalization is turned off for this user".into()),
        );
    }
    (cfg.algorithm, None)
}

fn effective_blend(cfg: &FrameConfig, algorithm: FrameAlgorithm) -> BlendConfig {
    if algorithm == FrameAlgorithm::PopularityFallback {
        BlendConfig {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
            anchors: AnchorPolicy::None,
        }
    } else {
        cfg.blend.clone()
    }
}

fn personal(cfg: &FrameConfig, req: &FrameRequest<'_>, algorithm: FrameAlgorithm) -> bool {
    algorithm.reads_personal_history() && req.personalization_allowed && !cfg.signals.is_empty()
}

/// The data categories a frame will read, predicted from configuration alone.
pub fn declared_data_categories(
    cfg: &FrameConfig,
    personalization_allowed: bool,
    registry: &KindRegistry,
    rules: &RuleSet,
    primary_kind: &str,
) -> BTreeSet<DataCategory> {
    let mut out = BTreeSet::from([DataCategory::ProductAttributes]);
    let algorithm = if cfg.algorithm == FrameAlgorithm::PersonalHistory && !personalization_allowed
    {
        FrameAlgorithm::PopularityFallback
    } else {
        cfg.algorithm
    };
    let blend = effective_blend(cfg, algorithm);
    let reads_personal =
        algorithm.reads_personal_history() && personalization_allowed && !cfg.signals.is_empty();
    if reads_personal && blend.alpha > 0.0 {
        for k in &cfg.signals {
            if let Ok(kind) = registry.get(k) {
                out.insert(DataCategory::for_kind(k, kind.category, primary_kind));
            }
        }
    }
    match algorithm {
        FrameAlgorithm::PopulationCooccurrence
        | FrameAlgorithm::CartContext
        | FrameAlgorithm::CategoryContext => {
            out.insert(DataCategory::SessionContext);
        }
        FrameAlgorithm::PersonalHistory | FrameAlgorithm::PopularityFallback => {}
    }
    let cco_possible = match algorithm {
        FrameAlgorithm::PersonalHistory | FrameAlgorithm::CategoryContext => reads_personal,
        FrameAlgorithm::PopulationCooccurrence | FrameAlgorithm::CartContext => true,
        FrameAlgorithm::PopularityFallback => false,
    };
    if blend.alpha > 0.0 && cco_possible {
        out.insert(DataCategory::PopulationCorrelations);
    }
    if blend.beta > 0.0 {
        match blend.anchors {
            AnchorPolicy::PrimaryHistory
                if personalization_allowed && algorithm != FrameAlgorithm::PopularityFallback =>
            {
                out.insert(DataCategory::PurchaseHistory);
            }
            AnchorPolicy::ContextItems => {
                out.insert(DataCategory::SessionContext);
            }
            _ => {}
        }
    }
    if blend.gamma > 0.0 {
        out.insert(DataCategory::PopularityStatistics);
    }
    let reads = declared_rule_reads(rules, &cfg.frame_tags());
    if reads.profile {
        out.insert(DataCategory::ProfileTraits);
    }
    if reads.context {
        out.insert(DataCategory::SessionContext);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameItem {
    pub rank: usize,
    pub item_id: String,
    pub score: f64,
    pub sponsored: bool,
    pub breakdown: Breakdown,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sponsored_by: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub weight: f64,
    /// Sum of this component's contribution over the returned items.
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalInfluence {
    pub event_kind: String,
    pub data_category: DataCategory,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostEffect {
    pub rule_id: String,
    pub disclosure_text: String,
    pub item_ids: Vec<String>,
    pub sponsor_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEffects {
    /// `"none"` when no rule changed the list.
    pub summary: String,
    pub exclusion_count: usize,
    pub boosts: Vec<BoostEffect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disclosure {
    pub schema_version: String,
    pub frame_id: String,
    pub title: String,
    pub algorithm: FrameAlgorithm,
    pub algorithm_description: String,
    pub parameters: Vec<Parameter>,
    pub top_signals: Vec<SignalInfluence>,
    pub data_categories: BTreeSet<DataCategory>,
    pub rule_effects: RuleEffects,
    pub personalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<String>,
    pub generated_at: Timestamp,
}

impl Disclosure {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("disclosure serializes")
    }

    /// Plain-text rendering of the same object.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Why you see \"{}\" ({})", self.title, self.frame_id);
        let _ = writeln!(s, "How it works: {}.", self.algorithm_description);
        if let Some(reason) = &self.fallback_reason {
            let _ = writeln!(
                s,
                "Note: {reason}, so shop-wide popularity is used instead."
            );
        }
        let _ = writeln!(s, "Main ranking parameters, most influential first:");
        let total: f64 = self.parameters.iter().map(|p| p.contribution.abs()).sum();
        for (i, p) in self.parameters.iter().enumerate() {
            let share = if total > 0.0 {
                format!(
                    ", {:.0}% of the ranking",
                    100.0 * p.contribution.abs() / total
                )
            } else {
                String::new()
            };
            let _ = writeln!(s, "  {}. {} (weight {:.2}{share})", i + 1, p.name, p.weight);
        }
        if !self.top_signals.is_empty() {
            let _ = writeln!(s, "Signals that mattered most:");
            for sig in &self.top_signals {
                let _ = writeln!(s, "  - {} ({})", sig.event_kind, sig.data_category.label());
            }
        }
        let labels: Vec<&str> = self.data_categories.iter().map(|c| c.label()).collect();
        let _ = writeln!(s, "Data used: {}.", labels.join(", "));
        let _ = writeln!(
            s,
            "Personalized: {}.",
            if self.personalized { "yes" } else { "no" }
        );
        if self.rule_effects.boosts.is_empty() && self.rule_effects.exclusion_count == 0 {
            let _ = writeln!(s, "Business rules: none applied.");
        } else {
            let _ = writeln!(s, "Business rules: {}.", self.rule_effects.summary);
            // rules sharing a text are listed once
            let mut grouped: Vec<(&str, usize, BTreeSet<&str>)> = Vec::new();
            for b in &self.rule_effects.boosts {
                let sellers = b.sponsor_ids.iter().map(String::as_str);
                match grouped.iter_mut().find(|g| g.0 == b.disclosure_text) {
                    Some(g) => {
                        g.1 += 1;
                        g.2.extend(sellers);
                    }
                    None => grouped.push((&b.disclosure_text, 1, sellers.collect())),
                }
            }
            for (text, n, sellers) in grouped {
                let rules = if n > 1 {
                    format!(" ({n} rules)")
                } else {
                    String::new()
                };
                let sponsors = if sellers.is_empty() {
                    String::new()
                } else {
                    format!(
                        " [sellers: {}]",
                        sellers.into_iter().collect::<Vec<_>>().join(", ")
                    )
                };
                let _ = writeln!(s, "  Sponsored placement: {text}{rules}{sponsors}");
            }
        }
        let _ = writeln!(s, "Generated at {}.", self.generated_at);
        s
    }
}

/// Everything `build_disclosure` needs from an assembly run.
pub struct DisclosureInputs<'a> {
    pub cfg: &'a FrameConfig,
    pub algorithm: FrameAlgorithm,
    pub blend: &'a BlendConfig,
    pub items: &'a [FrameItem],
    pub cco: &'a [CcoScore],
    pub trace: &'a RuleTrace,
    pub catalog: &'a Catalog,
    pub data_categories: BTreeSet<DataCategory>,
    pub personalized: bool,
    pub fallback_reason: Option<String>,
    pub registry: &'a KindRegistry,
    pub primary_kind: &'a str,
    pub now: Timestamp,
}

pub fn build_disclosure(input: DisclosureInputs<'_>) -> Disclosure {
    type Part = fn(&Breakdown) -> f64;
    let parts: [(&str, f64, Part); 3] = [
        (PARAM_CCO, input.blend.alpha, |b: &Breakdown| b.cco),
        (PARAM_CONTENT, input.blend.beta, |b: &Breakdown| b.content),
        (PARAM_POPULARITY, input.blend.gamma, |b: &Breakdown| {
            b.popularity
        }),
    ];
    let mut parameters: Vec<Parameter> = parts
        .into_iter()
        .filter(|(_, w, _)| *w > 0.0)
        .map(|(name, weight, part)| Parameter {
            name: name.to_string(),
            weight,
            contribution: input.items.iter().map(|i| part(&i.breakdown)).sum(),
        })
        .collect();
    // stable sort keeps alpha, beta, gamma order on ties
    parameters.sort_by(|a, b| {
        b.contribution
            .abs()
            .partial_cmp(&a.contribution.abs())
            .unwrap_or(Ordering::Equal)
    });

    let served: BTreeSet<&str> = input.items.iter().map(|i| i.item_id.as_str()).collect();
    let mut by_kind: BTreeMap<&str, f64> = BTreeMap::new();
    for s in input
        .cco
        .iter()
        .filter(|s| served.contains(s.item_id.as_str()))
    {
        for c in &s.contributions {
            *by_kind.entry(c.source_kind.as_str()).or_default() += c.value.abs();
        }
    }
    let mut top_signals: Vec<SignalInfluence> = by_kind
        .into_iter()
        .map(|(kind, contribution)| SignalInfluence {
            event_kind: kind.to_string(),
            data_category: input
                .registry
                .get(kind)
                .map(|k| DataCategory::for_kind(kind, k.category, input.primary_kind))
                .unwrap_or(DataCategory::BrowsingHistory),
            contribution,
        })
        .collect();
    top_signals.sort_by(|a, b| {
        b.contribution
            .partial_cmp(&a.contribution)
            .unwrap_or(Ordering::Equal)
    });

    let boosts: Vec<BoostEffect> = input
        .trace
        .boosts()
        .map(|a| {
            let item_ids: Vec<String> = a.effects.iter().map(|e| e.item_id.clone()).collect();
            let sponsor_ids: BTreeSet<String> = item_ids
                .iter()
                .filter_map(|i| input.catalog.get(i))
                .map(|p: &ItemProfile| p.seller_id.clone())
                .collect();
            BoostEffect {
                rule_id: a.rule_id.clone(),
                disclosure_text: a.disclosure_text.clone().unwrap_or_default(),
                item_ids,
                sponsor_ids: sponsor_ids.into_iter().collect(),
            }
        })
        .collect();
    let exclusion_count = input.trace.excluded_count();
    let summary = if exclusion_count == 0 && boosts.is_empty() {
        "none".to_string()
    } else {
        format!(
            "{exclusion_count} item(s) excluded, {} promotion rule(s) applied",
            boosts.len()
        )
    };

    Disclosure {
        schema_version: DISCLOSURE_SCHEMA_VERSION.to_string(),
        frame_id: input.cfg.frame_id.clone(),
        title: input.cfg.title.clone(),
        algorithm: input.algorithm,
        algorithm_description: input.algorithm.describe().to_string(),
        parameters,
        top_signals,
        data_categories: input.data_categories,
        rule_effects: RuleEffects {
            summary,
            exclusion_count,
            boosts,
        },
        personalized: input.personalized,
        fallback_reason: input.fallback_reason,
        generated_at: input.now,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_id: String,
    pub items: Vec<FrameItem>,
    pub disclosure: Disclosure,
    pub rule_trace: RuleTrace,
    /// Categories recorded by the instrumented inputs during assembly.
    pub data_read: BTreeSet<DataCategory>,
}

/// Assemble one frame: select algorithm, blend, apply rules, truncate, disclose.
pub fn assemble_frame(
    cfg: &FrameConfig,
    req: &FrameRequest<'_>,
    engine: &EngineView<'_>,
) -> Result<FrameResult, FrameError> {
    cfg.validate(engine.registry)?;
    let (algorithm, fallback_reason) = effective_algorithm(cfg, req);
    let blend = effective_blend(cfg, algorithm);
    let reads_personal = personal(cfg, req, algorithm);
    let inst = Instrumented {
        engine,
        req,
        read: RefCell::new(BTreeSet::new()),
    };
    let catalog = inst.catalog();

    // 1. algorithm-specific seed history and context
    let mut exclude_from_output: BTreeSet<String> = BTreeSet::new();
    let mut category_filter: Option<String> = None;
    let mut empty_context = false;
    let (history, context_items): (Vec<Event>, Vec<String>) = match algorithm {
        FrameAlgorithm::PersonalHistory => {
            let h = if reads_personal && blend.alpha > 0.0 {
                inst.history(&cfg.signals)
            } else {
                Vec::new()
            };
            (h, Vec::new())
        }
        FrameAlgorithm::PopulationCooccurrence | FrameAlgorithm::CartContext => {
            let key = if algorithm == FrameAlgorithm::CartContext {
                CONTEXT_CART
            } else {
                CONTEXT_ITEM
            };
            let items = split_items(inst.context(key));
            empty_context = items.is_empty();
            exclude_from_output.extend(items.iter().cloned());
            (
                primary_events(&items, engine.primary_kind, req.user_id, req.now),
                items,
            )
        }
        FrameAlgorithm::CategoryContext => {
            category_filter = inst.context(CONTEXT_CATEGORY).cloned();
            empty_context = category_filter.is_none();
            let h = if reads_personal && blend.alpha > 0.0 {
                inst.history(&cfg.signals)
            } else {
                Vec::new()
            };
            (h, Vec::new())
        }
        FrameAlgorithm::PopularityFallback => (Vec::new(), Vec::new()),
    };

    // 2. component scores
    let cco_possible = match algorithm {
        FrameAlgorithm::PersonalHistory | FrameAlgorithm::CategoryContext => reads_personal,
        FrameAlgorithm::PopulationCooccurrence | FrameAlgorithm::CartContext => true,
        FrameAlgorithm::PopularityFallback => false,
    };
    let cco: Vec<CcoScore> = if blend.alpha > 0.0 && cco_possible {
        inst.scorer()?
            .score(&history, engine.registry, engine.weights)
    } else {
        Vec::new()
    };
    let anchors: Vec<String> = if blend.beta > 0.0 {
        match blend.anchors {
            AnchorPolicy::PrimaryHistory
                if req.personalization_allowed
                    && algorithm != FrameAlgorithm::PopularityFallback =>
            {
                inst.history(&[engine.primary_kind.to_string()])
                    .into_iter()
                    .filter_map(|e| e.item_id)
                    .collect()
            }
            AnchorPolicy::ContextItems => {
                if context_items.is_empty() {
                    split_items(inst.context(CONTEXT_ITEM))
                        .into_iter()
                        .chain(split_items(inst.context(CONTEXT_CART)))
                        .collect()
                } else {
                    context_items.clone()
                }
            }
            _ => Vec::new(),
        }
    } else {
        Vec::new()
    };
    let empty_prior = BTreeMap::new();
    let prior = if blend.gamma > 0.0 {
        inst.prior()
    } else {
        &empty_prior
    };

    // 3. blend
    let anchor_refs: Vec<&str> = anchors.iter().map(String::as_str).collect();
    let blended = match blend_scores(&cco, &anchor_refs, catalog, prior, &blend) {
        Ok(b) => b,
        Err(HybridError::NoCandidates) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let breakdowns: BTreeMap<&str, Breakdown> = blended
        .iter()
        .map(|b| (b.item_id.as_str(), b.breakdown))
        .collect();
    let candidates: Vec<Candidate> = if empty_context {
        Vec::new()
    } else {
        blended
            .iter()
            .filter(|b| catalog.contains_key(&b.item_id))
            .filter(|b| !exclude_from_output.contains(&b.item_id))
            .filter(|b| {
                category_filter
                    .as_ref()
                    .is_none_or(|c| catalog[&b.item_id].in_category(c))
            })
            .map(|b| Candidate::new(&b.item_id, b.score))
            .collect()
    };

    // 4. rules
    let frame_tags = cfg.frame_tags();
    let rule_req = RuleRequest {
        user: req.profile,
        context: req.context,
        now: req.now,
        frame_tags: &frame_tags,
    };
    let (ruled, trace, reads) = apply_rules_traced(&candidates, &rule_req, catalog, engine.rules);
    if reads.profile {
        inst.mark(DataCategory::ProfileTraits);
    }
    if reads.context {
        inst.mark(DataCategory::SessionContext);
    }

    // 5. truncate
    let items: Vec<FrameItem> = ruled
        .into_iter()
        .take(cfg.max_items)
        .enumerate()
        .map(|(i, c)| FrameItem {
            rank: i + 1,
            sponsored: !c.boosted_by.is_empty(),
            breakdown: breakdowns
                .get(c.item_id.as_str())
                .copied()
                .unwrap_or_default(),
            sponsored_by: c.boosted_by.iter().cloned().collect(),
            item_id: c.item_id,
            score: c.score,
        })
        .collect();

    // 6. disclose
    let read = inst.read.into_inner();
    let declared = declared_data_categories(
        cfg,
        req.personalization_allowed,
        engine.registry,
        engine.rules,
        engine.primary_kind,
    );
    if declared != read {
        return Err(FrameError::DisclosureMismatch {
            frame_id: cfg.frame_id.clone(),
            declared,
            read,
        });
    }
    let personalized = read.iter().any(|c| c.is_personal_history());
    let disclosure = build_disclosure(DisclosureInputs {
        cfg,
        algorithm,
        blend: &blend,
        items: &items,
        cco: &cco,
        trace: &trace,
        catalog,
        data_categories: declared,
        personalized,
        fallback_reason,
        registry: engine.registry,
        primary_kind: engine.primary_kind,
        now: req.now,
    });
    Ok(FrameResult {
        frame_id: cfg.frame_id.clone(),
        items,
        disclosure,
        rule_trace: trace,
        data_read: read,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSummary {
    pub rule_id: String,
    pub action: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disclosure_text: Option<String>,
}

/// Static, user-independent statement of a frame's ranking criteria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaSheet {
    pub schema_version: String,
    pub frame_id: String,
    pub title: String,
    pub algorithm: FrameAlgorithm,
    pub algorithm_description: String,
    pub parameters: Vec<Parameter>,
    pub signals: Vec<String>,
    pub data_categories_personalized: BTreeSet<DataCategory>,
    pub data_categories_opted_out: BTreeSet<DataCategory>,
    pub rules: Vec<RuleSummary>,
}

pub fn criteria_sheet(
    cfg: &FrameConfig,
    registry: &KindRegistry,
    rules: &RuleSet,
    primary_kind: &str,
) -> CriteriaSheet {
    let parameters = [
        (PARAM_CCO, cfg.blend.alpha),
        (PARAM_CONTENT, cfg.blend.beta),
        (PARAM_POPULARITY, cfg.blend.gamma),
    ]
    .into_iter()
    .filter(|(_, w)| *w > 0.0)
    .map(|(name, weight)| Parameter {
        name: name.to_string(),
        weight,
        contribution: 0.0,
    })
    .collect::<Vec<_>>();
    let mut parameters = parameters;
    parameters.sort_by(|a, b| b.weight.partial_cmp(&a.weight).unwrap_or(Ordering::Equal));
    let tags = cfg.frame_tags();
    CriteriaSheet {
        schema_version: DISCLOSURE_SCHEMA_VERSION.to_string(),
        frame_id: cfg.frame_id.clone(),
        title: cfg.title.clone(),
        algorithm: cfg.algorithm,
        algorithm_description: cfg.algorithm.describe().to_string(),
        parameters,
        signals: cfg.signals.clone(),
        data_categories_personalized: declared_data_categories(
            cfg,
            true,
            registry,
            rules,
            primary_kind,
        ),
        data_categories_opted_out: declared_data_categories(
            cfg,
            false,
            registry,
            rules,
            primary_kind,
        ),
        rules: rules
            .in_scope(&tags)
            .map(|r| RuleSummary {
                rule_id: r.rule_id.clone(),
                action: match r.action {
                    Action::Exclude => "EXCLUDE".to_string(),
                    Action::Boost { multiplier } => format!("BOOST x{multiplier}"),
                },
                description: r.description.clone(),
                disclosure_text: r.disclosure_text.clone(),
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// reference price

#[derive(Debug, thiserror::Error)]
pub enum PriceError {
    #[error("no price data within the window")]
    NoPriceData,
    #[error("price history line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("price for {item_id} at {timestamp} must be finite and > 0")]
    InvalidPrice {
        item_id: String,
        timestamp: Timestamp,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricePoint {
    pub item_id: String,
    pub timestamp: Timestamp,
    pub price: f64,
}

/// Lowest price among points with `now − timestamp ≤ window_days` (points
/// after `now` are ignored).
pub fn lowest_price_reference(
    history: &[PricePoint],
    now: Timestamp,
    window_days: i64,
) -> Result<f64, PriceError> {
    history
        .iter()
        .filter(|p| p.timestamp.within_days_before(now, window_days))
        .map(|p| p.price)
        .min_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal))
        .ok_or(PriceError::NoPriceData)
}

/// Per-item, chronologically ordered price points.
#[derive(Debug, Clone, Default)]
pub struct PriceHistory {
    by_item: BTreeMap<String, Vec<PricePoint>>,
}

impl PriceHistory {
    pub fn insert(&mut self, p: PricePoint) -> Result<(), PriceError> {
        if !(p.price.is_finite() && p.price > 0.0) {
            return Err(PriceError::InvalidPrice {
                item_id: p.item_id,
                timestamp: p.timestamp,
            });
        }
        let points = self.by_item.entry(p.item_id.clone()).or_default();
        let at = points.partition_point(|q| q.timestamp <= p.timestamp);
        points.insert(at, p);
        Ok(())
    }

    pub fn points(&self, item_id: &str) -> &[PricePoint] {
        self.by_item.get(item_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Window minimum using the time ordering to skip out-of-window points.
    pub fn reference_price(
        &self,
        item_id: &str,
        now: Timestamp,
        window_days: i64,
    ) -> Result<f64, PriceError> {
        let pts = self.points(item_id);
        let lo = pts.partition_point(|p| p.timestamp < now.minus_days(window_days));
        let hi = pts.partition_point(|p| p.timestamp <= now);
        lowest_price_reference(&pts[lo..hi], now, window_days)
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<PriceHistory, PriceError> {
        let mut h = PriceHistory::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: PricePoint = serde_json::from_str(&line).map_err(|e| PriceError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            h.insert(p)?;
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// scarcity claims

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScarcityClaim {
    StockLeft(u64),
    ViewersNow(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ClaimVerdict {
    Valid,
    Invalid { reason: String },
}

/// Live-session counts, when the shop has them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LiveTelemetry {
    pub viewers_now: BTreeMap<String, u64>,
}

#[derive(Debug, thiserror::Error)]
#[error("unknown item {0:?}")]
pub struct UnknownItem(pub String);

pub fn validate_scarcity_claim(
    claim: ScarcityClaim,
    item_id: &str,
    catalog: &Catalog,
    telemetry: Option<&LiveTelemetry>,
) -> Result<ClaimVerdict, UnknownItem> {
    let item = catalog
        .get(item_id)
        .ok_or_else(|| UnknownItem(item_id.to_string()))?;
    let invalid = |reason: &str| ClaimVerdict::Invalid {
        reason: reason.to_string(),
    };
    Ok(match claim {
        ScarcityClaim::StockLeft(n) if n == item.stock => ClaimVerdict::Valid,
        ScarcityClaim::StockLeft(_) => invalid("false urgency"),
        ScarcityClaim::ViewersNow(n) => match telemetry.and_then(|t| t.viewers_now.get(item_id)) {
            None => invalid("unverifiable"),
            Some(&live) if live == n => ClaimVerdict::Valid,
            Some(_) => invalid("false urgency"),
        },
    })
}
