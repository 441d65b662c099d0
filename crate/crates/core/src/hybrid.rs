//! Blends co-occurrence scores with content similarity and a popularity prior.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cco::CcoScore;
use crate::events::EventLog;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_GAMMA: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum HybridError {
    #[error("no candidates: empty co-occurrence list and no catalog contribution")]
    NoCandidates,
    #[error("invalid blend configuration: {0}")]
    InvalidBlend(String),
    #[error("catalog line {line}: {message}")]
    CatalogParse { line: usize, message: String },
    #[error("catalog item {0:?} listed twice")]
    DuplicateItem(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemProfile {
    pub item_id: String,
    #[serde(default)]
    pub categories: BTreeSet<String>,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    pub price: f64,
    pub margin: f64,
    pub stock: u64,
    pub seller_id: String,
}

impl ItemProfile {
    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }

    pub fn in_category(&self, category: &str) -> bool {
        self.categories.contains(category)
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.price.is_finite() && self.price >= 0.0) {
            return Err(format!(
                "item {:?}: price must be finite and >= 0",
                self.item_id
            ));
        }
        if !(self.margin.is_finite() && (0.0..=1.0).contains(&self.margin)) {
            return Err(format!(
                "item {:?}: margin must lie in [0, 1]",
                self.item_id
            ));
        }
        Ok(())
    }
}

pub type Catalog = BTreeMap<String, ItemProfile>;

pub fn catalog_from_items(items: impl IntoIterator<Item = ItemProfile>) -> Catalog {
    items.into_iter().map(|p| (p.item_id.clone(), p)).collect()
}

/// Read a JSON Lines catalog. Blank lines are skipped.
pub fn read_catalog<R: BufRead>(reader: R) -> Result<Catalog, HybridError> {
    let mut catalog = Catalog::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: ItemProfile =
            serde_json::from_str(&line).map_err(|e| HybridError::CatalogParse {
                line: i + 1,
                message: e.to_string(),
            })?;
        item.validate()
            .map_err(|message| HybridError::CatalogParse {
                line: i + 1,
                message,
            })?;
        if catalog.contains_key(&item.item_id) {
            return Err(HybridError::DuplicateItem(item.item_id));
        }
        catalog.insert(item.item_id.clone(), item);
    }
    Ok(catalog)
}

pub fn load_catalog(path: &Path) -> Result<Catalog, HybridError> {
    read_catalog(BufReader::new(std::fs::File::open(path)?))
}

pub fn catalog_to_jsonl(catalog: &Catalog) -> String {
    let mut out = String::new();
    for item in catalog.values() {
        out.push_str(&serde_json::to_string(item).expect("item serializes"));
        out.push('\n');
    }
    out
}

/// Jaccard similarity of the combined category and tag sets. Two empty sets score 0.
pub fn content_similarity(a: &ItemProfile, b: &ItemProfile) -> f64 {
    let sa: BTreeSet<&str> = a
        .categories
        .iter()
        .chain(&a.tags)
        .map(String::as_str)
        .collect();
    let sb: BTreeSet<&str> = b
        .categories
        .iter()
        .chain(&b.tags)
        .map(String::as_str)
        .collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Distinct users per item for `primary_kind`, divided by the maximum.
pub fn popularity_prior(log: &EventLog, primary_kind: &str) -> BTreeMap<String, f64> {
    let mut users: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for e in log.events().iter().filter(|e| e.kind == primary_kind) {
        if let Some(item) = &e.item_id {
            users
                .entry(item.as_str())
                .or_default()
                .insert(e.user_id.as_str());
        }
    }
    let max = users.values().map(BTreeSet::len).max().unwrap_or(0);
    if max == 0 {
        return BTreeMap::new();
    }
    users
        .into_iter()
        .map(|(item, u)| (item.to_string(), u.len() as f64 / max as f64))
        .collect()
}

/// Which history items seed content similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Items the user converted on (primary kind).
    #[default]
    PrimaryHistory,
    /// Items supplied by the request context (viewed item, cart contents).
    ContextItems,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub anchors: AnchorPolicy,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            anchors: AnchorPolicy::default(),
        }
    }
}

impl BlendConfig {
    pub fn weights(alpha: f64, beta: f64, gamma: f64) -> Self {
        BlendConfig {
            alpha,
            beta,
            gamma,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), HybridError> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(HybridError::InvalidBlend(format!(
                    "{name} must be finite and >= 0, got {w}"
                )));
            }
        }
        if self.alpha + self.beta + self.gamma <= 0.0 {
            return Err(HybridError::InvalidBlend(
                "alpha + beta + gamma must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Breakdown {
    pub cco: f64,
    pub content: f64,
    pub popularity: f64,
}

impl Breakdown {
    pub fn total(&self) -> f64 {
        self.cco + self.content + self.popularity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendedItem {
    pub item_id: String,
    pub score: f64,
    pub breakdown: Breakdown,
}

/// `final(t) = alpha·minmax(cco)(t) + beta·max_anchor sim(anchor, t) + gamma·prior(t)`.
///
/// Candidates are the co-occurrence items, plus catalog items with positive
/// similarity to some anchor when `beta > 0`, plus prior items when
/// `gamma > 0`. Min-max runs over the co-occurrence scores; a constant
/// vector normalizes to 1.0 and items without a co-occurrence score get 0.
pub fn blend_scores(
    cco: &[CcoScore],
    anchors: &[&str],
    catalog: &Catalog,
    prior: &BTreeMap<String, f64>,
    cfg: &BlendConfig,
) -> Result<Vec<BlendedItem>, HybridError> {
    cfg.validate()?;
    let mut candidates: BTreeSet<&str> = cco.iter().map(|s| s.item_id.as_str()).collect();
    let anchor_profiles: Vec<&ItemProfile> =
        anchors.iter().filter_map(|a| catalog.get(*a)).collect();
    if cfg.beta > 0.0 {
        for item in catalog.values() {
            if anchor_profiles
                .iter()
                .any(|a| content_similarity(a, item) > 0.0)
            {
                candidates.insert(item.item_id.as_str());
            }
        }
    }
    if cfg.gamma > 0.0 {
        candidates.extend(prior.keys().map(String::as_str));
    }
    if candidates.is_empty() {
        return Err(HybridError::NoCandidates);
    }

    let (lo, hi) = cco
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.score), hi.max(s.score))
        });
    let raw: HashMap<&str, f64> = cco.iter().map(|s| (s.item_id.as_str(), s.score)).collect();
    let normalized = |item: &str| -> f64 {
        match raw.get(item) {
            None => 0.0,
            Some(_) if hi == lo => 1.0,
            Some(&v) => (v - lo) / (hi - lo),
        }
    };

    let mut out: Vec<BlendedItem> = candidates
        .into_iter()
        .map(|item| {
            let content = match catalog.get(item) {
                Some(p) if cfg.beta > 0.0 => anchor_profiles
                    .iter()
                    .map(|a| content_similarity(a, p))
                    .fold(0.0, f64::max),
                _ => 0.0,
            };
            let breakdown = Breakdown {
                cco: cfg.alpha * normalized(item),
                content: cfg.beta * content,
                popularity: cfg.gamma * prior.get(item).copied().unwrap_or(0.0),
            };
            BlendedItem {
                item_id: item.to_string(),
                score: breakdown.total(),
                breakdown,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
    Ok(out)
}
