//! Atomic interaction events: the kind registry, global weights, the
//! append-only log and the derived behavioral/historical events.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

pub const KIND_PURCHASE: &str = "purchase";
pub const KIND_ADD_TO_CART: &str = "add_to_cart";
pub const KIND_VIEW: &str = "view";
pub const KIND_CATEGORY_VIEW: &str = "category_view";
pub const KIND_DWELL: &str = "dwell";
pub const KIND_BOUGHT_IN_CATEGORY: &str = "bought_in_category";
pub const KIND_USER_TRAIT: &str = "user_trait";
pub const KIND_ITEM_TRAIT: &str = "item_trait";

pub const CONTEXT_CATEGORY: &str = "category";
pub const CONTEXT_TRAIT: &str = "trait";
pub const CONTEXT_TRAIT_VALUE: &str = "value";

/// Traits that never become co-occurrence signals.
pub const PROTECTED_TRAITS: [&str; 2] = ["age", "gender"];

/// Allowed clock skew between client timestamps and the ingestion clock.
pub const MAX_CLOCK_SKEW_SECS: i64 = 300;

pub const DEFAULT_DWELL_THRESHOLD_SECS: f64 = 30.0;
pub const DEFAULT_HISTORY_WINDOW_DAYS: i64 = 180;

#[derive(Debug, thiserror::Error)]
pub enum EventError {
    #[error("unknown event kind {0:?}")]
    UnknownKind(String),
    #[error("event {event_id}: timestamp {timestamp} is later than the ingestion clock allows")]
    InvalidTimestamp {
        event_id: String,
        timestamp: Timestamp,
    },
    #[error("event {event_id}: value {value} must be a finite non-negative number")]
    NegativeValue { event_id: String, value: f64 },
    #[error("duplicate event id {0:?}")]
    DuplicateEventId(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown field {field:?} (strict mode)")]
    UnknownField { line: usize, field: String },
    #[error("invalid weight configuration: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventCategory {
    Action,
    Behavioral,
    Historical,
    UserTrait,
    ItemTrait,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventKind {
    pub name: String,
    pub category: EventCategory,
    pub default_weight: f64,
}

/// The declared set of event kinds. Names are unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindRegistry {
    kinds: BTreeMap<String, EventKind>,
}

impl Default for KindRegistry {
    fn default() -> Self {
        let mut reg = KindRegistry {
            kinds: BTreeMap::new(),
        };
        for (name, category, weight) in [
            (KIND_PURCHASE, EventCategory::Action, 1.0),
            (KIND_ADD_TO_CART, EventCategory::Action, 0.5),
            (KIND_VIEW, EventCategory::Action, 0.2),
            (KIND_CATEGORY_VIEW, EventCategory::Action, 0.1),
            (KIND_DWELL, EventCategory::Behavioral, 0.3),
            (KIND_BOUGHT_IN_CATEGORY, EventCategory::Historical, 0.4),
            (KIND_USER_TRAIT, EventCategory::UserTrait, 0.5),
            (KIND_ITEM_TRAIT, EventCategory::ItemTrait, 0.2),
        ] {
            reg.register(EventKind {
                name: name.to_string(),
                category,
                default_weight: weight,
            })
            .expect("default kinds are unique");
        }
        reg
    }
}

impl KindRegistry {
    pub fn empty() -> Self {
        KindRegistry {
            kinds: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, kind: EventKind) -> Result<(), EventError> {
        if !(kind.default_weight.is_finite() && kind.default_weight >= 0.0) {
            return Err(EventError::InvalidWeights(format!(
                "kind {:?} has default weight {}",
                kind.name, kind.default_weight
            )));
        }
        if self.kinds.contains_key(&kind.name) {
            return Err(EventError::InvalidWeights(format!(
                "kind {:?} registered twice",
                kind.name
            )));
        }
        self.kinds.insert(kind.name.clone(), kind);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&EventKind, EventError> {
        self.kinds
            .get(name)
            .ok_or_else(|| EventError::UnknownKind(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.kinds.contains_key(name)
    }

    pub fn kinds(&self) -> impl Iterator<Item = &EventKind> {
        self.kinds.values()
    }
}

/// Global per-kind weight overrides applied over each kind's default weight.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightConfig {
    pub overrides: BTreeMap<String, f64>,
}

impl WeightConfig {
    pub fn with_override(mut self, kind: &str, weight: f64) -> Self {
        self.overrides.insert(kind.to_string(), weight);
        self
    }

    pub fn validate(&self, registry: &KindRegistry) -> Result<(), EventError> {
        for (name, w) in &self.overrides {
            registry.get(name)?;
            if !(w.is_finite() && *w >= 0.0) {
                return Err(EventError::InvalidWeights(format!(
                    "weight for {name:?} is {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Override if configured, otherwise the kind's default weight.
pub fn effective_weight(
    kind: &str,
    registry: &KindRegistry,
    cfg: &WeightConfig,
) -> Result<f64, EventError> {
    let kind = registry.get(kind)?;
    Ok(cfg
        .overrides
        .get(&kind.name)
        .copied()
        .unwrap_or(kind.default_weight))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: String,
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    pub kind: String,
    pub timestamp: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub context: BTreeMap<String, String>,
}

const EVENT_FIELDS: [&str; 7] = [
    "event_id",
    "user_id",
    "item_id",
    "kind",
    "timestamp",
    "value",
    "context",
];

impl Event {
    pub fn new(
        event_id: &str,
        user_id: &str,
        item_id: Option<&str>,
        kind: &str,
        timestamp: Timestamp,
    ) -> Self {
        Event {
            event_id: event_id.to_string(),
            user_id: user_id.to_string(),
            item_id: item_id.map(str::to_string),
            kind: kind.to_string(),
            timestamp,
            value: None,
            context: BTreeMap::new(),
        }
    }

    pub fn with_value(mut self, value: f64) -> Self {
        self.value = Some(value);
        self
    }

    pub fn with_context(mut self, key: &str, value: &str) -> Self {
        self.context.insert(key.to_string(), value.to_string());
        self
    }

    /// The column this event occupies in its kind's interaction matrix.
    ///
    /// Trait kinds map to `trait:<name>` (or `trait:<name>=<value>`),
    /// category-level events to `category:<id>`, everything else to the item.
    /// Protected traits and events with no addressable target yield `None`.
    pub fn signal_id(&self, category: EventCategory) -> Option<String> {
        match category {
            EventCategory::UserTrait | EventCategory::ItemTrait => {
                let name = self.context.get(CONTEXT_TRAIT)?;
                if PROTECTED_TRAITS.contains(&name.as_str()) {
                    return None;
                }
                Some(match self.context.get(CONTEXT_TRAIT_VALUE) {
                    Some(v) => format!("trait:{name}={v}"),
                    None => format!("trait:{name}"),
                })
            }
            _ => match &self.item_id {
                Some(item) => Some(item.clone()),
                None => self
                    .context
                    .get(CONTEXT_CATEGORY)
                    .map(|c| format!("category:{c}")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IngestMode {
    #[default]
    Strict,
    Lenient,
}

/// Parse one JSON Lines record. Strict mode rejects fields outside the event schema.
pub fn parse_event_line(line: &str, line_no: usize, mode: IngestMode) -> Result<Event, EventError> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| EventError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    if mode == IngestMode::Strict {
        if let Some(obj) = value.as_object() {
            if let Some(field) = obj.keys().find(|k| !EVENT_FIELDS.contains(&k.as_str())) {
                return Err(EventError::UnknownField {
                    line: line_no,
                    field: field.clone(),
                });
            }
        }
    }
    serde_json::from_value(value).map_err(|e| EventError::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

pub fn validate_event(
    e: &Event,
    registry: &KindRegistry,
    now: Timestamp,
) -> Result<(), EventError> {
    registry.get(&e.kind)?;
    if e.timestamp.secs() > now.secs() + MAX_CLOCK_SKEW_SECS {
        return Err(EventError::InvalidTimestamp {
            event_id: e.event_id.clone(),
            timestamp: e.timestamp,
        });
    }
    if let Some(v) = e.value {
        if !(v.is_finite() && v >= 0.0) {
            return Err(EventError::NegativeValue {
                event_id: e.event_id.clone(),
                value: v,
            });
        }
    }
    Ok(())
}

/// Append-only, ordered event sequence with lookup by event id.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    events: Vec<Event>,
    by_id: HashMap<String, usize>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ingest(
        &mut self,
        e: Event,
        registry: &KindRegistry,
        now: Timestamp,
    ) -> Result<(), EventError> {
        validate_event(&e, registry, now)?;
        if self.by_id.contains_key(&e.event_id) {
            return Err(EventError::DuplicateEventId(e.event_id));
        }
        self.by_id.insert(e.event_id.clone(), self.events.len());
        self.events.push(e);
        Ok(())
    }

    pub fn get(&self, event_id: &str) -> Option<&Event> {
        self.by_id.get(event_id).map(|&i| &self.events[i])
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn user_events<'a>(&'a self, user_id: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| e.user_id == user_id)
    }

    /// A new log holding only the events that satisfy `keep`, in original order.
    pub fn filtered(&self, mut keep: impl FnMut(&Event) -> bool) -> EventLog {
        let mut out = EventLog::new();
        for e in self.events.iter().filter(|e| keep(e)) {
            out.by_id.insert(e.event_id.clone(), out.events.len());
            out.events.push(e.clone());
        }
        out
    }

    pub fn users(&self) -> BTreeSet<&str> {
        self.events.iter().map(|e| e.user_id.as_str()).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), EventError> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e).map_err(io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Rebuild a log by ingesting every line in order. Blank lines are skipped.
    pub fn replay<R: BufRead>(
        reader: R,
        registry: &KindRegistry,
        mode: IngestMode,
        now: Timestamp,
    ) -> Result<EventLog, EventError> {
        let mut log = EventLog::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e = parse_event_line(&line, i + 1, mode)?;
            log.ingest(e, registry, now)?;
        }
        Ok(log)
    }

    pub fn load(
        path: &Path,
        registry: &KindRegistry,
        mode: IngestMode,
        now: Timestamp,
    ) -> Result<EventLog, EventError> {
        match File::open(path) {
            Ok(f) => Self::replay(BufReader::new(f), registry, mode, now),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(EventLog::new()),
            Err(e) => Err(e.into()),
        }
    }
}

/// Durable JSON Lines appender: every append is flushed and synced before returning.
pub struct JsonlAppender {
    file: File,
}

impl JsonlAppender {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonlAppender { file })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> io::Result<()> {
        let mut line = serde_json::to_vec(record).map_err(io::Error::from)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}

/// Atomically replace `path` with `contents` (write to a sibling, sync, rename).
pub fn replace_file(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageView {
    pub user_id: String,
    pub item_id: String,
    pub duration_seconds: f64,
    pub timestamp: Timestamp,
}

/// One `dwell` event per page view lasting strictly longer than `threshold_s`.
pub fn derive_dwell_events(page_views: &[PageView], threshold_s: f64) -> Vec<Event> {
    page_views
        .iter()
        .enumerate()
        .filter(|(_, v)| v.duration_seconds > threshold_s)
        .map(|(i, v)| {
            Event::new(
                &format!(
                    "dwell:{}:{}:{}:{i}",
                    v.user_id,
                    v.item_id,
                    v.timestamp.secs()
                ),
                &v.user_id,
                Some(&v.item_id),
                KIND_DWELL,
                v.timestamp,
            )
            .with_value(v.duration_seconds)
        })
        .collect()
}

/// One `bought_in_category` trait per (user, category) with at least one
/// purchase no more than `window_days` before `as_of`. Purchases must carry
/// their category in the `category` context key. Output is ordered by
/// (user, category) and stamped `as_of`.
pub fn derive_historical_traits(log: &EventLog, as_of: Timestamp, window_days: i64) -> Vec<Event> {
    derive_historical_traits_from(log.events(), as_of, window_days)
}

/// Copy of `log` with the historical traits derived at `as_of` appended.
/// Derived events already present (same id) are not duplicated.
pub fn with_historical_traits(
    log: &EventLog,
    registry: &KindRegistry,
    as_of: Timestamp,
    window_days: i64,
) -> Result<EventLog, EventError> {
    let mut out = log.clone();
    for e in derive_historical_traits(log, as_of, window_days) {
        if out.get(&e.event_id).is_none() {
            out.ingest(e, registry, as_of)?;
        }
    }
    Ok(out)
}

/// [`derive_historical_traits`] over any event sequence.
pub fn derive_historical_traits_from<'a>(
    events: impl IntoIterator<Item = &'a Event>,
    as_of: Timestamp,
    window_days: i64,
) -> Vec<Event> {
    let pairs: BTreeSet<(&str, &str)> = events
        .into_iter()
        .filter(|e| e.kind == KIND_PURCHASE && e.timestamp.within_days_before(as_of, window_days))
        .filter_map(|e| {
            e.context
                .get(CONTEXT_CATEGORY)
                .map(|c| (e.user_id.as_str(), c.as_str()))
        })
        .collect();
    pairs
        .into_iter()
        .map(|(user, cat)| {
            Event::new(
                &format!("hist:{user}:{cat}:{}", as_of.secs()),
                user,
                None,
                KIND_BOUGHT_IN_CATEGORY,
                as_of,
            )
            .with_context(CONTEXT_CATEGORY, cat)
        })
        .collect()
}
