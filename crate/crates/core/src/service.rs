//! Operational shell: configuration, persistence, snapshots and the
//! user data controls. The HTTP layer in [`crate::http`] is a thin wrapper.
//!
//! One writer lock guards the event log and the controls store; readers
//! serve from an immutable model snapshot that retraining swaps atomically.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cco::{
    deserialize_model, serialize_model, train_from_log, CcoError, CcoScorer, IndicatorModel,
    TrainingParams,
};
use crate::events::{
    parse_event_line, replace_file, with_historical_traits, Event, EventError, EventLog,
    IngestMode, JsonlAppender, KindRegistry, WeightConfig, DEFAULT_HISTORY_WINDOW_DAYS,
    KIND_PURCHASE,
};
use crate::hybrid::{load_catalog, popularity_prior, BlendConfig, Catalog, HybridError};
use crate::rules::{compile_rules_document, protective_rules, RuleError, RuleSet, UserProfile};
use crate::time::Timestamp;
use crate::transparency::{
    assemble_frame, criteria_sheet, default_frames, lookup_frame, CriteriaSheet, EngineView,
    FrameCatalog, FrameConfig, FrameError, FrameRequest, FrameResult, PriceError, PriceHistory,
    DEFAULT_PRICE_WINDOW_DAYS,
};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown frame {0:?}")]
    UnknownFrame(String),
    #[error("no trained model is loaded")]
    ModelNotLoaded,
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("user {0:?} has been deleted")]
    UserDeleted(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("storage failure: {0}")]
    Storage(#[from] io::Error),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Cco(#[from] CcoError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Catalog(#[from] HybridError),
    #[error(transparent)]
    Price(#[from] PriceError),
    #[error(transparent)]
    Frame(FrameError),
}

impl From<FrameError> for ServiceError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::UnknownFrame(f) => ServiceError::UnknownFrame(f),
            FrameError::ModelNotLoaded => ServiceError::ModelNotLoaded,
            other => ServiceError::Frame(other),
        }
    }
}

impl ServiceError {
    /// HTTP status for this error.
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::UnknownFrame(_) | ServiceError::UnknownUser(_) => 404,
            ServiceError::ModelNotLoaded => 503,
            ServiceError::BadRequest(_) | ServiceError::UserDeleted(_) | ServiceError::Event(_) => {
                400
            }
            _ => 500,
        }
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServicePaths {
    pub event_log: PathBuf,
    pub catalog: PathBuf,
    /// Rules document; the built-in protective rules when absent.
    pub rules: Option<PathBuf>,
    pub model: PathBuf,
    pub price_history: Option<PathBuf>,
    pub controls: PathBuf,
}

impl Default for ServicePaths {
    fn default() -> Self {
        ServicePaths {
            event_log: "events.jsonl".into(),
            catalog: "catalog.jsonl".into(),
            rules: None,
            model: "model.vtrm".into(),
            price_history: None,
            controls: "controls.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub paths: ServicePaths,
    /// Frame definitions as JSON; a frame without `blend` gets [`ServiceConfig::blend`].
    /// The stock frames are used when absent.
    pub frames: Option<Vec<serde_json::Value>>,
    pub weights: WeightConfig,
    pub blend: BlendConfig,
    pub ingest_mode: IngestMode,
    pub listen: String,
    pub training: TrainingParams,
    /// Required in the `x-api-key` header when set.
    pub api_key: Option<String>,
    pub price_window_days: i64,
    /// Background retraining period for `serve`; none when absent.
    pub retrain_interval_secs: Option<u64>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            paths: ServicePaths::default(),
            frames: None,
            weights: WeightConfig::default(),
            blend: BlendConfig::default(),
            ingest_mode: IngestMode::Strict,
            listen: "127.0.0.1:8080".into(),
            training: TrainingParams::new(KIND_PURCHASE),
            api_key: None,
            price_window_days: DEFAULT_PRICE_WINDOW_DAYS,
            retrain_interval_secs: None,
        }
    }
}

impl ServiceConfig {
    /// Read a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<ServiceConfig, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ServiceConfig = serde_json::from_str(&text)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.event_log);
        fix(&mut paths.catalog);
        fix(&mut paths.model);
        fix(&mut paths.controls);
        paths.rules.as_mut().map(fix);
        paths.price_history.as_mut().map(fix);
    }

    /// All files for a data directory laid out with the default names.
    pub fn in_dir(dir: &Path) -> ServiceConfig {
        let mut cfg = ServiceConfig::default();
        cfg.resolve_paths(dir);
        cfg
    }

    pub fn frame_catalog(&self) -> Result<FrameCatalog, ServiceError> {
        let Some(raw) = &self.frames else {
            return Ok(default_frames());
        };
        let mut out = FrameCatalog::new();
        for (i, v) in raw.iter().enumerate() {
            let mut v = v.clone();
            if let Some(obj) = v.as_object_mut() {
                obj.entry("blend").or_insert_with(|| {
                    serde_json::to_value(&self.blend).expect("blend serializes")
                });
            }
            let f: FrameConfig = serde_json::from_value(v)
                .map_err(|e| ServiceError::Config(format!("frames[{i}]: {e}")))?;
            if out.insert(f.frame_id.clone(), f).is_some() {
                return Err(ServiceError::Config(format!(
                    "frames[{i}]: duplicate frame id"
                )));
            }
        }
        Ok(out)
    }

    /// SHA-256 over the canonical JSON of the whole configuration.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}

// ---------------------------------------------------------------------------
// user controls

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserControls {
    pub user_id: String,
    pub personalization_opt_out: bool,
    /// Tombstone; once set the opt-out flag no longer matters.
    pub deleted: bool,
    pub updated_at: Timestamp,
}

impl UserControls {
    pub fn new(user_id: &str, now: Timestamp) -> Self {
        UserControls {
            user_id: user_id.to_string(),
            personalization_opt_out: false,
            deleted: false,
            updated_at: now,
        }
    }

    pub fn personalization_allowed(&self) -> bool {
        !self.deleted && !self.personalization_opt_out
    }
}

/// Append-only JSON Lines store; the last record per user wins.
pub struct ControlsStore {
    appender: JsonlAppender,
    current: BTreeMap<String, UserControls>,
}

impl ControlsStore {
    pub fn open(path: &Path) -> Result<ControlsStore, ServiceError> {
        let mut current = BTreeMap::new();
        match File::open(path) {
            Ok(f) => {
                for (i, line) in BufReader::new(f).lines().enumerate() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let c: UserControls = serde_json::from_str(&line).map_err(|e| {
                        ServiceError::Config(format!("{} line {}: {e}", path.display(), i + 1))
                    })?;
                    current.insert(c.user_id.clone(), c);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        Ok(ControlsStore {
            appender: JsonlAppender::open(path)?,
            current,
        })
    }

    pub fn get(&self, user_id: &str) -> Option<&UserControls> {
        self.current.get(user_id)
    }

    /// Durably record `c`, then make it visible.
    pub fn put(&mut self, c: UserControls) -> Result<UserControls, ServiceError> {
        self.appender.append(&c)?;
        self.current.insert(c.user_id.clone(), c.clone());
        Ok(c)
    }

    pub fn deleted_users(&self) -> impl Iterator<Item = &str> {
        self.current
            .values()
            .filter(|c| c.deleted)
            .map(|c| c.user_id.as_str())
    }
}

// ---------------------------------------------------------------------------
// service

/// Immutable serving state swapped in by retraining.
pub struct Snapshot {
    pub model: IndicatorModel,
    pub scorer: CcoScorer,
    pub prior: BTreeMap<String, f64>,
}

struct Writer {
    log: EventLog,
    appender: JsonlAppender,
    controls: ControlsStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub line: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub rejected: Vec<RejectedLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_config_hash: Option<String>,
    pub config_hash: String,
    pub events: usize,
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub as_of: Timestamp,
    pub trained_users: usize,
    pub targets: usize,
    pub indicators: usize,
    pub model_config_hash: String,
}

pub struct Service {
    config: ServiceConfig,
    config_hash: String,
    registry: KindRegistry,
    frames: FrameCatalog,
    catalog: Catalog,
    rules: RuleSet,
    prices: PriceHistory,
    writer: RwLock<Writer>,
    snapshot: RwLock<Option<Arc<Snapshot>>>,
}

impl Service {
    /// Load everything the config points at. The catalog must exist; the event
    /// log, controls store and model are created or trained later if missing.
    pub fn open(config: ServiceConfig, now: Timestamp) -> Result<Service, ServiceError> {
        let registry = KindRegistry::default();
        config.weights.validate(&registry)?;
        let frames = config.frame_catalog()?;
        for f in frames.values() {
            f.validate(&registry)?;
        }
        let p = &config.paths;
        let catalog = load_catalog(&p.catalog)?;
        let rules = match &p.rules {
            Some(path) => compile_rules_document(&std::fs::read_to_string(path)?)?,
            None => protective_rules(),
        };
        let prices = match &p.price_history {
            Some(path) => PriceHistory::read_jsonl(BufReader::new(File::open(path)?))?,
            None => PriceHistory::default(),
        };
        let log = EventLog::load(&p.event_log, &registry, config.ingest_mode, now)?;
        let appender = JsonlAppender::open(&p.event_log)?;
        let controls = ControlsStore::open(&p.controls)?;
        let snapshot = match std::fs::read(&p.model) {
            Ok(bytes) => Some(Arc::new(Self::snapshot_for(
                deserialize_model(&bytes)?,
                &log,
                &config.training,
            ))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let config_hash = config.config_hash();
        log::info!("service config hash {config_hash}");
        Ok(Service {
            config,
            config_hash,
            registry,
            frames,
            catalog,
            rules,
            prices,
            writer: RwLock::new(Writer {
                log,
                appender,
                controls,
            }),
            snapshot: RwLock::new(snapshot),
        })
    }

    fn snapshot_for(model: IndicatorModel, log: &EventLog, params: &TrainingParams) -> Snapshot {
        Snapshot {
            scorer: CcoScorer::new(&model),
            prior: popularity_prior(log, &params.primary_kind),
            model,
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn registry(&self) -> &KindRegistry {
        &self.registry
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    pub fn frames(&self) -> &FrameCatalog {
        &self.frames
    }

    pub fn prices(&self) -> &PriceHistory {
        &self.prices
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn event_count(&self) -> usize {
        self.writer.read().expect("writer lock").log.len()
    }

    /// Parse and append a JSON Lines batch. Strict mode rejects the whole
    /// batch on the first bad line; lenient mode keeps the good lines.
    pub fn ingest(
        &self,
        body: &str,
        mode: IngestMode,
        now: Timestamp,
    ) -> Result<IngestSummary, ServiceError> {
        let mut w = self.writer.write().expect("writer lock");
        let mut staged: Vec<Event> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut summary = IngestSummary::default();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let checked = parse_event_line(line, i + 1, mode).and_then(|e| {
                crate::events::validate_event(&e, &self.registry, now)?;
                if w.log.get(&e.event_id).is_some() || !seen.insert(e.event_id.clone()) {
                    return Err(EventError::DuplicateEventId(e.event_id));
                }
                Ok(e)
            });
            let checked =
                checked
                    .map_err(|e| e.to_string())
                    .and_then(|e| match w.controls.get(&e.user_id) {
                        Some(c) if c.deleted => {
                            Err(ServiceError::UserDeleted(e.user_id.clone()).to_string())
                        }
                        _ => Ok(e),
                    });
            match checked {
                Ok(e) => staged.push(e),
                Err(error) if mode == IngestMode::Strict => {
                    return Err(ServiceError::BadRequest(format!("line {}: {error}", i + 1)));
                }
                Err(error) => summary.rejected.push(RejectedLine { line: i + 1, error }),
            }
        }
        for e in staged {
            w.appender.append(&e)?;
            w.log.ingest(e, &self.registry, now)?;
            summary.accepted += 1;
        }
        Ok(summary)
    }

    pub fn controls(&self, user_id: &str) -> Option<UserControls> {
        self.writer
            .read()
            .expect("writer lock")
            .controls
            .get(user_id)
            .cloned()
    }

    pub fn set_optout(
        &self,
        user_id: &str,
        opt_out: bool,
        now: Timestamp,
    ) -> Result<UserControls, ServiceError> {
        let mut w = self.writer.write().expect("writer lock");
        let mut c = w
            .controls
            .get(user_id)
            .cloned()
            .unwrap_or_else(|| UserControls::new(user_id, now));
        if c.personalization_opt_out == opt_out {
            return Ok(c);
        }
        c.personalization_opt_out = opt_out;
        c.updated_at = now;
        w.controls.put(c)
    }

    /// JSON Lines archive: one `{"user_controls": …}` line, then every event
    /// of the user exactly as stored.
    pub fn export_user_data(&self, user_id: &str, now: Timestamp) -> Result<String, ServiceError> {
        let w = self.writer.read().expect("writer lock");
        let events: Vec<&Event> = w.log.user_events(user_id).collect();
        let controls = w.controls.get(user_id).cloned();
        if events.is_empty() && controls.is_none() {
            return Err(ServiceError::UnknownUser(user_id.to_string()));
        }
        let controls = controls.unwrap_or_else(|| UserControls::new(user_id, now));
        let mut out = serde_json::json!({ "user_controls": controls }).to_string();
        out.push('\n');
        for e in events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        Ok(out)
    }

    /// Tombstone the user and drop their events from the log file. The
    /// population model still reflects them until the next retrain.
    pub fn delete_user_data(
        &self,
        user_id: &str,
        now: Timestamp,
    ) -> Result<UserControls, ServiceError> {
        let mut w = self.writer.write().expect("writer lock");
        let mut c = w
            .controls
            .get(user_id)
            .cloned()
            .unwrap_or_else(|| UserControls::new(user_id, now));
        if !c.deleted {
            c.deleted = true;
            c.updated_at = now;
            c = w.controls.put(c)?;
        }
        if w.log.user_events(user_id).next().is_some() {
            let kept = w.log.filtered(|e| e.user_id != user_id);
            replace_file(&self.config.paths.event_log, kept.to_jsonl().as_bytes())?;
            w.appender = JsonlAppender::open(&self.config.paths.event_log)?;
            w.log = kept;
        }
        Ok(c)
    }

    /// The training log: everything stored minus tombstoned users, plus
    /// derived historical traits.
    pub fn training_log(&self, as_of: Timestamp) -> Result<EventLog, ServiceError> {
        let base = {
            let w = self.writer.read().expect("writer lock");
            let deleted: std::collections::BTreeSet<&str> = w.controls.deleted_users().collect();
            w.log.filtered(|e| !deleted.contains(e.user_id.as_str()))
        };
        Ok(with_historical_traits(
            &base,
            &self.registry,
            as_of,
            DEFAULT_HISTORY_WINDOW_DAYS,
        )?)
    }

    /// Train on the current log, persist the model, and swap the snapshot.
    /// Readers keep serving the previous snapshot meanwhile.
    pub fn retrain(&self, as_of: Timestamp) -> Result<TrainSummary, ServiceError> {
        let log = self.training_log(as_of)?;
        let model = train_from_log(&log, &self.registry, &self.config.training, as_of)?;
        replace_file(&self.config.paths.model, &serialize_model(&model)?)?;
        let summary = TrainSummary {
            as_of,
            trained_users: model.trained_users,
            targets: model.targets.len(),
            indicators: model.indicator_count(),
            model_config_hash: model.config_hash.clone(),
        };
        let snap = Arc::new(Self::snapshot_for(model, &log, &self.config.training));
        *self.snapshot.write().expect("snapshot lock") = Some(snap);
        log::info!(
            "retrained: {} users, {} indicators",
            summary.trained_users,
            summary.indicators
        );
        Ok(summary)
    }

    pub fn recommend(
        &self,
        frame_id: &str,
        user_id: &str,
        context: &BTreeMap<String, String>,
        now: Timestamp,
    ) -> Result<FrameResult, ServiceError> {
        let cfg = lookup_frame(&self.frames, frame_id)?;
        let snap = self.snapshot();
        let (history, profile, allowed) = {
            let w = self.writer.read().expect("writer lock");
            let controls = w.controls.get(user_id);
            if controls.is_some_and(|c| c.deleted) {
                (Vec::new(), UserProfile::anonymous(user_id), false)
            } else {
                let history: Vec<Event> = w.log.user_events(user_id).cloned().collect();
                let profile = UserProfile::from_events(user_id, &history);
                let allowed = controls.is_none_or(UserControls::personalization_allowed);
                (if allowed { history } else { Vec::new() }, profile, allowed)
            }
        };
        let empty_prior = BTreeMap::new();
        let engine = EngineView {
            registry: &self.registry,
            weights: &self.config.weights,
            model: snap.as_ref().map(|s| &s.model),
            scorer: snap.as_ref().map(|s| &s.scorer),
            catalog: &self.catalog,
            rules: &self.rules,
            prior: snap.as_ref().map(|s| &s.prior).unwrap_or(&empty_prior),
            primary_kind: &self.config.training.primary_kind,
        };
        if snap.is_none() {
            return Err(ServiceError::ModelNotLoaded);
        }
        let req = FrameRequest {
            user_id,
            history: &history,
            profile: &profile,
            personalization_allowed: allowed,
            context,
            now,
        };
        Ok(assemble_frame(cfg, &req, &engine)?)
    }

    pub fn criteria(&self, frame_id: &str) -> Result<CriteriaSheet, ServiceError> {
        let cfg = lookup_frame(&self.frames, frame_id)?;
        Ok(criteria_sheet(
            cfg,
            &self.registry,
            &self.rules,
            &self.config.training.primary_kind,
        ))
    }

    pub fn reference_price(&self, item_id: &str, at: Timestamp) -> Result<f64, ServiceError> {
        Ok(self
            .prices
            .reference_price(item_id, at, self.config.price_window_days)?)
    }

    pub fn health(&self) -> Health {
        let snap = self.snapshot();
        Health {
            status: "ok".into(),
            model_loaded: snap.is_some(),
            model_config_hash: snap.map(|s| s.model.config_hash.clone()),
            config_hash: self.config_hash.clone(),
            events: self.event_count(),
            frames: self.frames.keys().cloned().collect(),
        }
    }
}
