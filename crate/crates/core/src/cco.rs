//! Correlated cross-occurrence: binary per-kind interaction matrices,
//! log-likelihood ratio scoring of co-occurrences, indicator training and
//! user scoring against the trained indicators.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::events::{
    effective_weight, Event, EventCategory, EventError, EventLog, KindRegistry, WeightConfig,
};
use crate::time::Timestamp;

pub const DEFAULT_K_MAX: usize = 50;
pub const DEFAULT_MIN_LLR: f64 = 0.0;
pub const MODEL_VERSION: &str = "cco-llr-1";

#[derive(Debug, thiserror::Error)]
pub enum CcoError {
    #[error("contingency table is all zeros")]
    AllZero,
    #[error("no interaction matrix for primary kind {0:?}")]
    MissingPrimaryMatrix(String),
    #[error("invalid training parameters: {0}")]
    InvalidParams(String),
    #[error(
        "model format version {major}.{minor} is not supported (this build reads {supported}.x)"
    )]
    VersionMismatch {
        major: u16,
        minor: u16,
        supported: u16,
    },
    #[error("corrupt model payload: {0}")]
    CorruptPayload(String),
    #[error(transparent)]
    Event(#[from] EventError),
}

/// Binary user × signal occurrence for one event kind.
///
/// Rows and columns are sorted by id; dense indices follow that order.
#[derive(Debug, Clone)]
pub struct InteractionMatrix {
    pub event_kind: String,
    pub category: EventCategory,
    rows: Vec<String>,
    cols: Vec<String>,
    row_index: HashMap<String, u32>,
    col_index: HashMap<String, u32>,
    row_cols: Vec<Vec<u32>>,
    col_rows: Vec<Vec<u32>>,
}

impl InteractionMatrix {
    fn from_cells(
        event_kind: &str,
        category: EventCategory,
        cells: &BTreeSet<(&str, String)>,
    ) -> Self {
        let rows: Vec<String> = cells
            .iter()
            .map(|(u, _)| u.to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let cols: Vec<String> = cells
            .iter()
            .map(|(_, c)| c.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let row_index: HashMap<String, u32> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i as u32))
            .collect();
        let col_index: HashMap<String, u32> = cols
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i as u32))
            .collect();
        let mut row_cols = vec![Vec::new(); rows.len()];
        let mut col_rows = vec![Vec::new(); cols.len()];
        // cells iterate in (row, col) order, so both adjacency lists come out sorted
        for (u, c) in cells {
            let (r, k) = (row_index[*u], col_index[c]);
            row_cols[r as usize].push(k);
            col_rows[k as usize].push(r);
        }
        InteractionMatrix {
            event_kind: event_kind.to_string(),
            category,
            rows,
            cols,
            row_index,
            col_index,
            row_cols,
            col_rows,
        }
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn cols(&self) -> &[String] {
        &self.cols
    }

    pub fn nnz(&self) -> usize {
        self.row_cols.iter().map(Vec::len).sum()
    }

    pub fn get(&self, user: &str, col: &str) -> u8 {
        match (self.row_index.get(user), self.col_index.get(col)) {
            (Some(&r), Some(&c)) => u8::from(self.row_cols[r as usize].binary_search(&c).is_ok()),
            _ => 0,
        }
    }

    pub fn row(&self, user: &str) -> impl Iterator<Item = &str> {
        self.row_index.get(user).into_iter().flat_map(move |&r| {
            self.row_cols[r as usize]
                .iter()
                .map(move |&c| self.cols[c as usize].as_str())
        })
    }

    pub fn col_users(&self, col: &str) -> impl Iterator<Item = &str> {
        self.col_index.get(col).into_iter().flat_map(move |&c| {
            self.col_rows[c as usize]
                .iter()
                .map(move |&r| self.rows[r as usize].as_str())
        })
    }
}

/// One deduplicated matrix per event kind present in the log, using only
/// events at or before `as_of`. An empty log yields an empty map.
pub fn build_interaction_matrices(
    log: &EventLog,
    registry: &KindRegistry,
    as_of: Timestamp,
) -> Result<BTreeMap<String, InteractionMatrix>, CcoError> {
    if log.is_empty() {
        log::warn!("building interaction matrices from an empty event log");
        return Ok(BTreeMap::new());
    }
    let mut cells: BTreeMap<&str, (EventCategory, BTreeSet<(&str, String)>)> = BTreeMap::new();
    for e in log.events().iter().filter(|e| e.timestamp <= as_of) {
        let category = registry.get(&e.kind)?.category;
        let entry = cells
            .entry(e.kind.as_str())
            .or_insert_with(|| (category, BTreeSet::new()));
        if let Some(col) = e.signal_id(category) {
            entry.1.insert((e.user_id.as_str(), col));
        }
    }
    Ok(cells
        .into_iter()
        .filter(|(_, (_, c))| !c.is_empty())
        .map(|(kind, (category, c))| {
            (
                kind.to_string(),
                InteractionMatrix::from_cells(kind, category, &c),
            )
        })
        .collect())
}

#[inline]
fn xlogx(x: u64) -> f64 {
    if x == 0 {
        0.0
    } else {
        let x = x as f64;
        x * x.ln()
    }
}

/// Log-likelihood ratio (G statistic) of a 2×2 contingency table
/// `[[k11, k12], [k21, k22]]`.
///
/// Exactly zero whenever the table is proportional (`k11·k22 = k12·k21`).
/// The summation order makes the result bit-identical under transposition
/// and under simultaneous row/column swap.
pub fn llr(k11: u64, k12: u64, k21: u64, k22: u64) -> Result<f64, CcoError> {
    let n = k11 + k12 + k21 + k22;
    if n == 0 {
        return Err(CcoError::AllZero);
    }
    Ok(llr_with(k11, k12, k21, k22, xlogx))
}

#[inline]
fn llr_with(k11: u64, k12: u64, k21: u64, k22: u64, xlx: impl Fn(u64) -> f64) -> f64 {
    if (k11 as u128) * (k22 as u128) == (k12 as u128) * (k21 as u128) {
        return 0.0;
    }
    let n = k11 + k12 + k21 + k22;
    let cells = (xlx(k11) + xlx(k22)) + (xlx(k12) + xlx(k21));
    let rows = xlx(k11 + k12) + xlx(k21 + k22);
    let cols = xlx(k11 + k21) + xlx(k12 + k22);
    let g = 2.0 * (cells - (rows + cols) + xlx(n));
    g.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Indicator {
    pub source_kind: String,
    pub source_id: String,
    pub llr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingParams {
    pub primary_kind: String,
    pub k_max: usize,
    pub min_llr: f64,
}

impl TrainingParams {
    pub fn new(primary_kind: &str) -> Self {
        TrainingParams {
            primary_kind: primary_kind.to_string(),
            k_max: DEFAULT_K_MAX,
            min_llr: DEFAULT_MIN_LLR,
        }
    }

    fn validate(&self) -> Result<(), CcoError> {
        if self.k_max == 0 {
            return Err(CcoError::InvalidParams("k_max must be positive".into()));
        }
        if !(self.min_llr.is_finite() && self.min_llr >= 0.0) {
            return Err(CcoError::InvalidParams(format!(
                "min_llr must be finite and >= 0, got {}",
                self.min_llr
            )));
        }
        Ok(())
    }
}

/// Per-target ranked indicator lists learned from the interaction matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorModel {
    pub model_version: String,
    pub primary_kind: String,
    pub k_max: usize,
    pub min_llr: f64,
    pub build_timestamp: Timestamp,
    pub config_hash: String,
    pub trained_users: usize,
    pub targets: BTreeMap<String, Vec<Indicator>>,
}

impl IndicatorModel {
    pub fn indicators(&self, target: &str) -> &[Indicator] {
        self.targets.get(target).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn indicator_count(&self) -> usize {
        self.targets.values().map(Vec::len).sum()
    }
}

/// Hash over every parameter that influences training output.
pub fn training_config_hash(
    params: &TrainingParams,
    as_of: Timestamp,
    matrices: &BTreeMap<String, InteractionMatrix>,
) -> String {
    let kinds: Vec<(&str, EventCategory)> = matrices
        .values()
        .map(|m| (m.event_kind.as_str(), m.category))
        .collect();
    let canonical = serde_json::json!({
        "model_version": MODEL_VERSION,
        "primary_kind": params.primary_kind,
        "k_max": params.k_max,
        "min_llr": params.min_llr,
        "as_of": as_of.secs(),
        "kinds": kinds,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

fn rank_indicators(a: &Indicator, b: &Indicator) -> Ordering {
    b.llr
        .partial_cmp(&a.llr)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.source_id.cmp(&b.source_id))
        .then_with(|| a.source_kind.cmp(&b.source_kind))
}

/// Learn indicators for every column of the primary matrix.
///
/// The user universe is the set of users with at least one primary event;
/// secondary-matrix rows outside it are ignored. Candidate sources are
/// signals that co-occur with the target for at least one user. A candidate
/// is kept when its LLR is positive and at least `min_llr`; the best
/// `k_max` survive, ranked by LLR descending then source id ascending.
pub fn train_indicators(
    matrices: &BTreeMap<String, InteractionMatrix>,
    params: &TrainingParams,
    as_of: Timestamp,
) -> Result<IndicatorModel, CcoError> {
    params.validate()?;
    let primary = matrices
        .get(&params.primary_kind)
        .filter(|m| m.nnz() > 0)
        .ok_or_else(|| CcoError::MissingPrimaryMatrix(params.primary_kind.clone()))?;
    let n_users = primary.rows.len() as u64;

    let kinds: Vec<&InteractionMatrix> = matrices.values().collect();
    let primary_pos = kinds
        .iter()
        .position(|m| m.event_kind == params.primary_kind)
        .expect("primary present");

    // per matrix: each primary user's columns, and per-column counts inside the universe
    let mut user_cols: Vec<Vec<&[u32]>> = Vec::with_capacity(kinds.len());
    let mut col_counts: Vec<Vec<u64>> = Vec::with_capacity(kinds.len());
    for m in &kinds {
        let mut counts = vec![0u64; m.cols.len()];
        let rows: Vec<&[u32]> = primary
            .rows
            .iter()
            .map(|u| match m.row_index.get(u) {
                Some(&r) => m.row_cols[r as usize].as_slice(),
                None => &[],
            })
            .collect();
        for cols in &rows {
            for &c in *cols {
                counts[c as usize] += 1;
            }
        }
        user_cols.push(rows);
        col_counts.push(counts);
    }

    let xlx_table: Vec<f64> = (0..=n_users).map(xlogx).collect();
    let xlx = |x: u64| xlx_table[x as usize];

    let targets: Vec<(String, Vec<Indicator>)> = (0..primary.cols.len())
        .into_par_iter()
        .map(|t| {
            let target_users = &primary.col_rows[t];
            let k_target = target_users.len() as u64;
            let mut out = Vec::new();
            let mut cooc: Vec<u64> = Vec::new();
            let mut touched: Vec<u32> = Vec::new();
            for (mi, m) in kinds.iter().enumerate() {
                cooc.clear();
                cooc.resize(m.cols.len(), 0);
                touched.clear();
                for &u in target_users {
                    for &c in user_cols[mi][u as usize] {
                        if cooc[c as usize] == 0 {
                            touched.push(c);
                        }
                        cooc[c as usize] += 1;
                    }
                }
                for &c in &touched {
                    if mi == primary_pos && c as usize == t {
                        continue;
                    }
                    let k11 = cooc[c as usize];
                    let k12 = col_counts[mi][c as usize] - k11;
                    let k21 = k_target - k11;
                    let k22 = n_users - k11 - k12 - k21;
                    let score = llr_with(k11, k12, k21, k22, xlx);
                    if score > 0.0 && score >= params.min_llr {
                        out.push(Indicator {
                            source_kind: m.event_kind.clone(),
                            source_id: m.cols[c as usize].clone(),
                            llr: score,
                        });
                    }
                }
            }
            out.sort_by(rank_indicators);
            out.truncate(params.k_max);
            (primary.cols[t].clone(), out)
        })
        .collect();

    Ok(IndicatorModel {
        model_version: MODEL_VERSION.to_string(),
        primary_kind: params.primary_kind.clone(),
        k_max: params.k_max,
        min_llr: params.min_llr,
        build_timestamp: as_of,
        config_hash: training_config_hash(params, as_of, matrices),
        trained_users: n_users as usize,
        targets: targets.into_iter().filter(|(_, v)| !v.is_empty()).collect(),
    })
}

/// Convenience: matrices from `log` then indicators.
pub fn train_from_log(
    log: &EventLog,
    registry: &KindRegistry,
    params: &TrainingParams,
    as_of: Timestamp,
) -> Result<IndicatorModel, CcoError> {
    let matrices = build_interaction_matrices(log, registry, as_of)?;
    train_indicators(&matrices, params, as_of)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub source_id: String,
    pub source_kind: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcoScore {
    pub item_id: String,
    pub score: f64,
    pub contributions: Vec<Contribution>,
}

/// Inverted view of an [`IndicatorModel`] (source kind → source id → targets)
/// for repeated scoring.
#[derive(Debug, Clone, Default)]
pub struct CcoScorer {
    by_source: HashMap<String, HashMap<String, Vec<(String, f64)>>>,
}

impl CcoScorer {
    pub fn new(model: &IndicatorModel) -> Self {
        let mut by_source: HashMap<String, HashMap<String, Vec<(String, f64)>>> = HashMap::new();
        for (target, inds) in &model.targets {
            for ind in inds {
                by_source
                    .entry(ind.source_kind.clone())
                    .or_default()
                    .entry(ind.source_id.clone())
                    .or_default()
                    .push((target.clone(), ind.llr));
            }
        }
        CcoScorer { by_source }
    }

    /// Score every target reachable from the history's signals.
    ///
    /// `score(t) = Σ llr · weight(kind)` over indicators of `t` present in the
    /// history. Zero-weight terms and zero scores are dropped. Ordered by score
    /// descending then item id ascending.
    pub fn score<'e>(
        &self,
        history: impl IntoIterator<Item = &'e Event>,
        registry: &KindRegistry,
        weights: &WeightConfig,
    ) -> Vec<CcoScore> {
        let mut present: BTreeSet<(&str, String)> = BTreeSet::new();
        for e in history {
            let Ok(kind) = registry.get(&e.kind) else {
                continue;
            };
            if let Some(sig) = e.signal_id(kind.category) {
                present.insert((e.kind.as_str(), sig));
            }
        }
        let mut per_target: BTreeMap<&str, Vec<Contribution>> = BTreeMap::new();
        for (kind, sig) in &present {
            let Some(hits) = self.by_source.get(*kind).and_then(|m| m.get(sig)) else {
                continue;
            };
            let w = effective_weight(kind, registry, weights).unwrap_or(0.0);
            if w == 0.0 {
                continue;
            }
            for (target, llr) in hits {
                per_target
                    .entry(target.as_str())
                    .or_default()
                    .push(Contribution {
                        source_id: sig.clone(),
                        source_kind: kind.to_string(),
                        value: llr * w,
                    });
            }
        }
        let mut out: Vec<CcoScore> = per_target
            .into_iter()
            .map(|(item, mut contributions)| {
                contributions.sort_by(|a, b| {
                    b.value
                        .partial_cmp(&a.value)
                        .unwrap_or(Ordering::Equal)
                        .then_with(|| a.source_id.cmp(&b.source_id))
                        .then_with(|| a.source_kind.cmp(&b.source_kind))
                });
                let score = contributions.iter().map(|c| c.value).sum();
                CcoScore {
                    item_id: item.to_string(),
                    score,
                    contributions,
                }
            })
            .filter(|s| s.score > 0.0)
            .collect();
        out.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.item_id.cmp(&b.item_id))
        });
        out
    }
}

pub fn score_cco<'e>(
    history: impl IntoIterator<Item = &'e Event>,
    model: &IndicatorModel,
    registry: &KindRegistry,
    weights: &WeightConfig,
) -> Vec<CcoScore> {
    CcoScorer::new(model).score(history, registry, weights)
}

const MAGIC: &[u8; 4] = b"VTRM";
pub const FORMAT_MAJOR: u16 = 1;
pub const FORMAT_MINOR: u16 = 0;
const HEADER_LEN: usize = 4 + 2 + 2 + 32 + 8 + 32;

/// Model container:
///
/// ```text
/// magic "VTRM" | major u16 LE | minor u16 LE | config_hash [32] |
/// body_len u64 LE | sha256(body) [32] | body (canonical JSON)
/// ```
pub fn serialize_model(model: &IndicatorModel) -> Result<Vec<u8>, CcoError> {
    let body = serde_json::to_vec(model).map_err(|e| CcoError::CorruptPayload(e.to_string()))?;
    let hash = decode_hash(&model.config_hash)?;
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_MAJOR.to_le_bytes());
    out.extend_from_slice(&FORMAT_MINOR.to_le_bytes());
    out.extend_from_slice(&hash);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body);
    Ok(out)
}

fn decode_hash(hex_hash: &str) -> Result<[u8; 32], CcoError> {
    let bytes =
        hex::decode(hex_hash).map_err(|e| CcoError::CorruptPayload(format!("config hash: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| CcoError::CorruptPayload("config hash must be 32 bytes".into()))
}

pub fn deserialize_model(bytes: &[u8]) -> Result<IndicatorModel, CcoError> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(CcoError::CorruptPayload("bad magic".into()));
    }
    let major = u16::from_le_bytes([bytes[4], bytes[5]]);
    let minor = u16::from_le_bytes([bytes[6], bytes[7]]);
    if major != FORMAT_MAJOR {
        return Err(CcoError::VersionMismatch {
            major,
            minor,
            supported: FORMAT_MAJOR,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(CcoError::CorruptPayload("truncated header".into()));
    }
    let header_hash = &bytes[8..40];
    let body_len = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes")) as usize;
    let checksum = &bytes[48..80];
    let body = &bytes[HEADER_LEN..];
    if body.len() != body_len {
        return Err(CcoError::CorruptPayload(format!(
            "body is {} bytes, header says {body_len}",
            body.len()
        )));
    }
    if Sha256::digest(body).as_slice() != checksum {
        return Err(CcoError::CorruptPayload("checksum mismatch".into()));
    }
    let model: IndicatorModel =
        serde_json::from_slice(body).map_err(|e| CcoError::CorruptPayload(e.to_string()))?;
    if decode_hash(&model.config_hash)?.as_slice() != header_hash {
        return Err(CcoError::CorruptPayload(
            "header config hash does not match body".into(),
        ));
    }
    Ok(model)
}
