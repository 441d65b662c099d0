//! Declarative business rules that filter and re-weight candidate lists.
//!
//! A rule pairs a user/context/time condition with an item target and an
//! action. `EXCLUDE` removes matching items; `BOOST` multiplies their score
//! and must carry disclosure text. Rules run in a fixed order: the legal band
//! before merchant rules, then ascending priority, `EXCLUDE` before `BOOST`,
//! then rule id. Every change lands in a [`RuleTrace`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::events::{Event, CONTEXT_TRAIT, CONTEXT_TRAIT_VALUE, KIND_USER_TRAIT};
use crate::hybrid::{Catalog, ItemProfile};
use crate::time::Timestamp;

pub const AGE_TRAIT: &str = "age";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuleError {
    #[error("rules[{index}] ({rule_id}): BOOST requires non-empty disclosure_text")]
    MissingDisclosure { index: usize, rule_id: String },
    #[error("rules[{index}]: rule id {rule_id:?} already used by rules[{first}]")]
    DuplicateRuleId {
        index: usize,
        first: usize,
        rule_id: String,
    },
    #[error("rules[{index}] ({rule_id}): {message}")]
    MalformedPredicate {
        index: usize,
        rule_id: String,
        message: String,
    },
    #[error("rules document: {0}")]
    MalformedDocument(String),
    #[error("context key {0:?} is required by the rule but missing")]
    MissingContextKey(String),
}

/// Declared user profile used by rule conditions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default)]
    pub traits: BTreeMap<String, String>,
}

impl UserProfile {
    pub fn anonymous(user_id: &str) -> Self {
        UserProfile {
            user_id: user_id.to_string(),
            ..Default::default()
        }
    }

    pub fn with_trait(mut self, name: &str, value: &str) -> Self {
        self.traits.insert(name.to_string(), value.to_string());
        self
    }

    pub fn with_age(mut self, age: u32) -> Self {
        self.age = Some(age);
        self
    }

    /// Fold `user_trait` events in order. A value of `"false"` clears the trait;
    /// the `age` trait also sets [`UserProfile::age`].
    pub fn from_events<'a>(user_id: &str, events: impl IntoIterator<Item = &'a Event>) -> Self {
        let mut p = UserProfile::anonymous(user_id);
        for e in events {
            if e.kind != KIND_USER_TRAIT || e.user_id != user_id {
                continue;
            }
            let Some(name) = e.context.get(CONTEXT_TRAIT) else {
                continue;
            };
            let value = e
                .context
                .get(CONTEXT_TRAIT_VALUE)
                .cloned()
                .unwrap_or_else(|| "true".to_string());
            if value == "false" {
                p.traits.remove(name);
                if name == AGE_TRAIT {
                    p.age = None;
                }
                continue;
            }
            if name == AGE_TRAIT {
                p.age = value.parse().ok();
            }
            p.traits.insert(name.clone(), value);
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Always,
    All(Vec<Condition>),
    Any(Vec<Condition>),
    Not(Box<Condition>),
    TraitExists(String),
    TraitEquals {
        key: String,
        value: String,
    },
    /// Satisfied when age is below the bound, or unknown.
    AgeLt(u32),
    /// Satisfied only for a known age at or above the bound.
    AgeGte(u32),
    ContextEquals {
        key: String,
        value: String,
        #[serde(default)]
        required: bool,
    },
    /// Half-open `[start, end)`.
    TimeWithin {
        start: Timestamp,
        end: Timestamp,
    },
}

impl Default for Condition {
    fn default() -> Self {
        Condition::Always
    }
}

/// Which request inputs a condition reads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Reads {
    pub profile: bool,
    pub context: bool,
    pub clock: bool,
}

impl Reads {
    pub fn union(self, other: Reads) -> Reads {
        Reads {
            profile: self.profile || other.profile,
            context: self.context || other.context,
            clock: self.clock || other.clock,
        }
    }
}

impl Condition {
    /// Static analysis of the inputs this condition touches.
    pub fn declared_reads(&self) -> Reads {
        match self {
            Condition::Always => Reads::default(),
            Condition::All(cs) | Condition::Any(cs) => cs
                .iter()
                .fold(Reads::default(), |r, c| r.union(c.declared_reads())),
            Condition::Not(c) => c.declared_reads(),
            Condition::TraitExists(_)
            | Condition::TraitEquals { .. }
            | Condition::AgeLt(_)
            | Condition::AgeGte(_) => Reads {
                profile: true,
                ..Default::default()
            },
            Condition::ContextEquals { .. } => Reads {
                context: true,
                ..Default::default()
            },
            Condition::TimeWithin { .. } => Reads {
                clock: true,
                ..Default::default()
            },
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            Condition::All(cs) | Condition::Any(cs) => {
                if cs.is_empty() {
                    return Err("all/any needs at least one operand".into());
                }
                cs.iter().try_for_each(Condition::validate)
            }
            Condition::Not(c) => c.validate(),
            Condition::TimeWithin { start, end } if start >= end => {
                Err(format!("time window [{start}, {end}) is empty"))
            }
            Condition::TraitExists(k)
            | Condition::TraitEquals { key: k, .. }
            | Condition::ContextEquals { key: k, .. }
                if k.is_empty() =>
            {
                Err("empty key".into())
            }
            _ => Ok(()),
        }
    }
}

pub struct EvalInput<'a> {
    pub user: &'a UserProfile,
    pub context: &'a BTreeMap<String, String>,
    pub now: Timestamp,
}

/// Evaluate without short-circuiting, so every referenced input is read
/// (and recorded in `reads`) regardless of operand order.
pub fn eval_condition_traced(
    cond: &Condition,
    input: &EvalInput<'_>,
    reads: &mut Reads,
) -> Result<bool, RuleError> {
    Ok(match cond {
        Condition::Always => true,
        Condition::All(cs) => {
            let results: Vec<Result<bool, RuleError>> = cs
                .iter()
                .map(|c| eval_condition_traced(c, input, reads))
                .collect();
            results
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .all(|b| b)
        }
        Condition::Any(cs) => {
            let results: Vec<Result<bool, RuleError>> = cs
                .iter()
                .map(|c| eval_condition_traced(c, input, reads))
                .collect();
            results
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .any(|b| b)
        }
        Condition::Not(c) => !eval_condition_traced(c, input, reads)?,
        Condition::TraitExists(k) => {
            reads.profile = true;
            input.user.traits.contains_key(k)
        }
        Condition::TraitEquals { key, value } => {
            reads.profile = true;
            input.user.traits.get(key) == Some(value)
        }
        Condition::AgeLt(n) => {
            reads.profile = true;
            input.user.age.is_none_or(|a| a < *n)
        }
        Condition::AgeGte(n) => {
            reads.profile = true;
            input.user.age.is_some_and(|a| a >= *n)
        }
        Condition::ContextEquals {
            key,
            value,
            required,
        } => {
            reads.context = true;
            match input.context.get(key) {
                Some(v) => v == value,
                None if *required => return Err(RuleError::MissingContextKey(key.clone())),
                None => false,
            }
        }
        Condition::TimeWithin { start, end } => {
            reads.clock = true;
            *start <= input.now && input.now < *end
        }
    })
}

pub fn eval_condition(
    cond: &Condition,
    user: &UserProfile,
    context: &BTreeMap<String, String>,
    now: Timestamp,
) -> Result<bool, RuleError> {
    eval_condition_traced(
        cond,
        &EvalInput { user, context, now },
        &mut Reads::default(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemPredicate {
    AnyItem,
    All(Vec<ItemPredicate>),
    Any(Vec<ItemPredicate>),
    Not(Box<ItemPredicate>),
    HasTag(String),
    InCategory(String),
    Seller(String),
    MarginAtLeast(f64),
    StockAtLeast(u64),
}

impl ItemPredicate {
    pub fn matches(&self, item: &ItemProfile) -> bool {
        match self {
            ItemPredicate::AnyItem => true,
            ItemPredicate::All(ps) => ps.iter().all(|p| p.matches(item)),
            ItemPredicate::Any(ps) => ps.iter().any(|p| p.matches(item)),
            ItemPredicate::Not(p) => !p.matches(item),
            ItemPredicate::HasTag(t) => item.has_tag(t),
            ItemPredicate::InCategory(c) => item.in_category(c),
            ItemPredicate::Seller(s) => &item.seller_id == s,
            ItemPredicate::MarginAtLeast(m) => item.margin >= *m,
            ItemPredicate::StockAtLeast(n) => item.stock >= *n,
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            ItemPredicate::All(ps) | ItemPredicate::Any(ps) => {
                if ps.is_empty() {
                    return Err("all/any needs at least one operand".into());
                }
                ps.iter().try_for_each(ItemPredicate::validate)
            }
            ItemPredicate::Not(p) => p.validate(),
            ItemPredicate::MarginAtLeast(m) if !m.is_finite() => {
                Err("margin_at_least must be finite".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Exclude,
    Boost { multiplier: f64 },
}

impl Action {
    fn order(&self) -> u8 {
        match self {
            Action::Exclude => 0,
            Action::Boost { .. } => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Action::Exclude => "EXCLUDE",
            Action::Boost { .. } => "BOOST",
        }
    }
}

/// Legal rules always run before merchant rules, whatever their priority.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleBand {
    Legal,
    #[default]
    Merchant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScopeRepr", into = "ScopeRepr")]
pub enum RuleScope {
    All,
    Frames(BTreeSet<String>),
}

impl Default for RuleScope {
    fn default() -> Self {
        RuleScope::All
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScopeRepr {
    Keyword(String),
    Frames(Vec<String>),
}

impl TryFrom<ScopeRepr> for RuleScope {
    type Error = String;

    fn try_from(r: ScopeRepr) -> Result<Self, String> {
        match r {
            ScopeRepr::Keyword(k) if k == "ALL" => Ok(RuleScope::All),
            ScopeRepr::Keyword(k) => Err(format!(
                "scope must be \"ALL\" or a list of frame ids, got {k:?}"
            )),
            ScopeRepr::Frames(f) => Ok(RuleScope::Frames(f.into_iter().collect())),
        }
    }
}

impl From<RuleScope> for ScopeRepr {
    fn from(s: RuleScope) -> Self {
        match s {
            RuleScope::All => ScopeRepr::Keyword("ALL".into()),
            RuleScope::Frames(f) => ScopeRepr::Frames(f.into_iter().collect()),
        }
    }
}

impl RuleScope {
    /// `frame_tags` are the frame id plus any scope tags the frame answers to.
    pub fn covers<'a>(&self, mut frame_tags: impl Iterator<Item = &'a str>) -> bool {
        match self {
            RuleScope::All => true,
            RuleScope::Frames(f) => frame_tags.any(|t| f.contains(t)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub rule_id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub band: RuleBand,
    #[serde(default)]
    pub scope: RuleScope,
    #[serde(default)]
    pub condition: Condition,
    pub target: ItemPredicate,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disclosure_text: Option<String>,
    #[serde(default)]
    pub priority: i32,
}

/// Validated rules in application order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

#[derive(Deserialize)]
struct RulesDocument {
    rules: Vec<serde_json::Value>,
}

fn rule_order(a: &Rule, b: &Rule) -> Ordering {
    a.band
        .cmp(&b.band)
        .then(a.priority.cmp(&b.priority))
        .then(a.action.order().cmp(&b.action.order()))
        .then_with(|| a.rule_id.cmp(&b.rule_id))
}

fn rule_id_hint(v: &serde_json::Value) -> String {
    v.get("rule_id")
        .and_then(|x| x.as_str())
        .unwrap_or("?")
        .to_string()
}

/// Validate every definition, reporting all problems.
pub fn check_rules(raw: &[serde_json::Value]) -> (Vec<Rule>, Vec<RuleError>) {
    let mut errors = Vec::new();
    let mut rules = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (index, v) in raw.iter().enumerate() {
        let rule: Rule = match serde_json::from_value(v.clone()) {
            Ok(r) => r,
            Err(e) => {
                errors.push(RuleError::MalformedPredicate {
                    index,
                    rule_id: rule_id_hint(v),
                    message: e.to_string(),
                });
                continue;
            }
        };
        if let Some(&first) = seen.get(&rule.rule_id) {
            errors.push(RuleError::DuplicateRuleId {
                index,
                first,
                rule_id: rule.rule_id.clone(),
            });
            continue;
        }
        seen.insert(rule.rule_id.clone(), index);
        let malformed = |message: String| RuleError::MalformedPredicate {
            index,
            rule_id: rule.rule_id.clone(),
            message,
        };
        if rule.rule_id.trim().is_empty() {
            errors.push(malformed("rule_id must be non-empty".into()));
            continue;
        }
        if let Err(m) = rule.condition.validate() {
            errors.push(malformed(format!("condition: {m}")));
            continue;
        }
        if let Err(m) = rule.target.validate() {
            errors.push(malformed(format!("target: {m}")));
            continue;
        }
        if let Action::Boost { multiplier } = rule.action {
            if !(multiplier.is_finite() && multiplier > 0.0) {
                errors.push(malformed(format!(
                    "BOOST multiplier must be finite and > 0, got {multiplier}"
                )));
                continue;
            }
            if rule
                .disclosure_text
                .as_deref()
                .is_none_or(|t| t.trim().is_empty())
            {
                errors.push(RuleError::MissingDisclosure {
                    index,
                    rule_id: rule.rule_id.clone(),
                });
                continue;
            }
        }
        rules.push(rule);
    }
    (rules, errors)
}

/// Compile definitions into a priority-sorted [`RuleSet`]; the first problem wins.
pub fn compile_rules(raw: &[serde_json::Value]) -> Result<RuleSet, RuleError> {
    let (mut rules, errors) = check_rules(raw);
    if let Some(e) = errors.into_iter().next() {
        return Err(e);
    }
    rules.sort_by(rule_order);
    Ok(RuleSet { rules })
}

/// Parse a rules document `{"rules": [...]}`.
pub fn parse_rules_document(text: &str) -> Result<Vec<serde_json::Value>, RuleError> {
    let doc: RulesDocument =
        serde_json::from_str(text).map_err(|e| RuleError::MalformedDocument(e.to_string()))?;
    Ok(doc.rules)
}

pub fn compile_rules_document(text: &str) -> Result<RuleSet, RuleError> {
    compile_rules(&parse_rules_document(text)?)
}

impl RuleSet {
    pub fn from_rules(rules: Vec<Rule>) -> Result<RuleSet, RuleError> {
        let raw: Vec<serde_json::Value> = rules
            .iter()
            .map(|r| serde_json::to_value(r).expect("rule serializes"))
            .collect();
        compile_rules(&raw)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, rule_id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.rule_id == rule_id)
    }

    /// Rules whose scope covers the given frame tags.
    pub fn in_scope<'s>(
        &'s self,
        frame_tags: &'s [&'s str],
    ) -> impl Iterator<Item = &'s Rule> + 's {
        self.rules
            .iter()
            .filter(move |r| r.scope.covers(frame_tags.iter().copied()))
    }

    /// A copy without the named rules.
    pub fn without(&self, rule_ids: &[&str]) -> RuleSet {
        RuleSet {
            rules: self
                .rules
                .iter()
                .filter(|r| !rule_ids.contains(&r.rule_id.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Merge with another set, re-sorting; fails on id collisions.
    pub fn merged(&self, other: &RuleSet) -> Result<RuleSet, RuleError> {
        RuleSet::from_rules(
            self.rules
                .iter()
                .chain(other.rules.iter())
                .cloned()
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: String,
    pub score: f64,
    #[serde(default)]
    pub boosted_by: BTreeSet<String>,
}

impl Candidate {
    pub fn new(item_id: &str, score: f64) -> Self {
        Candidate {
            item_id: item_id.to_string(),
            score,
            boosted_by: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEffect {
    pub item_id: String,
    pub score_before: f64,
    /// `None` when the item was removed.
    pub score_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedRule {
    pub rule_id: String,
    pub band: RuleBand,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disclosure_text: Option<String>,
    pub effects: Vec<ItemEffect>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleTrace {
    pub applied: Vec<AppliedRule>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RuleTrace {
    pub fn excluded_count(&self) -> usize {
        self.applied
            .iter()
            .flat_map(|a| &a.effects)
            .filter(|e| e.score_after.is_none())
            .count()
    }

    pub fn boosts(&self) -> impl Iterator<Item = &AppliedRule> {
        self.applied
            .iter()
            .filter(|a| matches!(a.action, Action::Boost { .. }))
    }

    /// Replay this trace over `input`: drop removed items, take the last
    /// recorded score for re-weighted ones, and re-sort.
    pub fn reconstruct(&self, input: &[Candidate]) -> Vec<Candidate> {
        let mut out: Vec<Candidate> = input.to_vec();
        for applied in &self.applied {
            for eff in &applied.effects {
                match eff.score_after {
                    None => out.retain(|c| c.item_id != eff.item_id),
                    Some(s) => {
                        if let Some(c) = out.iter_mut().find(|c| c.item_id == eff.item_id) {
                            c.score = s;
                            c.boosted_by.insert(applied.rule_id.clone());
                        }
                    }
                }
            }
        }
        sort_candidates(&mut out);
        out
    }
}

pub fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
}

pub struct RuleRequest<'a> {
    pub user: &'a UserProfile,
    pub context: &'a BTreeMap<String, String>,
    pub now: Timestamp,
    /// Frame id plus extra scope tags.
    pub frame_tags: &'a [&'a str],
}

/// Apply in-scope rules to `candidates`. Items missing from `catalog` match
/// no target. Conditions that fail on a missing required context key are
/// treated as satisfied for `EXCLUDE` and unsatisfied for `BOOST`.
///
/// Returns the re-sorted survivors, the trace, and what the conditions read.
pub fn apply_rules_traced(
    candidates: &[Candidate],
    req: &RuleRequest<'_>,
    catalog: &Catalog,
    rules: &RuleSet,
) -> (Vec<Candidate>, RuleTrace, Reads) {
    let mut out: Vec<Candidate> = candidates.to_vec();
    let mut trace = RuleTrace::default();
    let mut reads = Reads::default();
    let input = EvalInput {
        user: req.user,
        context: req.context,
        now: req.now,
    };
    for rule in rules.in_scope(req.frame_tags) {
        let matched = match eval_condition_traced(&rule.condition, &input, &mut reads) {
            Ok(b) => b,
            Err(e) => {
                let fail_safe = matches!(rule.action, Action::Exclude);
                trace.notes.push(format!(
                    "{}: {e}; treated as {}",
                    rule.rule_id,
                    if fail_safe { "matched" } else { "not matched" }
                ));
                fail_safe
            }
        };
        if !matched {
            continue;
        }
        let mut effects = Vec::new();
        match rule.action {
            Action::Exclude => {
                out.retain(|c| {
                    let hit = catalog
                        .get(&c.item_id)
                        .is_some_and(|p| rule.target.matches(p));
                    if hit {
                        effects.push(ItemEffect {
                            item_id: c.item_id.clone(),
                            score_before: c.score,
                            score_after: None,
                        });
                    }
                    !hit
                });
            }
            Action::Boost { multiplier } => {
                for c in out.iter_mut() {
                    if c.boosted_by.contains(&rule.rule_id) {
                        continue;
                    }
                    if catalog
                        .get(&c.item_id)
                        .is_some_and(|p| rule.target.matches(p))
                    {
                        let before = c.score;
                        c.score *= multiplier;
                        c.boosted_by.insert(rule.rule_id.clone());
                        effects.push(ItemEffect {
                            item_id: c.item_id.clone(),
                            score_before: before,
                            score_after: Some(c.score),
                        });
                    }
                }
            }
        }
        if !effects.is_empty() {
            trace.applied.push(AppliedRule {
                rule_id: rule.rule_id.clone(),
                band: rule.band,
                action: rule.action,
                disclosure_text: rule.disclosure_text.clone(),
                effects,
            });
        }
    }
    sort_candidates(&mut out);
    (out, trace, reads)
}

pub fn apply_rules(
    candidates: &[Candidate],
    req: &RuleRequest<'_>,
    catalog: &Catalog,
    rules: &RuleSet,
) -> (Vec<Candidate>, RuleTrace) {
    let (out, trace, _) = apply_rules_traced(candidates, req, catalog, rules);
    (out, trace)
}

/// Inputs the in-scope rules will read, by static analysis.
pub fn declared_rule_reads(rules: &RuleSet, frame_tags: &[&str]) -> Reads {
    rules
        .in_scope(frame_tags)
        .fold(Reads::default(), |r, rule| {
            r.union(rule.condition.declared_reads())
        })
}

/// Ids of items whose score was raised by at least one boost.
pub fn boosted_items(trace: &RuleTrace) -> HashSet<&str> {
    trace
        .boosts()
        .flat_map(|a| a.effects.iter().map(|e| e.item_id.as_str()))
        .collect()
}

/// The protective rules used as the default policy: no alcohol for minors
/// (legal band), and declared dietary preferences honoured.
pub fn protective_rules() -> RuleSet {
    let doc = serde_json::json!({ "rules": [
        {
            "rule_id": "legal-no-alcohol-for-minors",
            "description": "Alcohol is never recommended to minors or users of unknown age.",
            "band": "legal",
            "condition": { "age_lt": 18 },
            "target": { "has_tag": "contains_alcohol" },
            "action": { "type": "EXCLUDE" }
        },
        {
            "rule_id": "pref-vegetarian",
            "description": "Users who declared a vegetarian diet are not shown animal-derived products.",
            "condition": { "trait_exists": "vegetarian" },
            "target": { "has_tag": "animal_derived" },
            "action": { "type": "EXCLUDE" }
        },
        {
            "rule_id": "pref-low-sugar",
            "description": "Users avoiding sugar are not shown high-sugar products.",
            "condition": { "trait_exists": "low_sugar" },
            "target": { "has_tag": "high_sugar" },
            "action": { "type": "EXCLUDE" }
        }
    ]});
    compile_rules_document(&doc.to_string()).expect("built-in rules are valid")
}
