//! Agent telemetry events: the event model, trace-file parsing, verb
//! classification and subscription-based dispatch.
//!
//! A trace file is JSON Lines. The first line is a header
//! `{"ats_version":"1.0"}`; every following non-blank line is one [`Event`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ari::RiskTier;

pub const ATS_VERSION: &str = "1.0";

/// Payload keys that name the target of an action, in lookup order.
pub const TARGET_KEYS: [&str; 3] = ["tool", "resource", "endpoint"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("unknown verb `{0}`")]
    UnknownVerb(String),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: TelemetryError,
    },
    #[error("line 1: missing or invalid trace header (expected {{\"ats_version\":\"{ATS_VERSION}\"}})")]
    MissingHeader,
    #[error("line {line}: duplicate event_id `{event_id}`")]
    DuplicateEventId { line: usize, event_id: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Scalar payload value. Object and array values are rejected at parse time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Scalar {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Int(i) => Some(*i as f64),
            Scalar::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Scalar::Str(s) => Some(s),
            _ => None,
        }
    }

    /// Equality with numeric coercion (`5 == 5.0`).
    pub fn loosely_eq(&self, other: &Scalar) -> bool {
        match (self.as_f64(), other.as_f64()) {
            (Some(a), Some(b)) => a == b,
            _ => self == other,
        }
    }

    /// Stable string form used as a correlation key.
    pub fn key(&self) -> String {
        match self {
            Scalar::Bool(b) => b.to_string(),
            Scalar::Int(i) => i.to_string(),
            Scalar::Float(f) if f.fract() == 0.0 && f.abs() < 9.0e15 => (*f as i64).to_string(),
            Scalar::Float(f) => f.to_string(),
            Scalar::Str(s) => s.clone(),
        }
    }

    fn from_json(value: serde_json::Value) -> Option<Scalar> {
        match value {
            serde_json::Value::Bool(b) => Some(Scalar::Bool(b)),
            serde_json::Value::Number(n) => n
                .as_i64()
                .map(Scalar::Int)
                .or_else(|| n.as_f64().map(Scalar::Float)),
            serde_json::Value::String(s) => Some(Scalar::Str(s)),
            _ => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Str(s.to_string())
    }
}

impl From<String> for Scalar {
    fn from(s: String) -> Self {
        Scalar::Str(s)
    }
}

impl From<i64> for Scalar {
    fn from(i: i64) -> Self {
        Scalar::Int(i)
    }
}

impl From<f64> for Scalar {
    fn from(f: f64) -> Self {
        Scalar::Float(f)
    }
}

impl From<bool> for Scalar {
    fn from(b: bool) -> Self {
        Scalar::Bool(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventCategory {
    Cognitive,
    Action,
    Coordination,
    Extension,
}

impl EventCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            EventCategory::Cognitive => "cognitive",
            EventCategory::Action => "action",
            EventCategory::Coordination => "coordination",
            EventCategory::Extension => "extension",
        }
    }
}

impl fmt::Display for EventCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// First-segment prefix table. Anything else is unknown.
const PREFIX_TABLE: &[(&str, EventCategory)] = &[
    ("plan", EventCategory::Cognitive),
    ("goal", EventCategory::Cognitive),
    ("memory", EventCategory::Cognitive),
    ("tool", EventCategory::Action),
    ("api", EventCategory::Action),
    ("auth", EventCategory::Action),
    ("db", EventCategory::Action),
    ("approve", EventCategory::Action),
    ("agent", EventCategory::Coordination),
    ("subagent", EventCategory::Coordination),
    ("human", EventCategory::Coordination),
    ("x", EventCategory::Extension),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub category: EventCategory,
    /// True when the prefix was not in the table and lenient mode fell back to Action.
    pub defaulted: bool,
}

/// `[a-z][a-z0-9_]*(\.[a-z0-9_]+)+`
pub fn is_valid_verb(verb: &str) -> bool {
    let mut segments = verb.split('.');
    let Some(head) = segments.next() else {
        return false;
    };
    let mut head_chars = head.chars();
    match head_chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    if !head_chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
        return false;
    }
    let mut tail_count = 0;
    for seg in segments {
        if seg.is_empty()
            || !seg
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        {
            return false;
        }
        tail_count += 1;
    }
    tail_count >= 1
}

pub fn classify_verb(verb: &str, strict: bool) -> Result<Classification, TelemetryError> {
    let head = verb.split('.').next().unwrap_or_default();
    if let Some((_, category)) = PREFIX_TABLE.iter().find(|(p, _)| *p == head) {
        return Ok(Classification {
            category: *category,
            defaulted: false,
        });
    }
    if strict {
        return Err(TelemetryError::UnknownVerb(verb.to_string()));
    }
    Ok(Classification {
        category: EventCategory::Action,
        defaulted: true,
    })
}

/// One agent telemetry record.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub event_id: String,
    pub agent_id: String,
    pub session_id: String,
    pub timestamp_ms: i64,
    pub verb: String,
    pub category: EventCategory,
    pub risk_tier: RiskTier,
    /// Goal context. Maintained by the engine from prior `goal.set` events.
    pub goal_id: String,
    pub parent_agent_id: Option<String>,
    pub payload: BTreeMap<String, Scalar>,
}

impl Event {
    /// Ordering key inside the released stream.
    pub fn order_key(&self) -> (i64, &str) {
        (self.timestamp_ms, self.event_id.as_str())
    }

    pub fn payload_str(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(Scalar::as_str)
    }

    /// Target named by the payload (`tool`, `resource` or `endpoint`).
    pub fn target(&self) -> Option<String> {
        TARGET_KEYS
            .iter()
            .find_map(|k| self.payload.get(*k))
            .map(Scalar::key)
    }

    /// `verb` or `verb:target`, e.g. `tool.invoke:bank.transfer`.
    pub fn resource(&self) -> String {
        match self.target() {
            Some(t) => format!("{}:{}", self.verb, t),
            None => self.verb.clone(),
        }
    }

    pub fn to_json_line(&self) -> String {
        let wire = WireEventOut {
            event_id: &self.event_id,
            agent_id: &self.agent_id,
            session_id: &self.session_id,
            timestamp_ms: self.timestamp_ms,
            verb: &self.verb,
            risk_tier: self.risk_tier.value(),
            goal_id: if self.goal_id.is_empty() {
                None
            } else {
                Some(&self.goal_id)
            },
            parent_agent_id: self.parent_agent_id.as_deref(),
            payload: &self.payload,
        };
        serde_json::to_string(&wire).expect("event serialization is infallible")
    }
}

#[derive(Serialize)]
struct WireEventOut<'a> {
    event_id: &'a str,
    agent_id: &'a str,
    session_id: &'a str,
    timestamp_ms: i64,
    verb: &'a str,
    risk_tier: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    goal_id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    parent_agent_id: Option<&'a str>,
    payload: &'a BTreeMap<String, Scalar>,
}

#[derive(Deserialize)]
struct WireEventIn {
    event_id: Option<String>,
    agent_id: Option<String>,
    session_id: Option<String>,
    timestamp_ms: Option<i64>,
    verb: Option<String>,
    risk_tier: Option<i64>,
    #[serde(default)]
    goal_id: Option<String>,
    #[serde(default)]
    parent_agent_id: Option<String>,
    #[serde(default)]
    payload: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    pub strict_verbs: bool,
}

fn required<T>(field: Option<T>, name: &str) -> Result<T, TelemetryError> {
    field.ok_or_else(|| TelemetryError::SchemaViolation(format!("missing required field `{name}`")))
}

pub fn parse_event(line: &str, opts: &ParseOptions) -> Result<Event, TelemetryError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| TelemetryError::MalformedLine(e.to_string()))?;
    if !value.is_object() {
        return Err(TelemetryError::MalformedLine("expected a JSON object".into()));
    }
    let wire: WireEventIn = serde_json::from_value(value)
        .map_err(|e| TelemetryError::SchemaViolation(e.to_string()))?;

    let event_id = required(wire.event_id, "event_id")?;
    if event_id.is_empty() {
        return Err(TelemetryError::SchemaViolation("empty event_id".into()));
    }
    let agent_id = required(wire.agent_id, "agent_id")?;
    if agent_id.is_empty() {
        return Err(TelemetryError::SchemaViolation("empty agent_id".into()));
    }
    let session_id = required(wire.session_id, "session_id")?;
    let timestamp_ms = required(wire.timestamp_ms, "timestamp_ms")?;
    let verb = required(wire.verb, "verb")?;
    if !is_valid_verb(&verb) {
        return Err(TelemetryError::SchemaViolation(format!("invalid verb `{verb}`")));
    }
    let tier_raw = required(wire.risk_tier, "risk_tier")?;
    let risk_tier = u8::try_from(tier_raw)
        .ok()
        .and_then(RiskTier::from_value)
        .ok_or_else(|| {
            TelemetryError::SchemaViolation(format!("risk_tier {tier_raw} outside 1..=4"))
        })?;
    let category = classify_verb(&verb, opts.strict_verbs)?.category;

    let mut payload = BTreeMap::new();
    for (k, v) in wire.payload {
        let scalar = Scalar::from_json(v).ok_or_else(|| {
            TelemetryError::SchemaViolation(format!("payload key `{k}` is not a scalar"))
        })?;
        payload.insert(k, scalar);
    }

    Ok(Event {
        event_id,
        agent_id,
        session_id,
        timestamp_ms,
        verb,
        category,
        risk_tier,
        goal_id: wire.goal_id.unwrap_or_default(),
        parent_agent_id: wire.parent_agent_id,
        payload,
    })
}

pub fn header_line() -> String {
    format!("{{\"ats_version\":\"{ATS_VERSION}\"}}")
}

fn is_header(line: &str) -> bool {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("ats_version").and_then(|x| x.as_str()).map(|s| s == ATS_VERSION))
        .unwrap_or(false)
}

/// Reads a whole trace, enforcing the header and event_id uniqueness.
pub fn read_trace<R: BufRead>(reader: R, opts: &ParseOptions) -> Result<Vec<Event>, TraceError> {
    let mut events = Vec::new();
    let mut seen = HashSet::new();
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(TraceError::MissingHeader),
    };
    if !is_header(header.trim()) {
        return Err(TraceError::MissingHeader);
    }
    for (idx, line) in lines {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let event = parse_event(trimmed, opts).map_err(|source| TraceError::Line {
            line: line_no,
            source,
        })?;
        if !seen.insert(event.event_id.clone()) {
            return Err(TraceError::DuplicateEventId {
                line: line_no,
                event_id: event.event_id,
            });
        }
        events.push(event);
    }
    Ok(events)
}

pub fn write_trace<W: std::io::Write>(mut out: W, events: &[Event]) -> std::io::Result<()> {
    writeln!(out, "{}", header_line())?;
    for e in events {
        writeln!(out, "{}", e.to_json_line())?;
    }
    Ok(())
}

/// Digest over the event ids in arrival order; ties a report to its trace.
pub fn trace_digest<'a, I: IntoIterator<Item = &'a str>>(ids: I) -> String {
    let mut hasher = Sha256::new();
    for id in ids {
        hasher.update(id.as_bytes());
        hasher.update(b"\n");
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubscriptionFilter {
    Any,
    Categories(BTreeSet<EventCategory>),
    VerbPrefixes(BTreeSet<String>),
}

impl SubscriptionFilter {
    pub fn matches(&self, event: &Event) -> bool {
        match self {
            SubscriptionFilter::Any => true,
            SubscriptionFilter::Categories(set) => set.contains(&event.category),
            SubscriptionFilter::VerbPrefixes(set) => {
                set.iter().any(|p| event.verb.starts_with(p.as_str()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub module_id: String,
    pub filter: SubscriptionFilter,
    pub priority: i32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("module `{0}` subscribed more than once")]
    DuplicateModule(String),
}

/// Immutable routing table; dispatch order is (priority, module_id).
#[derive(Debug, Clone, Default)]
pub struct SubscriptionRegistry {
    entries: Vec<Subscription>,
}

impl SubscriptionRegistry {
    pub fn new(mut entries: Vec<Subscription>) -> Result<Self, RegistryError> {
        entries.sort_by(|a, b| {
            a.priority
                .cmp(&b.priority)
                .then_with(|| a.module_id.cmp(&b.module_id))
        });
        let mut ids = HashSet::new();
        for e in &entries {
            if !ids.insert(e.module_id.as_str()) {
                return Err(RegistryError::DuplicateModule(e.module_id.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Subscription] {
        &self.entries
    }

    pub fn dispatch<'r, 'e>(&'r self, event: &'e Event) -> Vec<(&'r str, &'e Event)> {
        self.entries
            .iter()
            .filter(|s| s.filter.matches(event))
            .map(|s| (s.module_id.as_str(), event))
            .collect()
    }
}
