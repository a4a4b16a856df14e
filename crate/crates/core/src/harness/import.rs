//! Best-effort import of externally produced agent logs (JSON Lines).
//!
//! Records are mapped field by field onto the trace format; anything that
//! cannot be mapped is reported per line and skipped.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::Serialize;
use serde_json::Value;

use crate::ari::RiskTier;
use crate::telemetry::{classify_verb, is_valid_verb, Event, Scalar};

const ID_KEYS: &[&str] = &["event_id", "id", "step_id"];
const AGENT_KEYS: &[&str] = &["agent_id", "agent", "agent_name"];
const SESSION_KEYS: &[&str] = &["session_id", "session", "trace_id", "scenario_id"];
const TS_KEYS: &[&str] = &["timestamp_ms", "timestamp", "ts", "time"];
const VERB_KEYS: &[&str] = &["verb", "event_type", "type", "action"];
const PAYLOAD_KEYS: &[&str] = &["payload", "details", "data", "metadata"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImportIssue {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ImportOutcome {
    #[serde(skip)]
    pub events: Vec<Event>,
    pub imported: usize,
    pub issues: Vec<ImportIssue>,
}

fn first<'a>(obj: &'a serde_json::Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| obj.get(*k)).filter(|v| !v.is_null())
}

fn as_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Milliseconds from an integer, or from an RFC 3339 UTC timestamp
/// (`YYYY-MM-DDTHH:MM:SS[.fff]Z`).
fn parse_ts(v: &Value) -> Option<i64> {
    if let Some(n) = v.as_i64() {
        return Some(n);
    }
    if let Some(f) = v.as_f64() {
        return Some(f as i64);
    }
    let s = v.as_str()?;
    if let Ok(n) = s.parse::<i64>() {
        return Some(n);
    }
    let s = s.strip_suffix('Z').or_else(|| s.strip_suffix("+00:00"))?;
    let (date, time) = s.split_once('T')?;
    let mut d = date.split('-').map(|x| x.parse::<i64>().ok());
    let (y, m, day) = (d.next()??, d.next()??, d.next()??);
    let (hms, frac) = time.split_once('.').unwrap_or((time, "0"));
    let mut t = hms.split(':').map(|x| x.parse::<i64>().ok());
    let (hh, mm, ss) = (t.next()??, t.next()??, t.next()??);
    let ms: i64 = format!("{frac:0<3}")[..3].parse().ok()?;
    if !(1..=12).contains(&m) || !(1..=31).contains(&day) || hh > 23 || mm > 59 || ss > 60 {
        return None;
    }
    // days from civil (proleptic Gregorian)
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + day - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    let days = era * 146_097 + doe - 719_468;
    Some(((days * 24 + hh) * 60 + mm) * 60_000 + ss * 1000 + ms)
}

/// `ToolCall` / `tool_call` / `tool-call` → `tool.call`.
fn normalize_verb(raw: &str) -> String {
    let mut out = String::new();
    let mut prev_lower = false;
    for c in raw.chars() {
        if c.is_ascii_uppercase() {
            if prev_lower {
                out.push('.');
            }
            out.push(c.to_ascii_lowercase());
            prev_lower = false;
        } else if c == '_' || c == '-' || c == ' ' || c == '.' {
            if !out.ends_with('.') && !out.is_empty() {
                out.push('.');
            }
            prev_lower = false;
        } else {
            out.push(c);
            prev_lower = c.is_ascii_lowercase() || c.is_ascii_digit();
        }
    }
    let out = out.trim_matches('.').to_string();
    if out.contains('.') {
        out
    } else {
        format!("x.{out}")
    }
}

fn to_scalar(v: &Value) -> Option<Scalar> {
    match v {
        Value::Bool(b) => Some(Scalar::Bool(*b)),
        Value::Number(n) => n.as_i64().map(Scalar::Int).or_else(|| n.as_f64().map(Scalar::Float)),
        Value::String(s) => Some(Scalar::Str(s.clone())),
        _ => None,
    }
}

pub fn import_jsonl<R: BufRead>(reader: R) -> ImportOutcome {
    let mut out = ImportOutcome::default();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let issue = |message: String| ImportIssue { line: n, message };
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                out.issues.push(issue(e.to_string()));
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let obj = match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(o)) => o,
            Ok(_) => {
                out.issues.push(issue("record is not a JSON object".into()));
                continue;
            }
            Err(e) => {
                out.issues.push(issue(format!("invalid JSON: {e}")));
                continue;
            }
        };
        let Some(agent) = first(&obj, AGENT_KEYS).and_then(as_text) else {
            out.issues.push(issue("no agent id".into()));
            continue;
        };
        let Some(ts) = first(&obj, TS_KEYS).and_then(parse_ts) else {
            out.issues.push(issue("no usable timestamp".into()));
            continue;
        };
        let Some(raw_verb) = first(&obj, VERB_KEYS).and_then(as_text) else {
            out.issues.push(issue("no event type".into()));
            continue;
        };
        let verb = normalize_verb(&raw_verb);
        if !is_valid_verb(&verb) {
            out.issues.push(issue(format!("event type `{raw_verb}` does not map to a verb")));
            continue;
        }
        let id = first(&obj, ID_KEYS)
            .and_then(as_text)
            .unwrap_or_else(|| format!("import-{n:06}"));
        if !seen.insert(id.clone()) {
            out.issues.push(issue(format!("duplicate event id `{id}`")));
            continue;
        }
        let mut payload = BTreeMap::new();
        if let Some(Value::Object(p)) = first(&obj, PAYLOAD_KEYS) {
            for (k, v) in p {
                if let Some(s) = to_scalar(v) {
                    payload.insert(k.clone(), s);
                }
            }
        }
        let tier = obj
            .get("risk_tier")
            .and_then(|v| v.as_u64())
            .and_then(|v| RiskTier::from_value(v as u8))
            .unwrap_or(RiskTier::HighlyCapable);
        out.events.push(Event {
            event_id: id,
            agent_id: agent.clone(),
            session_id: first(&obj, SESSION_KEYS).and_then(as_text).unwrap_or_else(|| format!("sess-{agent}")),
            timestamp_ms: ts,
            category: classify_verb(&verb, false).expect("lenient").category,
            verb,
            risk_tier: tier,
            goal_id: String::new(),
            parent_agent_id: obj.get("parent_agent_id").and_then(as_text),
            payload,
        });
        out.imported += 1;
    }
    out.events.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    out
}
