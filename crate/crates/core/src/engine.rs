//! Replay pipeline: reorder buffer, subscription dispatch, monitors and
//! containment, producing a deterministic [`Report`].
//!
//! Per released event the order is fixed: effective tier and session
//! bookkeeping, delegation links, containment effects, then dispatch to
//! `authz` (10), `conformance` (20), `drift` (30) and `lifecycle` (40).
//! Signals raised by one event are scored together after dispatch, so their
//! effects land before the next event of any agent.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::ari::RiskTier;
use crate::authz::{Authz, DelegationAudit, Decision, PermissionUpdate, ReasonCode, ShiftTrigger, Verdict};
use crate::conformance::{ConformanceEngine, ProcessOutput, ProgressRecord, ReorderBuffer, RuleScope, Violation};
use crate::containment::{
    score_signals, ContainmentController, ContainmentLevel, EscalationEvent, Signal, SignalKind,
};
use crate::drift::{DriftMonitor, DriftOutput, DriftSignal, GoalShiftVerdict, Severity, ShiftVerdict};
use crate::policy::Policy;
use crate::telemetry::{
    parse_event, trace_digest, Event, EventCategory, ParseOptions, Subscription, SubscriptionFilter,
    SubscriptionRegistry, TelemetryError,
};

/// Events remembered per agent for causal-chain lookups.
const HISTORY_PER_AGENT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnforcementMode {
    /// Record verdicts and effects; every event still reaches every monitor.
    #[default]
    Observe,
    /// Denied, blocked and isolated events are withheld from the monitors.
    Enforce,
}

impl EnforcementMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EnforcementMode::Observe => "observe",
            EnforcementMode::Enforce => "enforce",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "observe" => Some(Self::Observe),
            "enforce" => Some(Self::Enforce),
            _ => None,
        }
    }
}

/// Run-level overrides on top of the policy's `[engine]` section.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EngineOptions {
    pub mode: EnforcementMode,
    pub reorder_window_ms: Option<i64>,
    pub strict_verbs: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionKind {
    Violation,
    PolicyDeny,
    DelegationDenied,
    DriftAlert,
    GoalShiftFlag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainLink {
    pub id: String,
    pub timestamp_ms: i64,
}

/// Reasoning → action → violating event → governance response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalChain {
    pub cognitive: Option<ChainLink>,
    pub action: Option<ChainLink>,
    pub violating: ChainLink,
    pub effect: Option<ChainLink>,
    /// All four links present and in timestamp order.
    pub complete: bool,
}

impl CausalChain {
    fn refresh(&mut self) {
        self.complete = match (&self.cognitive, &self.action, &self.effect) {
            (Some(c), Some(a), Some(e)) => {
                c.timestamp_ms <= a.timestamp_ms
                    && a.timestamp_ms <= self.violating.timestamp_ms
                    && self.violating.timestamp_ms <= e.timestamp_ms
            }
            _ => false,
        };
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub detection_id: String,
    pub kind: DetectionKind,
    pub agent_id: String,
    /// Violation id, denied event id, drift signal id or verdict id.
    pub source_id: String,
    pub rule_id: Option<String>,
    pub event_ids: Vec<String>,
    pub detected_at_ms: i64,
    pub causal_chain: CausalChain,
}

/// One containment scoring of an agent's signal batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub assessment_id: String,
    pub agent_id: String,
    pub tier: RiskTier,
    pub signals: Vec<Signal>,
    pub score: f64,
    pub level_before: ContainmentLevel,
    pub level_after: ContainmentLevel,
    pub at_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationRecord {
    pub escalation_id: String,
    #[serde(flatten)]
    pub event: EscalationEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    /// `plan.*` event of a monitored agent; a human checkpoint is advised.
    PlanCheckpoint,
    /// New goal or plan rejected under PlanningIntervention.
    PlanningBlocked,
    /// Write replaced by its read-only variant.
    ReadOnlySubstituted,
    /// Isolated agent's call answered with an inert response.
    SimulatedResponse,
    /// Critical violation drove the agent into isolation.
    EmergencyTermination,
    /// Event withheld from the monitors (Enforce mode).
    Suppressed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub intervention_id: String,
    pub agent_id: String,
    pub event_id: String,
    pub kind: InterventionKind,
    pub level: ContainmentLevel,
    pub detail: String,
    pub at_ms: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub trace_digest: String,
    pub mode: EnforcementMode,
    pub policy_source: String,
    pub events_received: u64,
    pub events_processed: u64,
    pub events_suppressed: u64,
    pub late_event_ids: Vec<String>,
    pub enhanced_monitoring_events: u64,
    pub predicate_evaluations: u64,
    pub detections: Vec<Detection>,
    pub violations: Vec<Violation>,
    pub warnings: Vec<ProgressRecord>,
    pub decisions: Vec<Decision>,
    pub delegations: Vec<DelegationAudit>,
    pub permission_updates: Vec<PermissionUpdate>,
    pub drift_signals: Vec<DriftSignal>,
    pub goal_shift_verdicts: Vec<GoalShiftVerdict>,
    pub assessments: Vec<Assessment>,
    pub escalations: Vec<EscalationRecord>,
    pub interventions: Vec<Intervention>,
    pub final_levels: BTreeMap<String, ContainmentLevel>,
    pub diagnostics: Vec<String>,
}

impl Report {
    pub fn has_detections(&self) -> bool {
        !self.detections.is_empty()
    }

    /// Every record as one JSON line, sorted by (timestamp, event id, kind).
    pub fn audit_lines(&self) -> Vec<String> {
        self.rows().into_iter().map(|r| r.3).collect()
    }

    /// The audit lines of one record kind (`violation`, `escalation`, ...).
    pub fn log_lines(&self, kind: &str) -> Vec<String> {
        self.rows().into_iter().filter(|r| r.2 == kind).map(|r| r.3).collect()
    }

    fn rows(&self) -> Vec<(i64, String, &'static str, String)> {
        let mut rows: Vec<(i64, String, &'static str, String)> = Vec::new();
        fn push<T: Serialize>(rows: &mut Vec<(i64, String, &'static str, String)>, ts: i64, id: &str, kind: &'static str, v: &T) {
            let mut value = serde_json::to_value(v).expect("records serialize");
            if let serde_json::Value::Object(m) = &mut value {
                m.insert("record".into(), kind.into());
            }
            rows.push((ts, id.to_string(), kind, value.to_string()));
        }
        for d in &self.decisions {
            push(&mut rows, d.evaluated_at_ms, &d.event_id, "decision", d);
        }
        for v in &self.violations {
            let last = v.triggering_event_ids.last().map(String::as_str).unwrap_or_default();
            push(&mut rows, v.detected_at_ms, last, "violation", v);
        }
        for d in &self.detections {
            push(&mut rows, d.detected_at_ms, &d.causal_chain.violating.id, "detection", d);
        }
        for w in &self.warnings {
            push(&mut rows, w.timestamp_ms, &w.event_id, "warning", w);
        }
        for s in &self.drift_signals {
            push(&mut rows, s.emitted_at_ms, &s.window_last, "drift_signal", s);
        }
        for g in &self.goal_shift_verdicts {
            let last = g.window_event_ids.last().map(String::as_str).unwrap_or_default();
            push(&mut rows, g.decided_at_ms, last, "goal_shift", g);
        }
        for a in &self.assessments {
            push(&mut rows, a.at_ms, &a.assessment_id, "assessment", a);
        }
        for e in &self.escalations {
            push(&mut rows, e.event.at_ms, &e.escalation_id, "escalation", e);
        }
        for i in &self.interventions {
            push(&mut rows, i.at_ms, &i.event_id, "intervention", i);
        }
        for d in &self.delegations {
            push(&mut rows, d.at_ms, &d.child, "delegation", d);
        }
        rows.sort_by(|a, b| (a.0, &a.1, a.2).cmp(&(b.0, &b.1, b.2)));
        rows
    }
}

#[derive(Debug, Clone)]
struct Seen {
    event_id: String,
    ts: i64,
    category: EventCategory,
}

/// Signal plus the detections whose effect record it will produce.
#[derive(Debug, Default)]
struct SignalBatch {
    per_agent: BTreeMap<String, Vec<(Signal, Option<usize>)>>,
    joint: Vec<(Vec<String>, Signal, Option<usize>)>,
}

impl SignalBatch {
    fn add(&mut self, agent: &str, signal: Signal, detection: Option<usize>) {
        self.per_agent.entry(agent.to_string()).or_default().push((signal, detection));
    }

    fn is_empty(&self) -> bool {
        self.per_agent.is_empty() && self.joint.is_empty()
    }
}

pub struct Engine {
    policy: Policy,
    opts: EngineOptions,
    parse_opts: ParseOptions,
    registry: SubscriptionRegistry,
    buffer: ReorderBuffer,
    conformance: ConformanceEngine,
    authz: Authz,
    drift: DriftMonitor,
    containment: ContainmentController,
    sessions: BTreeMap<String, String>,
    goals: BTreeMap<String, String>,
    history: BTreeMap<String, VecDeque<Seen>>,
    arrival_ids: Vec<String>,
    report: Report,
}

impl Engine {
    pub fn new(policy: Policy, opts: EngineOptions) -> Self {
        let window = opts.reorder_window_ms.unwrap_or(policy.doc.engine.reorder_window_ms);
        let strict = opts.strict_verbs.unwrap_or(policy.doc.engine.strict_verbs);
        let registry = SubscriptionRegistry::new(vec![
            Subscription {
                module_id: "authz".into(),
                filter: SubscriptionFilter::Categories([EventCategory::Action, EventCategory::Coordination].into()),
                priority: 10,
            },
            Subscription {
                module_id: "conformance".into(),
                filter: SubscriptionFilter::Any,
                priority: 20,
            },
            Subscription {
                module_id: "drift".into(),
                filter: SubscriptionFilter::Any,
                priority: 30,
            },
            Subscription {
                module_id: "lifecycle".into(),
                filter: SubscriptionFilter::VerbPrefixes(
                    ["goal.set", "agent.session.end", "human.release"].map(String::from).into(),
                ),
                priority: 40,
            },
        ])
        .expect("module ids are distinct");
        let doc = &policy.doc;
        let authz = Authz::new(
            doc.authz.clone(),
            doc.permissions.clone(),
            doc.roles.clone(),
            doc.authority_matrix.clone(),
        );
        let report = Report {
            mode: opts.mode,
            policy_source: policy.source.clone(),
            ..Default::default()
        };
        Self {
            conformance: ConformanceEngine::new(policy.rules.clone()),
            drift: DriftMonitor::new(doc.drift.clone()),
            containment: ContainmentController::new(policy.containment_config()),
            buffer: ReorderBuffer::new(window),
            parse_opts: ParseOptions { strict_verbs: strict },
            registry,
            authz,
            policy,
            opts,
            sessions: BTreeMap::new(),
            goals: BTreeMap::new(),
            history: BTreeMap::new(),
            arrival_ids: Vec::new(),
            report,
        }
    }

    pub fn parse_options(&self) -> &ParseOptions {
        &self.parse_opts
    }

    pub fn drift(&self) -> &DriftMonitor {
        &self.drift
    }

    pub fn drift_mut(&mut self) -> &mut DriftMonitor {
        &mut self.drift
    }

    pub fn authz(&self) -> &Authz {
        &self.authz
    }

    pub fn containment(&self) -> &ContainmentController {
        &self.containment
    }

    pub fn conformance(&self) -> &ConformanceEngine {
        &self.conformance
    }

    /// Parses one JSONL event line and pushes it.
    pub fn push_line(&mut self, line: &str) -> Result<(), TelemetryError> {
        let e = parse_event(line, &self.parse_opts)?;
        self.push(e);
        Ok(())
    }

    /// Accepts one event in arrival order.
    pub fn push(&mut self, event: Event) {
        self.report.events_received += 1;
        self.arrival_ids.push(event.event_id.clone());
        for e in self.buffer.push(event) {
            self.process(e);
        }
        if let Some(frontier) = self.buffer.frontier_ms() {
            self.expire(frontier);
        }
    }

    /// Drains the buffer, fires outstanding deadlines and returns the report.
    pub fn finish(mut self) -> Report {
        for e in self.buffer.flush() {
            self.process(e);
        }
        self.expire(i64::MAX);
        let mut r = std::mem::take(&mut self.report);
        r.trace_digest = trace_digest(self.arrival_ids.iter().map(String::as_str));
        r.late_event_ids = self.buffer.late_event_ids().to_vec();
        r.predicate_evaluations = self.conformance.total_evaluations();
        r.delegations = self.authz.audit().to_vec();
        r.final_levels = self
            .containment
            .levels()
            .iter()
            .filter(|(_, l)| **l > ContainmentLevel::None)
            .map(|(a, l)| (a.clone(), *l))
            .collect();
        for d in &mut r.detections {
            d.causal_chain.refresh();
        }
        r.detections
            .sort_by(|a, b| (a.detected_at_ms, &a.causal_chain.violating.id, a.kind, &a.detection_id).cmp(&(
                b.detected_at_ms,
                &b.causal_chain.violating.id,
                b.kind,
                &b.detection_id,
            )));
        r.violations.sort_by(|a, b| (a.detected_at_ms, &a.violation_id).cmp(&(b.detected_at_ms, &b.violation_id)));
        r.decisions.sort_by(|a, b| (a.evaluated_at_ms, &a.event_id).cmp(&(b.evaluated_at_ms, &b.event_id)));
        r
    }

    fn expire(&mut self, watermark: i64) {
        let expired = self.conformance.expire_timeouts(watermark);
        if expired.is_empty() {
            return;
        }
        // one batch per deadline instant, in order
        let mut by_time: BTreeMap<i64, Vec<Violation>> = BTreeMap::new();
        for v in expired {
            by_time.entry(v.detected_at_ms).or_default().push(v);
        }
        for (at, vs) in by_time {
            let mut batch = SignalBatch::default();
            self.on_violations(vs, &mut batch);
            self.apply_batch(batch, at, None);
        }
    }

    fn remember(&mut self, e: &Event) {
        let h = self.history.entry(e.agent_id.clone()).or_default();
        if h.len() == HISTORY_PER_AGENT {
            h.pop_front();
        }
        h.push_back(Seen {
            event_id: e.event_id.clone(),
            ts: e.timestamp_ms,
            category: e.category,
        });
    }

    /// Chain for evidence `ids` of `agent`: first Action among them, the last
    /// Cognitive event of the agent at or before it, and the last id.
    fn chain_for(&self, agent: &str, ids: &[String], violating_ts: i64) -> CausalChain {
        let empty = VecDeque::new();
        let h = self.history.get(agent).unwrap_or(&empty);
        let find = |id: &str| h.iter().rev().find(|s| s.event_id == id);
        let action = ids
            .iter()
            .filter_map(|id| find(id))
            .find(|s| s.category == EventCategory::Action);
        let cognitive = action.and_then(|a| {
            h.iter()
                .rev()
                .filter(|s| s.category == EventCategory::Cognitive)
                .find(|s| (s.ts, s.event_id.as_str()) <= (a.ts, a.event_id.as_str()))
        });
        let last = ids.last().cloned().unwrap_or_default();
        let violating_ts = find(&last).map_or(violating_ts, |s| s.ts);
        let link = |s: &Seen| ChainLink {
            id: s.event_id.clone(),
            timestamp_ms: s.ts,
        };
        CausalChain {
            cognitive: cognitive.map(link),
            action: action.map(link),
            violating: ChainLink {
                id: last,
                timestamp_ms: violating_ts,
            },
            effect: None,
            complete: false,
        }
    }

    fn add_detection(
        &mut self,
        kind: DetectionKind,
        agent: &str,
        source_id: &str,
        rule_id: Option<String>,
        event_ids: Vec<String>,
        at_ms: i64,
    ) -> usize {
        let chain = self.chain_for(agent, &event_ids, at_ms);
        let idx = self.report.detections.len();
        self.report.detections.push(Detection {
            detection_id: format!("D{:06}", idx + 1),
            kind,
            agent_id: agent.to_string(),
            source_id: source_id.to_string(),
            rule_id,
            event_ids,
            detected_at_ms: at_ms,
            causal_chain: chain,
        });
        idx
    }

    fn intervene(&mut self, e: &Event, kind: InterventionKind, detail: String) {
        let n = self.report.interventions.len() + 1;
        self.report.interventions.push(Intervention {
            intervention_id: format!("I{n:06}"),
            agent_id: e.agent_id.clone(),
            event_id: e.event_id.clone(),
            kind,
            level: self.containment.level(&e.agent_id),
            detail,
            at_ms: e.timestamp_ms,
        });
    }

    fn process(&mut self, mut e: Event) {
        self.report.events_processed += 1;
        let agent = e.agent_id.clone();
        let ts = e.timestamp_ms;

        let tier = self.policy.tier_for(&agent, ts).unwrap_or(e.risk_tier);
        e.risk_tier = tier;
        if let Some(prev) = self.sessions.get(&agent) {
            if *prev != e.session_id {
                self.conformance.end_session(&agent);
                self.goals.remove(&agent);
                if let Some(ctx) = self.authz.context_mut(&agent) {
                    ctx.session_id = e.session_id.clone();
                    ctx.goal_id.clear();
                }
            }
        }
        self.sessions.insert(agent.clone(), e.session_id.clone());
        let ctx = self.authz.ensure_agent(&agent, &e.session_id, tier);
        if ctx.risk_tier != tier {
            ctx.risk_tier = tier;
            let ups = self.authz.on_context_shift(&agent, ShiftTrigger::TierChange);
            self.report.permission_updates.extend(ups);
        }
        e.goal_id = self.goals.get(&agent).cloned().unwrap_or_default();

        if let Some(parent) = e.parent_agent_id.clone() {
            self.link(&parent, &agent, ts);
        }
        self.remember(&e);

        let level = self.containment.level(&agent);
        let enforce = self.opts.mode == EnforcementMode::Enforce;
        let mut suppressed = false;
        let mut goal_blocked = false;
        if level >= ContainmentLevel::Monitoring {
            self.report.enhanced_monitoring_events += 1;
        }
        let planning = e.verb == "goal.set" || e.verb == "plan.start";
        if level >= ContainmentLevel::PlanningIntervention && planning {
            let detail = if enforce { "rejected" } else { "would be rejected (observe mode)" };
            self.intervene(&e, InterventionKind::PlanningBlocked, format!("{} {detail}", e.verb));
            if enforce {
                suppressed = true;
                goal_blocked = true;
            }
        } else if level >= ContainmentLevel::Monitoring && e.verb.starts_with("plan.") {
            self.intervene(&e, InterventionKind::PlanCheckpoint, "human checkpoint advised".into());
        }

        let mut batch = SignalBatch::default();
        let modules: Vec<String> = self.registry.dispatch(&e).into_iter().map(|(m, _)| m.to_string()).collect();
        for module in modules {
            match module.as_str() {
                "authz" => self.authz_stage(&e, enforce, &mut suppressed, &mut batch),
                "conformance" if !suppressed => {
                    let group = self.authz.graph().group_root(&agent);
                    let out = self.conformance.process(&e, &group);
                    self.on_conformance(out, &mut batch);
                }
                "drift" if !suppressed => {
                    let out = self.drift.observe(&e);
                    self.on_drift(out, &mut batch);
                }
                "lifecycle" => self.lifecycle_stage(&e, goal_blocked, &mut batch),
                _ => {}
            }
        }
        if suppressed {
            self.report.events_suppressed += 1;
            self.intervene(&e, InterventionKind::Suppressed, "withheld from monitors".into());
        }
        if !batch.is_empty() {
            self.apply_batch(batch, ts, Some(&e));
        }
    }

    fn link(&mut self, parent: &str, child: &str, ts: i64) {
        match self.authz.link(parent, child) {
            Ok(true) => {
                if let Some(esc) = self.containment.on_child_linked(parent, child, ts) {
                    self.record_escalations(vec![esc]);
                }
            }
            Ok(false) => {}
            Err(err) => self.report.diagnostics.push(format!("link ignored: {err}")),
        }
    }

    fn authz_stage(&mut self, e: &Event, enforce: bool, suppressed: &mut bool, batch: &mut SignalBatch) {
        if e.category == EventCategory::Action {
            let decision = match self.authz.evaluate(e) {
                Ok(d) => d,
                Err(err) => {
                    self.report.diagnostics.push(format!("{}: {err}", e.event_id));
                    return;
                }
            };
            if let Some(burst) = self.authz.note_decision(&decision) {
                let id = format!("burst/{}/{}", burst.agent_id, e.event_id);
                batch.add(&e.agent_id, Signal::new(SignalKind::AuthzDenialBurst, id), None);
            }
            match (decision.verdict, decision.reason) {
                (Verdict::Deny, ReasonCode::Isolated) => {
                    if enforce {
                        *suppressed = true;
                        self.intervene(e, InterventionKind::SimulatedResponse, format!("inert response for `{}`", decision.resource));
                    }
                }
                (Verdict::Deny, reason) => {
                    if reason != ReasonCode::ToolRestricted {
                        let idx = self.add_detection(
                            DetectionKind::PolicyDeny,
                            &e.agent_id,
                            &e.event_id,
                            None,
                            vec![e.event_id.clone()],
                            e.timestamp_ms,
                        );
                        self.report.detections[idx].causal_chain.effect = Some(ChainLink {
                            id: format!("decision/{}", e.event_id),
                            timestamp_ms: e.timestamp_ms,
                        });
                    }
                    if enforce {
                        *suppressed = true;
                    }
                }
                (Verdict::AllowReadOnly, ReasonCode::ReadOnlyVariant) => {
                    let v = decision.read_only_variant.clone().unwrap_or_default();
                    self.intervene(e, InterventionKind::ReadOnlySubstituted, format!("`{}` served as `{v}`", decision.resource));
                }
                _ => {}
            }
            self.report.decisions.push(decision);
        }
        if e.verb == "subagent.spawn" {
            self.spawn(e, enforce, suppressed);
        }
    }

    fn spawn(&mut self, e: &Event, enforce: bool, suppressed: &mut bool) {
        let Some(child) = e.payload_str("child").map(str::to_string) else {
            self.report.diagnostics.push(format!("{}: subagent.spawn without `child`", e.event_id));
            return;
        };
        let grants: Vec<String> = e
            .payload_str("grants")
            .unwrap_or_default()
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if grants.is_empty() {
            self.link(&e.agent_id, &child, e.timestamp_ms);
            return;
        }
        let expires = e.payload.get("expires_at_ms").and_then(|v| v.as_f64()).map(|v| v as i64);
        let newly_linked = !self.authz.graph().children(&e.agent_id).contains(&child);
        match self.authz.record_delegation(&e.agent_id, &child, &grants, expires, e.timestamp_ms) {
            Ok(_) => {
                if newly_linked {
                    if let Some(esc) = self.containment.on_child_linked(&e.agent_id, &child, e.timestamp_ms) {
                        self.record_escalations(vec![esc]);
                    }
                }
            }
            Err(err) => {
                let idx = self.add_detection(
                    DetectionKind::DelegationDenied,
                    &e.agent_id,
                    &e.event_id,
                    None,
                    vec![e.event_id.clone()],
                    e.timestamp_ms,
                );
                // a spawn is a coordination event; the request itself is the action
                let chain = &mut self.report.detections[idx].causal_chain;
                chain.action = Some(chain.violating.clone());
                let action_ts = e.timestamp_ms;
                let cognitive = self.history.get(&e.agent_id).and_then(|h| {
                    h.iter()
                        .rev()
                        .find(|s| s.category == EventCategory::Cognitive && s.ts <= action_ts)
                        .map(|s| ChainLink {
                            id: s.event_id.clone(),
                            timestamp_ms: s.ts,
                        })
                });
                let chain = &mut self.report.detections[idx].causal_chain;
                chain.cognitive = cognitive;
                chain.effect = Some(ChainLink {
                    id: format!("delegation/{}", e.event_id),
                    timestamp_ms: e.timestamp_ms,
                });
                self.report.diagnostics.push(format!("{}: {err}", e.event_id));
                if enforce {
                    *suppressed = true;
                }
            }
        }
    }

    fn lifecycle_stage(&mut self, e: &Event, goal_blocked: bool, batch: &mut SignalBatch) {
        let agent = e.agent_id.as_str();
        match e.verb.as_str() {
            "goal.set" if !goal_blocked => {
                let Some(new_goal) = e.payload_str("goal").or_else(|| e.payload_str("goal_id")) else {
                    self.report.diagnostics.push(format!("{}: goal.set without `goal`", e.event_id));
                    return;
                };
                let new_goal = new_goal.to_string();
                let old = self.goals.get(agent).cloned().unwrap_or_default();
                if old == new_goal {
                    return;
                }
                self.goals.insert(agent.to_string(), new_goal.clone());
                if let Some(ctx) = self.authz.context_mut(agent) {
                    ctx.goal_id = new_goal.clone();
                }
                let ups = self.authz.on_context_shift(agent, ShiftTrigger::GoalChange);
                self.report.permission_updates.extend(ups);
                let out = self.drift.on_goal_change(agent, &old, &new_goal, e.timestamp_ms);
                self.on_drift(out, batch);
            }
            "agent.session.end" => {
                self.conformance.end_session(agent);
            }
            "human.release" => {
                let target = e.payload_str("target_agent").unwrap_or(agent).to_string();
                let to = e
                    .payload_str("to_level")
                    .map_or(Some(ContainmentLevel::None), ContainmentLevel::parse);
                let Some(to) = to else {
                    self.report.diagnostics.push(format!("{}: unknown `to_level`", e.event_id));
                    return;
                };
                if let Some(esc) = self.containment.release(&target, to, e.timestamp_ms) {
                    self.record_escalations(vec![esc]);
                }
            }
            _ => {}
        }
    }

    fn on_conformance(&mut self, out: ProcessOutput, batch: &mut SignalBatch) {
        self.report
            .warnings
            .extend(out.progress.into_iter().filter(|p| p.warning));
        self.on_violations(out.violations, batch);
    }

    fn on_violations(&mut self, violations: Vec<Violation>, batch: &mut SignalBatch) {
        for v in violations {
            let idx = self.add_detection(
                DetectionKind::Violation,
                &v.agent_id,
                &v.violation_id,
                Some(v.rule_id.clone()),
                v.triggering_event_ids.clone(),
                v.detected_at_ms,
            );
            let signal = if v.critical {
                Signal::critical(v.violation_id.clone())
            } else {
                Signal::new(SignalKind::Violation, v.violation_id.clone())
            };
            let coordinated = self
                .conformance
                .rules()
                .iter()
                .any(|r| r.spec.rule_id == v.rule_id && r.spec.scope == RuleScope::Coordinated);
            if coordinated && v.participants.len() >= 2 {
                batch.joint.push((v.participants.clone(), signal.clone(), None));
            }
            batch.add(&v.agent_id, signal, Some(idx));
            self.report.violations.push(v);
        }
    }

    fn on_drift(&mut self, out: DriftOutput, batch: &mut SignalBatch) {
        for s in out.signals {
            if s.severity == Severity::Alert {
                let idx = self.add_detection(
                    DetectionKind::DriftAlert,
                    &s.agent_id,
                    &s.signal_id,
                    None,
                    s.window_event_ids.clone(),
                    s.emitted_at_ms,
                );
                batch.add(&s.agent_id, Signal::new(SignalKind::DriftAlert, s.signal_id.clone()), Some(idx));
                let ups = self.authz.on_context_shift(&s.agent_id, ShiftTrigger::DriftAlert);
                self.report.permission_updates.extend(ups);
            }
            self.report.drift_signals.push(s);
        }
        for v in out.verdicts {
            if v.verdict == ShiftVerdict::FlagSuspicious {
                let idx = self.add_detection(
                    DetectionKind::GoalShiftFlag,
                    &v.agent_id,
                    &v.verdict_id,
                    None,
                    v.window_event_ids.clone(),
                    v.decided_at_ms,
                );
                batch.add(&v.agent_id, Signal::new(SignalKind::DriftAlert, v.verdict_id.clone()), Some(idx));
            }
            self.report.goal_shift_verdicts.push(v);
        }
    }

    fn apply_batch(&mut self, batch: SignalBatch, at_ms: i64, trigger: Option<&Event>) {
        for (agent, items) in batch.per_agent {
            let tier = self
                .authz
                .context(&agent)
                .map(|c| c.risk_tier)
                .unwrap_or(RiskTier::FullyAgentic);
            let factors = self.policy.factors_for(&agent);
            let signals: Vec<Signal> = items.iter().map(|(s, _)| s.clone()).collect();
            let before = self.containment.level(&agent);
            let score = score_signals(&signals, tier, &factors, &self.containment.config().severity);
            let escs = self
                .containment
                .on_signals(&agent, tier, &factors, &signals, self.authz.graph(), at_ms);
            let after = self.containment.level(&agent);
            let assessment_id = format!("A{:06}", self.report.assessments.len() + 1);
            self.report.assessments.push(Assessment {
                assessment_id: assessment_id.clone(),
                agent_id: agent.clone(),
                tier,
                signals: signals.clone(),
                score,
                level_before: before,
                level_after: after,
                at_ms,
            });
            for (_, det) in &items {
                if let Some(i) = det {
                    self.report.detections[*i].causal_chain.effect = Some(ChainLink {
                        id: assessment_id.clone(),
                        timestamp_ms: at_ms,
                    });
                }
            }
            let critical_isolation = after == ContainmentLevel::ExecutionIsolation
                && before < after
                && signals.iter().any(|s| s.kind == SignalKind::Violation && s.critical);
            self.record_escalations(escs);
            if critical_isolation {
                let n = self.report.interventions.len() + 1;
                self.report.interventions.push(Intervention {
                    intervention_id: format!("I{n:06}"),
                    agent_id: agent.clone(),
                    event_id: trigger.map(|e| e.event_id.clone()).unwrap_or_default(),
                    kind: InterventionKind::EmergencyTermination,
                    level: after,
                    detail: "session terminated after critical violation".into(),
                    at_ms,
                });
            }
        }
        for (participants, signal, _) in batch.joint {
            let escs = self
                .containment
                .joint_containment(&participants, &signal, self.authz.graph(), at_ms);
            self.record_escalations(escs);
        }
    }

    fn record_escalations(&mut self, escs: Vec<EscalationEvent>) {
        let mut touched = BTreeSet::new();
        for esc in escs {
            if let Some(ctx) = self.authz.context_mut(&esc.agent_id) {
                ctx.active_containment = esc.to_level;
            }
            touched.insert(esc.agent_id.clone());
            let n = self.report.escalations.len() + 1;
            self.report.escalations.push(EscalationRecord {
                escalation_id: format!("X{n:06}"),
                event: esc,
            });
        }
        for agent in touched {
            let ups = self.authz.on_context_shift(&agent, ShiftTrigger::ContainmentChange);
            self.report.permission_updates.extend(ups);
        }
    }
}

/// Replays a parsed trace through a fresh engine.
pub fn replay(policy: Policy, opts: EngineOptions, events: Vec<Event>) -> Report {
    let mut engine = Engine::new(policy, opts);
    for e in events {
        engine.push(e);
    }
    engine.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::containment::EscalationReason;
    use crate::telemetry::{classify_verb, Scalar};

    fn ev(id: &str, agent: &str, ts: i64, verb: &str, payload: &[(&str, Scalar)]) -> Event {
        Event {
            event_id: id.into(),
            agent_id: agent.into(),
            session_id: "s1".into(),
            timestamp_ms: ts,
            verb: verb.into(),
            category: classify_verb(verb, false).unwrap().category,
            risk_tier: RiskTier::HighlyCapable,
            goal_id: String::new(),
            parent_agent_id: None,
            payload: payload.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    fn policy(extra: &str) -> Policy {
        let src = format!(
            r#"
[permissions]
"trader_*" = [{{ resource = "tool.invoke:bank.transfer" }}, {{ resource = "tool.invoke:market.*" }}, {{ resource = "api.call:*" }}]

[[rules]]
rule_id = "dual_control"
mode = "required_follow_up"
deadline_ms = 60000
critical = true
steps = [
  {{ verb = "tool.invoke", payload = {{ tool = "bank.transfer" }} }},
  {{ verb = "approve.action", role = "manager" }},
]
{extra}
"#
        );
        Policy::from_toml(&src, "test.toml").unwrap()
    }

    fn transfer(approval_at: Option<i64>) -> Vec<Event> {
        let mut v = vec![
            ev("e1", "trader_1", 1_000, "plan.step", &[]),
            ev("e2", "trader_1", 2_000, "tool.invoke", &[("tool", "bank.transfer".into()), ("amount", 5000.into())]),
        ];
        if let Some(t) = approval_at {
            v.push(ev("e3", "trader_1", 2_000 + t, "approve.action", &[("role", "manager".into())]));
        }
        v.push(ev("e4", "trader_1", 200_000, "plan.step", &[]));
        v
    }

    #[test]
    fn dual_control_outcomes() {
        for (approval, expected) in [(Some(30_000), 0), (Some(61_000), 1), (None, 1)] {
            let r = replay(policy(""), EngineOptions::default(), transfer(approval));
            assert_eq!(r.violations.len(), expected, "{approval:?}");
            assert_eq!(r.has_detections(), expected > 0);
        }
    }

    #[test]
    fn violation_chain_is_complete() {
        let r = replay(policy(""), EngineOptions::default(), transfer(None));
        let d = &r.detections[0];
        assert_eq!(d.kind, DetectionKind::Violation);
        let c = &d.causal_chain;
        assert!(c.complete, "{c:?}");
        assert_eq!(c.cognitive.as_ref().unwrap().id, "e1");
        assert_eq!(c.action.as_ref().unwrap().id, "e2");
        assert_eq!(c.effect.as_ref().unwrap().timestamp_ms, 62_000);
        // tier 3 (event default), factors 2, critical → 0.75·(10/15) = 0.5
        assert_eq!(r.final_levels.get("trader_1"), Some(&ContainmentLevel::ToolRestriction));
    }

    #[test]
    fn planning_blocked_only_in_enforce() {
        let mut events = transfer(None);
        events.push(ev("e5", "trader_1", 210_000, "goal.set", &[("goal", "g2".into())]));
        events.push(ev("e6", "trader_1", 211_000, "tool.invoke", &[("tool", "market.fetch".into())]));
        let obs = replay(policy(""), EngineOptions::default(), events.clone());
        assert!(obs.interventions.iter().any(|i| i.kind == InterventionKind::PlanningBlocked));
        assert_eq!(obs.events_suppressed, 0);
        let enf = replay(
            policy(""),
            EngineOptions {
                mode: EnforcementMode::Enforce,
                ..Default::default()
            },
            events,
        );
        assert!(enf.events_suppressed >= 1);
    }

    #[test]
    fn isolation_simulates_in_enforce() {
        let p = policy("[context_factors.\"trader_*\"]\nbusiness_impact = 3\nfinancial_exposure = 3\nregulatory_scope = 3\nrecovery_complexity = 3\ntime_sensitivity = 3\n[ari_scores.\"trader_*\"]\nscores = [[3,3,3,3],[3,3,3,3],[3,3,3,3]]\n");
        let mut events = transfer(None);
        events.push(ev("e7", "trader_1", 300_000, "api.call", &[("endpoint", "quotes".into())]));
        let r = replay(p, EngineOptions { mode: EnforcementMode::Enforce, ..Default::default() }, events);
        assert_eq!(r.final_levels.get("trader_1"), Some(&ContainmentLevel::ExecutionIsolation));
        let d = r.decisions.iter().find(|d| d.event_id == "e7").unwrap();
        assert_eq!(d.reason, ReasonCode::Isolated);
        assert!(r.interventions.iter().any(|i| i.kind == InterventionKind::SimulatedResponse));
        assert!(r.interventions.iter().any(|i| i.kind == InterventionKind::EmergencyTermination));
        // isolated denials are effects, not new detections
        assert_eq!(r.detections.len(), 1);
    }

    #[test]
    fn human_release_lowers_level() {
        let mut events = transfer(None);
        events.push(ev("e8", "operator", 300_000, "human.release", &[("target_agent", "trader_1".into()), ("to_level", "monitoring".into())]));
        let r = replay(policy(""), EngineOptions::default(), events);
        assert_eq!(r.final_levels.get("trader_1"), Some(&ContainmentLevel::Monitoring));
        assert!(r.escalations.iter().any(|x| x.event.reason == EscalationReason::Release));
    }

    #[test]
    fn denied_action_is_detected() {
        let events = vec![
            ev("e1", "trader_1", 1_000, "memory.read", &[]),
            ev("e2", "trader_1", 2_000, "db.read", &[("resource", "hr_records".into())]),
        ];
        let r = replay(policy(""), EngineOptions::default(), events);
        assert_eq!(r.detections.len(), 1);
        assert_eq!(r.detections[0].kind, DetectionKind::PolicyDeny);
        assert!(r.detections[0].causal_chain.complete);
    }

    #[test]
    fn escalating_delegation_is_denied() {
        let events = vec![
            ev("e1", "trader_1", 1_000, "plan.start", &[]),
            ev("e2", "trader_1", 2_000, "subagent.spawn", &[("child", "trader_1.sub".into()), ("grants", "tool.invoke:system.configure".into())]),
            ev("e3", "trader_1", 3_000, "subagent.spawn", &[("child", "trader_1.sub2".into()), ("grants", "tool.invoke:market.fetch".into())]),
        ];
        let r = replay(policy(""), EngineOptions::default(), events);
        let kinds: Vec<_> = r.detections.iter().map(|d| d.kind).collect();
        assert_eq!(kinds, vec![DetectionKind::DelegationDenied]);
        assert!(r.detections[0].causal_chain.complete);
        assert_eq!(r.delegations.len(), 2);
        assert_eq!(r.delegations[1].outcome, "granted");
    }

    #[test]
    fn out_of_order_within_window_matches_sorted() {
        let mut events = transfer(Some(30_000));
        let sorted = replay(policy(""), EngineOptions::default(), events.clone());
        events.swap(0, 1);
        let shuffled = replay(policy(""), EngineOptions::default(), events);
        assert_eq!(sorted.violations, shuffled.violations);
        assert_ne!(sorted.trace_digest, shuffled.trace_digest);
    }

    #[test]
    fn audit_lines_are_sorted() {
        let r = replay(policy(""), EngineOptions::default(), transfer(None));
        let lines = r.audit_lines();
        assert!(!lines.is_empty());
        let keys: Vec<i64> = lines
            .iter()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .map(|v| {
                ["evaluated_at_ms", "detected_at_ms", "at_ms", "timestamp_ms", "emitted_at_ms", "decided_at_ms"]
                    .iter()
                    .find_map(|k| v.get(*k).and_then(|x| x.as_i64()))
                    .unwrap()
            })
            .collect();
        assert!(keys.windows(2).all(|w| w[0] <= w[1]));
    }
}
