//! Temporal conformance rules compiled to linear finite-state machines.
//!
//! A rule is an ordered list of step predicates. `forbidden_sequence` rules
//! raise a violation when every step has matched in order;
//! `required_follow_up` rules arm a deadline when the second-to-last step (the
//! anchor) matches and raise a violation if the last step has not matched by
//! then. Instances are keyed by agent (or by delegation group for coordinated
//! rules), rule and optional correlation value.

pub mod reorder;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ari::RiskTier;
use crate::predicate::Condition;
use crate::telemetry::{Event, EventCategory, Scalar};

pub use reorder::{ReorderBuffer, DEFAULT_REORDER_WINDOW_MS};

pub const DEFAULT_MAX_STEPS: usize = 10;
pub const MIN_STEPS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompileError {
    #[error("rule `{rule_id}`: {steps} steps exceeds the cap of {max}")]
    TooManySteps {
        rule_id: String,
        steps: usize,
        max: usize,
    },
    #[error("rule `{rule_id}`: needs at least {MIN_STEPS} steps, got {steps}")]
    TooFewSteps { rule_id: String, steps: usize },
    #[error("rule `{rule_id}`: step {step} has an empty predicate")]
    EmptyPredicate { rule_id: String, step: usize },
    #[error("rule `{rule_id}`: required_follow_up needs deadline_ms")]
    MissingDeadline { rule_id: String },
    #[error("rule `{rule_id}`: {field} must be positive")]
    NonPositiveBound { rule_id: String, field: &'static str },
    #[error("duplicate rule_id `{0}`")]
    DuplicateRule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMode {
    ForbiddenSequence,
    RequiredFollowUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleScope {
    #[default]
    Agent,
    /// Steps may be contributed by any agent in the same delegation group.
    Coordinated,
}

/// Conjunction of atomic tests. Every present field must hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSpec {
    pub verb: Option<String>,
    pub verb_prefix: Option<String>,
    pub category: Option<EventCategory>,
    pub tier: Option<RiskTier>,
    pub tier_min: Option<RiskTier>,
    pub tier_max: Option<RiskTier>,
    /// Compared against the `role` payload attribute.
    pub role: Option<String>,
    /// Payload equality tests.
    pub payload: BTreeMap<String, Scalar>,
    pub conditions: Vec<Condition>,
}

impl StepSpec {
    pub fn atom_count(&self) -> usize {
        [
            self.verb.is_some(),
            self.verb_prefix.is_some(),
            self.category.is_some(),
            self.tier.is_some(),
            self.tier_min.is_some(),
            self.tier_max.is_some(),
            self.role.is_some(),
        ]
        .iter()
        .filter(|b| **b)
        .count()
            + self.payload.len()
            + self.conditions.len()
    }

    pub fn matches(&self, e: &Event) -> bool {
        if self.verb.as_ref().is_some_and(|v| *v != e.verb) {
            return false;
        }
        if self
            .verb_prefix
            .as_ref()
            .is_some_and(|p| !e.verb.starts_with(p.as_str()))
        {
            return false;
        }
        if self.category.is_some_and(|c| c != e.category) {
            return false;
        }
        if self.tier.is_some_and(|t| t != e.risk_tier)
            || self.tier_min.is_some_and(|t| e.risk_tier < t)
            || self.tier_max.is_some_and(|t| e.risk_tier > t)
        {
            return false;
        }
        if let Some(role) = &self.role {
            if e.payload_str("role") != Some(role.as_str()) {
                return false;
            }
        }
        for (k, v) in &self.payload {
            match e.payload.get(k) {
                Some(actual) if actual.loosely_eq(v) => {}
                _ => return false,
            }
        }
        self.conditions.iter().all(|c| c.eval(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub rule_id: String,
    #[serde(default)]
    pub priority: i32,
    pub mode: RuleMode,
    pub steps: Vec<StepSpec>,
    #[serde(default)]
    pub window_ms: Option<i64>,
    #[serde(default)]
    pub deadline_ms: Option<i64>,
    #[serde(default)]
    pub correlate_on: Option<String>,
    /// Violations of critical rules carry the highest containment severity.
    #[serde(default)]
    pub critical: bool,
    #[serde(default)]
    pub scope: RuleScope,
    #[serde(default)]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledRule {
    pub spec: RuleSpec,
}

impl CompiledRule {
    /// FSM states including idle.
    pub fn state_count(&self) -> usize {
        self.spec.steps.len() + 1
    }

    fn final_index(&self) -> usize {
        self.spec.steps.len() - 1
    }

    fn anchor_index(&self) -> usize {
        self.spec.steps.len() - 2
    }
}

pub fn compile_rule(spec: RuleSpec, max_steps: usize) -> Result<CompiledRule, CompileError> {
    let n = spec.steps.len();
    if n > max_steps {
        return Err(CompileError::TooManySteps {
            rule_id: spec.rule_id,
            steps: n,
            max: max_steps,
        });
    }
    if n < MIN_STEPS {
        return Err(CompileError::TooFewSteps {
            rule_id: spec.rule_id,
            steps: n,
        });
    }
    if let Some(step) = spec.steps.iter().position(|s| s.atom_count() == 0) {
        return Err(CompileError::EmptyPredicate {
            rule_id: spec.rule_id,
            step,
        });
    }
    if spec.mode == RuleMode::RequiredFollowUp && spec.deadline_ms.is_none() {
        return Err(CompileError::MissingDeadline {
            rule_id: spec.rule_id,
        });
    }
    for (field, v) in [("deadline_ms", spec.deadline_ms), ("window_ms", spec.window_ms)] {
        if v.is_some_and(|v| v <= 0) {
            return Err(CompileError::NonPositiveBound {
                rule_id: spec.rule_id,
                field,
            });
        }
    }
    Ok(CompiledRule { spec })
}

pub fn compile_rules(specs: Vec<RuleSpec>, max_steps: usize) -> Result<Vec<CompiledRule>, CompileError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        if !seen.insert(spec.rule_id.clone()) {
            return Err(CompileError::DuplicateRule(spec.rule_id));
        }
        out.push(compile_rule(spec, max_steps)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    SequenceCompleted,
    DeadlineExpired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub violation_id: String,
    pub rule_id: String,
    pub priority: i32,
    pub critical: bool,
    /// Agent of the last triggering event.
    pub agent_id: String,
    pub kind: ViolationKind,
    pub triggering_event_ids: Vec<String>,
    /// Distinct agents that contributed triggering events.
    pub participants: Vec<String>,
    pub correlation_value: Option<String>,
    pub detected_at_ms: i64,
}

/// Live pattern state. Idle instances are not stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FsmInstance {
    pub rule_index: usize,
    pub key: String,
    pub state_index: usize,
    pub started_at_ms: i64,
    pub anchor_timestamp_ms: Option<i64>,
    pub correlation_value: Option<String>,
    pub deadline_at_ms: Option<i64>,
    pub event_ids: Vec<String>,
    agents: Vec<String>,
}

impl FsmInstance {
    pub fn idle(rule_index: usize, key: &str, correlation_value: Option<String>) -> Self {
        Self {
            rule_index,
            key: key.to_string(),
            state_index: 0,
            started_at_ms: 0,
            anchor_timestamp_ms: None,
            correlation_value,
            deadline_at_ms: None,
            event_ids: Vec::new(),
            agents: Vec::new(),
        }
    }

    fn reset(&mut self) {
        self.state_index = 0;
        self.anchor_timestamp_ms = None;
        self.deadline_at_ms = None;
        self.event_ids.clear();
        self.agents.clear();
    }

    fn record(&mut self, e: &Event) {
        if self.event_ids.is_empty() {
            self.started_at_ms = e.timestamp_ms;
        }
        self.event_ids.push(e.event_id.clone());
        self.agents.push(e.agent_id.clone());
    }

    fn participants(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.agents.iter().collect();
        set.into_iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    NoChange,
    /// The instance advanced (or re-armed its deadline).
    Progressed { warning: bool },
    /// A required follow-up arrived in time; the instance is idle again.
    Satisfied,
    Violation(Violation),
}

fn violation_for(
    rule: &CompiledRule,
    inst: &FsmInstance,
    kind: ViolationKind,
    detected_at_ms: i64,
) -> Violation {
    let last = inst.event_ids.last().cloned().unwrap_or_default();
    let suffix = match kind {
        ViolationKind::SequenceCompleted => "seq",
        ViolationKind::DeadlineExpired => "deadline",
    };
    Violation {
        violation_id: format!("{}/{}/{}", rule.spec.rule_id, last, suffix),
        rule_id: rule.spec.rule_id.clone(),
        priority: rule.spec.priority,
        critical: rule.spec.critical,
        agent_id: inst.agents.last().cloned().unwrap_or_default(),
        kind,
        triggering_event_ids: inst.event_ids.clone(),
        participants: inst.participants(),
        correlation_value: inst.correlation_value.clone(),
        detected_at_ms,
    }
}

/// Advances one instance with one released event. `evaluations` is
/// incremented once per step predicate tested.
pub fn step(
    inst: &mut FsmInstance,
    rule: &CompiledRule,
    event: &Event,
    evaluations: &mut u64,
) -> StepOutcome {
    let steps = &rule.spec.steps;
    match rule.spec.mode {
        RuleMode::ForbiddenSequence => {
            if inst.state_index > 0 {
                if let Some(w) = rule.spec.window_ms {
                    if event.timestamp_ms - inst.started_at_ms > w {
                        inst.reset();
                    }
                }
            }
            *evaluations += 1;
            if !steps[inst.state_index].matches(event) {
                return StepOutcome::NoChange;
            }
            inst.record(event);
            inst.state_index += 1;
            if inst.state_index == steps.len() {
                let v = violation_for(rule, inst, ViolationKind::SequenceCompleted, event.timestamp_ms);
                inst.reset();
                return StepOutcome::Violation(v);
            }
            StepOutcome::Progressed {
                warning: inst.state_index >= 1,
            }
        }
        RuleMode::RequiredFollowUp => {
            let awaiting = rule.final_index();
            let anchor = rule.anchor_index();
            if inst.state_index == awaiting {
                if let Some(deadline) = inst.deadline_at_ms {
                    if event.timestamp_ms > deadline {
                        let v = violation_for(rule, inst, ViolationKind::DeadlineExpired, deadline);
                        inst.reset();
                        return StepOutcome::Violation(v);
                    }
                }
                *evaluations += 1;
                if steps[awaiting].matches(event) {
                    inst.reset();
                    return StepOutcome::Satisfied;
                }
                *evaluations += 1;
                if steps[anchor].matches(event) {
                    // latest anchor wins
                    inst.event_ids.pop();
                    inst.agents.pop();
                    inst.record(event);
                    inst.anchor_timestamp_ms = Some(event.timestamp_ms);
                    inst.deadline_at_ms = Some(event.timestamp_ms + rule.spec.deadline_ms.unwrap_or(0));
                    return StepOutcome::Progressed { warning: true };
                }
                return StepOutcome::NoChange;
            }
            if inst.state_index > 0 {
                if let Some(w) = rule.spec.window_ms {
                    if event.timestamp_ms - inst.started_at_ms > w {
                        inst.reset();
                    }
                }
            }
            *evaluations += 1;
            if !steps[inst.state_index].matches(event) {
                return StepOutcome::NoChange;
            }
            inst.record(event);
            if inst.state_index == anchor {
                inst.anchor_timestamp_ms = Some(event.timestamp_ms);
                inst.deadline_at_ms = Some(event.timestamp_ms + rule.spec.deadline_ms.unwrap_or(0));
            }
            inst.state_index += 1;
            StepOutcome::Progressed {
                warning: inst.state_index >= 1,
            }
        }
    }
}

/// A step advance, reported for predictive-alerting accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub rule_id: String,
    pub agent_id: String,
    pub event_id: String,
    pub state_index: usize,
    pub state_count: usize,
    pub warning: bool,
    pub timestamp_ms: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProcessOutput {
    pub violations: Vec<Violation>,
    pub progress: Vec<ProgressRecord>,
    pub satisfied: Vec<String>,
    pub evaluations: u64,
}

type InstanceKey = (usize, Option<String>);

/// All live instances plus the compiled rule set.
#[derive(Debug, Clone)]
pub struct ConformanceEngine {
    rules: Vec<CompiledRule>,
    instances: BTreeMap<String, BTreeMap<InstanceKey, FsmInstance>>,
    next_deadline: Option<i64>,
    total_evaluations: u64,
}

impl ConformanceEngine {
    pub fn new(rules: Vec<CompiledRule>) -> Self {
        Self {
            rules,
            instances: BTreeMap::new(),
            next_deadline: None,
            total_evaluations: 0,
        }
    }

    pub fn rules(&self) -> &[CompiledRule] {
        &self.rules
    }

    pub fn total_evaluations(&self) -> u64 {
        self.total_evaluations
    }

    pub fn live_instances(&self, key: &str) -> usize {
        self.instances.get(key).map_or(0, |m| m.len())
    }

    pub fn instances(&self) -> impl Iterator<Item = &FsmInstance> {
        self.instances.values().flat_map(|m| m.values())
    }

    /// Applies a released event. Agent-scoped rules use `event.agent_id` as
    /// the instance key; coordinated rules use `group`.
    pub fn process(&mut self, event: &Event, group: &str) -> ProcessOutput {
        let mut out = ProcessOutput::default();
        let mut keys = vec![event.agent_id.as_str()];
        if group != event.agent_id {
            keys.push(group);
        }
        let has_coordinated = self.rules.iter().any(|r| r.spec.scope == RuleScope::Coordinated);
        for key in keys {
            let is_agent_key = key == event.agent_id;
            let is_group_key = key == group;
            let slot = self.instances.entry(key.to_string()).or_default();
            let rules = &self.rules;
            slot.retain(|_, inst| match inst.deadline_at_ms {
                Some(d) if d < event.timestamp_ms => {
                    out.violations.push(violation_for(
                        &rules[inst.rule_index],
                        inst,
                        ViolationKind::DeadlineExpired,
                        d,
                    ));
                    false
                }
                _ => true,
            });
            for (ri, rule) in self.rules.iter().enumerate() {
                let applies = match rule.spec.scope {
                    RuleScope::Agent => is_agent_key,
                    RuleScope::Coordinated => is_group_key && has_coordinated,
                };
                if !applies {
                    continue;
                }
                let corr = match &rule.spec.correlate_on {
                    Some(k) => match event.payload.get(k) {
                        Some(v) => Some(v.key()),
                        None => continue,
                    },
                    None => None,
                };
                let ikey = (ri, corr);
                let mut inst = slot
                    .remove(&ikey)
                    .unwrap_or_else(|| FsmInstance::idle(ri, key, ikey.1.clone()));
                let outcome = step(&mut inst, rule, event, &mut out.evaluations);
                match outcome {
                    StepOutcome::NoChange => {}
                    StepOutcome::Progressed { warning } => out.progress.push(ProgressRecord {
                        rule_id: rule.spec.rule_id.clone(),
                        agent_id: event.agent_id.clone(),
                        event_id: event.event_id.clone(),
                        state_index: inst.state_index,
                        state_count: rule.state_count(),
                        warning,
                        timestamp_ms: event.timestamp_ms,
                    }),
                    StepOutcome::Satisfied => out.satisfied.push(rule.spec.rule_id.clone()),
                    StepOutcome::Violation(v) => out.violations.push(v),
                }
                if inst.state_index > 0 {
                    if let Some(d) = inst.deadline_at_ms {
                        self.next_deadline = Some(self.next_deadline.map_or(d, |n| n.min(d)));
                    }
                    slot.insert(ikey, inst);
                }
            }
            if slot.is_empty() {
                self.instances.remove(key);
            }
        }
        out.violations.sort_by(|a, b| {
            (a.priority, &a.rule_id, &a.violation_id).cmp(&(b.priority, &b.rule_id, &b.violation_id))
        });
        self.total_evaluations += out.evaluations;
        out
    }

    /// Fires every deadline strictly before `watermark_ms` and silently drops
    /// pre-anchor instances whose `window_ms` has elapsed.
    pub fn expire_timeouts(&mut self, watermark_ms: i64) -> Vec<Violation> {
        let mut out = Vec::new();
        let deadline_due = self.next_deadline.is_some_and(|d| d < watermark_ms);
        let any_windowed = self.rules.iter().any(|r| r.spec.window_ms.is_some());
        if !deadline_due && !any_windowed {
            return out;
        }
        let mut next = None;
        let rules = &self.rules;
        self.instances.retain(|_, slot| {
            slot.retain(|_, inst| {
                let rule = &rules[inst.rule_index];
                if let Some(d) = inst.deadline_at_ms {
                    if d < watermark_ms {
                        out.push(violation_for(rule, inst, ViolationKind::DeadlineExpired, d));
                        return false;
                    }
                    next = Some(next.map_or(d, |n: i64| n.min(d)));
                    return true;
                }
                match rule.spec.window_ms {
                    Some(w) => inst.started_at_ms + w >= watermark_ms,
                    None => true,
                }
            });
            !slot.is_empty()
        });
        self.next_deadline = next;
        out.sort_by(|a, b| {
            (a.detected_at_ms, a.priority, &a.rule_id, &a.violation_id).cmp(&(
                b.detected_at_ms,
                b.priority,
                &b.rule_id,
                &b.violation_id,
            ))
        });
        out
    }

    /// Drops an agent's instances without reporting (session end).
    pub fn end_session(&mut self, key: &str) {
        self.instances.remove(key);
    }
}
