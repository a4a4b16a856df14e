//! Graduated containment.
//!
//! Signals from the monitors are scored as
//! `(tier / 4) * (sum of context factors / 15) * max severity` and mapped to
//! one of five ordered levels. Levels only ratchet upward; a `human.release`
//! event is the only way down. High levels cascade to delegated descendants.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ari::RiskTier;
use crate::authz::DelegationGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContainmentError {
    #[error("score {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("context factor `{name}` = {value} is outside 1..=3")]
    InvalidFactor { name: &'static str, value: u8 },
    #[error("containment thresholds must be strictly increasing within (0, 1]")]
    InvalidThresholds,
    #[error("severity `{0}` must lie in [0, 1]")]
    InvalidSeverity(&'static str),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ContainmentLevel {
    #[default]
    None = 0,
    Monitoring = 1,
    PlanningIntervention = 2,
    ToolRestriction = 3,
    ExecutionIsolation = 4,
}

impl ContainmentLevel {
    pub const ALL: [ContainmentLevel; 5] = [
        ContainmentLevel::None,
        ContainmentLevel::Monitoring,
        ContainmentLevel::PlanningIntervention,
        ContainmentLevel::ToolRestriction,
        ContainmentLevel::ExecutionIsolation,
    ];

    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn from_ordinal(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ContainmentLevel::None => "none",
            ContainmentLevel::Monitoring => "monitoring",
            ContainmentLevel::PlanningIntervention => "planning_intervention",
            ContainmentLevel::ToolRestriction => "tool_restriction",
            ContainmentLevel::ExecutionIsolation => "execution_isolation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if let Ok(n) = s.parse::<u8>() {
            return Self::from_ordinal(n);
        }
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for ContainmentLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Five operator-assigned context scores, each 1 (low risk) to 3 (high risk).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextFactors {
    pub business_impact: u8,
    pub financial_exposure: u8,
    pub regulatory_scope: u8,
    pub recovery_complexity: u8,
    pub time_sensitivity: u8,
}

impl ContextFactors {
    pub fn uniform(v: u8) -> Self {
        Self {
            business_impact: v,
            financial_exposure: v,
            regulatory_scope: v,
            recovery_complexity: v,
            time_sensitivity: v,
        }
    }

    fn named(&self) -> [(&'static str, u8); 5] {
        [
            ("business_impact", self.business_impact),
            ("financial_exposure", self.financial_exposure),
            ("regulatory_scope", self.regulatory_scope),
            ("recovery_complexity", self.recovery_complexity),
            ("time_sensitivity", self.time_sensitivity),
        ]
    }

    pub fn validate(&self) -> Result<(), ContainmentError> {
        for (name, value) in self.named() {
            if !(1..=3).contains(&value) {
                return Err(ContainmentError::InvalidFactor { name, value });
            }
        }
        Ok(())
    }

    pub fn sum(&self) -> u32 {
        self.named().iter().map(|(_, v)| *v as u32).sum()
    }
}

impl Default for ContextFactors {
    fn default() -> Self {
        Self::uniform(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeverityWeights {
    pub drift_alert: f64,
    pub violation: f64,
    pub critical_violation: f64,
    pub authz_denial_burst: f64,
}

impl Default for SeverityWeights {
    fn default() -> Self {
        Self {
            drift_alert: 0.45,
            violation: 0.75,
            critical_violation: 1.0,
            authz_denial_burst: 0.6,
        }
    }
}

impl SeverityWeights {
    pub fn validate(&self) -> Result<(), ContainmentError> {
        for (name, v) in [
            ("drift_alert", self.drift_alert),
            ("violation", self.violation),
            ("critical_violation", self.critical_violation),
            ("authz_denial_burst", self.authz_denial_burst),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ContainmentError::InvalidSeverity(name));
            }
        }
        Ok(())
    }
}

/// Lower bounds (inclusive) of each level above `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub monitoring: f64,
    pub planning_intervention: f64,
    pub tool_restriction: f64,
    pub execution_isolation: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            monitoring: 0.1,
            planning_intervention: 0.3,
            tool_restriction: 0.5,
            execution_isolation: 0.75,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), ContainmentError> {
        let t = [
            0.0,
            self.monitoring,
            self.planning_intervention,
            self.tool_restriction,
            self.execution_isolation,
        ];
        if t.windows(2).all(|w| w[0] < w[1]) && self.execution_isolation <= 1.0 {
            Ok(())
        } else {
            Err(ContainmentError::InvalidThresholds)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Violation,
    DriftAlert,
    AuthzDenialBurst,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Signal {
    pub kind: SignalKind,
    pub id: String,
    /// Only meaningful for violations of rules marked critical.
    #[serde(default)]
    pub critical: bool,
}

impl Signal {
    pub fn new(kind: SignalKind, id: impl Into<String>) -> Self {
        Self {
            kind,
            id: id.into(),
            critical: false,
        }
    }

    pub fn critical(id: impl Into<String>) -> Self {
        Self {
            kind: SignalKind::Violation,
            id: id.into(),
            critical: true,
        }
    }

    pub fn severity(&self, w: &SeverityWeights) -> f64 {
        match (self.kind, self.critical) {
            (SignalKind::Violation, true) => w.critical_violation,
            (SignalKind::Violation, false) => w.violation,
            (SignalKind::DriftAlert, _) => w.drift_alert,
            (SignalKind::AuthzDenialBurst, _) => w.authz_denial_burst,
        }
    }
}

/// Risk-tier-weighted score in [0, 1]; 0 for an empty signal set.
pub fn score_signals(
    signals: &[Signal],
    tier: RiskTier,
    factors: &ContextFactors,
    weights: &SeverityWeights,
) -> f64 {
    let max_sev = signals
        .iter()
        .map(|s| s.severity(weights))
        .fold(0.0_f64, f64::max);
    (tier.value() as f64 / 4.0) * (factors.sum() as f64 / 15.0) * max_sev
}

pub fn select_level(score: f64, t: &Thresholds) -> Result<ContainmentLevel, ContainmentError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(ContainmentError::OutOfRange(score));
    }
    Ok(if score >= t.execution_isolation {
        ContainmentLevel::ExecutionIsolation
    } else if score >= t.tool_restriction {
        ContainmentLevel::ToolRestriction
    } else if score >= t.planning_intervention {
        ContainmentLevel::PlanningIntervention
    } else if score >= t.monitoring {
        ContainmentLevel::Monitoring
    } else {
        ContainmentLevel::None
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationReason {
    Score,
    Cascade,
    ChildViolation,
    JointViolation,
    Release,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationEvent {
    pub agent_id: String,
    pub from_level: ContainmentLevel,
    pub to_level: ContainmentLevel,
    pub score: f64,
    pub reason: EscalationReason,
    pub contributing_signals: Vec<Signal>,
    pub cascaded_from: Option<String>,
    pub at_ms: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContainmentConfig {
    pub thresholds: Thresholds,
    pub severity: SeverityWeights,
}

/// Per-agent levels plus the escalation rules.
#[derive(Debug, Clone, Default)]
pub struct ContainmentController {
    config: ContainmentConfig,
    levels: BTreeMap<String, ContainmentLevel>,
}

impl ContainmentController {
    pub fn new(config: ContainmentConfig) -> Self {
        Self {
            config,
            levels: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ContainmentConfig {
        &self.config
    }

    pub fn level(&self, agent: &str) -> ContainmentLevel {
        self.levels.get(agent).copied().unwrap_or_default()
    }

    pub fn levels(&self) -> &BTreeMap<String, ContainmentLevel> {
        &self.levels
    }

    fn raise(
        &mut self,
        agent: &str,
        to: ContainmentLevel,
        score: f64,
        reason: EscalationReason,
        signals: &[Signal],
        cascaded_from: Option<&str>,
        at_ms: i64,
    ) -> Option<EscalationEvent> {
        let from = self.level(agent);
        if to <= from {
            return None;
        }
        self.levels.insert(agent.to_string(), to);
        Some(EscalationEvent {
            agent_id: agent.to_string(),
            from_level: from,
            to_level: to,
            score,
            reason,
            contributing_signals: signals.to_vec(),
            cascaded_from: cascaded_from.map(str::to_string),
            at_ms,
        })
    }

    /// Scores a batch of signals for one agent and applies the resulting
    /// level, its cascade, and parent monitoring for violations.
    pub fn on_signals(
        &mut self,
        agent: &str,
        tier: RiskTier,
        factors: &ContextFactors,
        signals: &[Signal],
        graph: &DelegationGraph,
        at_ms: i64,
    ) -> Vec<EscalationEvent> {
        let mut out = Vec::new();
        if signals.is_empty() {
            return out;
        }
        let score = score_signals(signals, tier, factors, &self.config.severity);
        let level = select_level(score.clamp(0.0, 1.0), &self.config.thresholds)
            .unwrap_or(ContainmentLevel::None);
        if let Some(e) = self.raise(agent, level, score, EscalationReason::Score, signals, None, at_ms) {
            out.push(e);
        }
        out.extend(self.cascade(graph, agent, at_ms));
        if signals.iter().any(|s| s.kind == SignalKind::Violation) {
            for parent in graph.parents(agent) {
                if let Some(e) = self.raise(
                    &parent,
                    ContainmentLevel::Monitoring,
                    score,
                    EscalationReason::ChildViolation,
                    signals,
                    None,
                    at_ms,
                ) {
                    out.push(e);
                }
            }
        }
        out
    }

    /// Raises every descendant of `parent` to at least ToolRestriction when the
    /// parent is at ToolRestriction or above.
    pub fn cascade(&mut self, graph: &DelegationGraph, parent: &str, at_ms: i64) -> Vec<EscalationEvent> {
        let level = self.level(parent);
        if level < ContainmentLevel::ToolRestriction {
            return Vec::new();
        }
        graph
            .descendants(parent)
            .into_iter()
            .filter_map(|child| {
                self.raise(
                    &child,
                    ContainmentLevel::ToolRestriction,
                    0.0,
                    EscalationReason::Cascade,
                    &[],
                    Some(parent),
                    at_ms,
                )
            })
            .collect()
    }

    /// Applies containment to a newly linked child of a contained parent.
    pub fn on_child_linked(&mut self, parent: &str, child: &str, at_ms: i64) -> Option<EscalationEvent> {
        if self.level(parent) >= ContainmentLevel::ToolRestriction {
            self.raise(
                child,
                ContainmentLevel::ToolRestriction,
                0.0,
                EscalationReason::Cascade,
                &[],
                Some(parent),
                at_ms,
            )
        } else {
            None
        }
    }

    /// Every participant of a coordinated violation gets at least
    /// PlanningIntervention. A singleton match changes nothing here.
    pub fn joint_containment(
        &mut self,
        participants: &[String],
        signal: &Signal,
        graph: &DelegationGraph,
        at_ms: i64,
    ) -> Vec<EscalationEvent> {
        if participants.len() < 2 {
            return Vec::new();
        }
        let mut out = Vec::new();
        for agent in participants {
            if let Some(e) = self.raise(
                agent,
                ContainmentLevel::PlanningIntervention,
                0.0,
                EscalationReason::JointViolation,
                std::slice::from_ref(signal),
                None,
                at_ms,
            ) {
                out.push(e);
            }
            out.extend(self.cascade(graph, agent, at_ms));
        }
        out
    }

    /// Operator de-escalation. Returns None unless the level actually drops.
    pub fn release(&mut self, agent: &str, to: ContainmentLevel, at_ms: i64) -> Option<EscalationEvent> {
        let from = self.level(agent);
        if to >= from {
            return None;
        }
        self.levels.insert(agent.to_string(), to);
        Some(EscalationEvent {
            agent_id: agent.to_string(),
            from_level: from,
            to_level: to,
            score: 0.0,
            reason: EscalationReason::Release,
            contributing_signals: Vec::new(),
            cascaded_from: None,
            at_ms,
        })
    }
}
