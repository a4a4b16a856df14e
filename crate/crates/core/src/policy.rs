//! Policy documents (TOML).
//!
//! Sections: `engine`, `ari_scores`, `context_factors`,
//! `containment_thresholds`, `severity_weights`, `permissions`, `roles`,
//! `authority_matrix`, `authz`, `drift` and `[[rules]]`. Per-agent sections are
//! keyed by agent-id patterns with `*` wildcards; an exact key wins, otherwise
//! the longest matching pattern.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ari::{compute_ari, RiskTier, ScoreSheet};
use crate::authz::{AuthzConfig, PermissionSpec};
use crate::conformance::{compile_rules, CompileError, CompiledRule, RuleSpec, DEFAULT_MAX_STEPS, DEFAULT_REORDER_WINDOW_MS};
use crate::containment::{ContainmentConfig, ContextFactors, SeverityWeights, Thresholds};
use crate::drift::DriftConfig;
use crate::predicate::glob_match;

pub const DEFAULT_POLICY_TOML: &str = include_str!("../policies/default.toml");

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {source}")]
    Compile {
        path: String,
        #[source]
        source: CompileError,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub reorder_window_ms: i64,
    pub max_rule_steps: usize,
    pub strict_verbs: bool,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            reorder_window_ms: DEFAULT_REORDER_WINDOW_MS,
            max_rule_steps: DEFAULT_MAX_STEPS,
            strict_verbs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reassessment {
    pub at_ms: i64,
    pub scores: ScoreSheet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AriEntry {
    pub scores: ScoreSheet,
    #[serde(default)]
    pub reassessments: Vec<Reassessment>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyDoc {
    pub engine: EngineSection,
    pub ari_scores: BTreeMap<String, AriEntry>,
    pub context_factors: BTreeMap<String, ContextFactors>,
    pub containment_thresholds: Thresholds,
    pub severity_weights: SeverityWeights,
    pub permissions: BTreeMap<String, Vec<PermissionSpec>>,
    pub roles: BTreeMap<String, String>,
    pub authority_matrix: BTreeMap<String, Vec<String>>,
    pub authz: AuthzConfig,
    pub drift: DriftConfig,
    pub rules: Vec<RuleSpec>,
}

/// A validated policy with compiled rules.
#[derive(Debug, Clone)]
pub struct Policy {
    pub doc: PolicyDoc,
    pub rules: Vec<CompiledRule>,
    pub source: String,
}

/// Entry for `agent`: exact key, else longest matching pattern (ties lexical).
pub fn lookup<'a, V>(map: &'a BTreeMap<String, V>, agent: &str) -> Option<&'a V> {
    if let Some(v) = map.get(agent) {
        return Some(v);
    }
    map.iter()
        .filter(|(p, _)| glob_match(p, agent))
        .max_by(|(a, _), (b, _)| a.len().cmp(&b.len()).then_with(|| b.cmp(a)))
        .map(|(_, v)| v)
}

impl Policy {
    pub fn from_toml(text: &str, path: &str) -> Result<Self, PolicyError> {
        let doc: PolicyDoc = toml::from_str(text).map_err(|e| PolicyError::Parse {
            path: path.to_string(),
            message: location_prefixed(text, &e),
        })?;
        Self::from_doc(doc, path)
    }

    pub fn from_doc(doc: PolicyDoc, path: &str) -> Result<Self, PolicyError> {
        let invalid = |message: String| PolicyError::Invalid {
            path: path.to_string(),
            message,
        };
        if doc.engine.reorder_window_ms < 0 {
            return Err(invalid("engine.reorder_window_ms must be nonnegative".into()));
        }
        for (pattern, f) in &doc.context_factors {
            f.validate()
                .map_err(|e| invalid(format!("context_factors.{pattern}: {e}")))?;
        }
        doc.containment_thresholds
            .validate()
            .map_err(|e| invalid(format!("containment_thresholds: {e}")))?;
        doc.severity_weights
            .validate()
            .map_err(|e| invalid(format!("severity_weights: {e}")))?;
        doc.drift.validate().map_err(|e| invalid(format!("drift: {e}")))?;
        let rules = compile_rules(doc.rules.clone(), doc.engine.max_rule_steps).map_err(|source| {
            PolicyError::Compile {
                path: path.to_string(),
                source,
            }
        })?;
        Ok(Self {
            doc,
            rules,
            source: path.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: p.clone(),
            source,
        })?;
        Self::from_toml(&text, &p)
    }

    /// The bundled default policy.
    pub fn default_policy() -> Self {
        Self::from_toml(DEFAULT_POLICY_TOML, "<default>").expect("bundled policy is valid")
    }

    pub fn containment_config(&self) -> ContainmentConfig {
        ContainmentConfig {
            thresholds: self.doc.containment_thresholds,
            severity: self.doc.severity_weights,
        }
    }

    pub fn factors_for(&self, agent: &str) -> ContextFactors {
        lookup(&self.doc.context_factors, agent).copied().unwrap_or_default()
    }

    /// Tier from the agent's score sheet in force at `at_ms`, if configured.
    /// A reassessment applies to events at or after its timestamp.
    pub fn tier_for(&self, agent: &str, at_ms: i64) -> Option<RiskTier> {
        let entry = lookup(&self.doc.ari_scores, agent)?;
        let sheet = entry
            .reassessments
            .iter()
            .filter(|r| r.at_ms <= at_ms)
            .max_by_key(|r| r.at_ms)
            .map(|r| &r.scores)
            .unwrap_or(&entry.scores);
        Some(compute_ari(sheet).tier)
    }
}

fn location_prefixed(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: {}", e.message())
        }
        None => e.message().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_policy_loads() {
        let p = Policy::default_policy();
        assert!(!p.rules.is_empty());
        assert!(p.rules.iter().any(|r| r.spec.rule_id == "dual_control"));
    }

    #[test]
    fn lookup_prefers_exact_then_longest() {
        let m: BTreeMap<String, u8> = [("*".into(), 1), ("trader_*".into(), 2), ("trader_7".into(), 3)].into();
        assert_eq!(lookup(&m, "trader_7"), Some(&3));
        assert_eq!(lookup(&m, "trader_1"), Some(&2));
        assert_eq!(lookup(&m, "x"), Some(&1));
    }

    #[test]
    fn reassessment_applies_forward() {
        let src = r#"
[ari_scores.support_1]
scores = [[1,1,1,1],[1,1,1,1],[1,1,1,1]]
reassessments = [{ at_ms = 1000, scores = [[3,2,2,2],[2,2,2,2],[3,2,2,2]] }]
"#;
        let p = Policy::from_toml(src, "t.toml").unwrap();
        assert_eq!(p.tier_for("support_1", 999), Some(RiskTier::SemiAgentic));
        assert_eq!(p.tier_for("support_1", 1000), Some(RiskTier::HighlyCapable));
        assert_eq!(p.tier_for("other", 0), None);
    }

    #[test]
    fn errors_carry_location() {
        let err = Policy::from_toml("[engine]\nreorder_window_ms = \"x\"\n", "bad.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("bad.toml: line 2"), "{msg}");
        let err = Policy::from_toml("[[rules]]\nrule_id = \"r\"\nmode = \"forbidden_sequence\"\nsteps = [{verb = \"a.b\"}]\n", "r.toml")
            .unwrap_err();
        assert!(matches!(err, PolicyError::Compile { .. }));
        let err = Policy::from_toml("[context_factors.x]\nbusiness_impact = 4\nfinancial_exposure = 1\nregulatory_scope = 1\nrecovery_complexity = 1\ntime_sensitivity = 1\n", "f.toml").unwrap_err();
        assert!(matches!(err, PolicyError::Invalid { .. }));
    }
}
