//! Continuous authorization: context-dependent permissions, delegation
//! provenance and re-evaluation when an agent's goal or risk posture shifts.
//!
//! A request's resource is `verb:target`, where the target is the first of the
//! payload keys `tool`, `resource`, `endpoint`. Permission patterns use `*`
//! wildcards; a pattern with no `:` also covers every target of that verb.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ari::RiskTier;
use crate::containment::ContainmentLevel;
use crate::predicate::{glob_match, Condition};
use crate::telemetry::Event;

pub const DEFAULT_DELEGATION_EXPIRY_MS: i64 = 3_600_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthzError {
    #[error("no context registered for agent `{0}`")]
    UnknownAgent(String),
    #[error("delegation {parent} -> {child} of `{resource}` exceeds the grantor's authority: {reason}")]
    EscalationAttempt {
        parent: String,
        child: String,
        resource: String,
        reason: String,
    },
    #[error("delegation {parent} -> {child} would create a cycle")]
    CycleDetected { parent: String, child: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    #[default]
    Allow,
    AllowReadOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Provenance {
    Direct,
    Delegated { from: String, depth: u32 },
}

impl Provenance {
    pub fn depth(&self) -> u32 {
        match self {
            Provenance::Direct => 0,
            Provenance::Delegated { depth, .. } => *depth,
        }
    }
}

/// Policy-file form of a direct grant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermissionSpec {
    #[serde(default)]
    pub grant_id: Option<String>,
    pub resource: String,
    #[serde(default)]
    pub effect: Effect,
    #[serde(default)]
    pub constraints: Vec<Condition>,
    #[serde(default)]
    pub goal_scope: Option<String>,
    #[serde(default)]
    pub expires_at_ms: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Permission {
    pub grant_id: String,
    pub holder: String,
    pub resource: String,
    pub effect: Effect,
    pub constraints: Vec<Condition>,
    pub goal_scope: Option<String>,
    pub expires_at_ms: Option<i64>,
    pub provenance: Provenance,
    /// Grantor's permission this copy was delegated from.
    pub source_grant: Option<String>,
}

impl Permission {
    pub fn covers(&self, resource: &str) -> bool {
        pattern_covers(&self.resource, resource)
    }

    pub fn expired_at(&self, now_ms: i64) -> bool {
        self.expires_at_ms.is_some_and(|e| now_ms > e)
    }

    pub fn scope_matches(&self, goal_id: &str) -> bool {
        self.goal_scope.as_ref().map_or(true, |s| glob_match(s, goal_id))
    }
}

/// True when `pattern` grants `resource`. `resource` may itself be a pattern,
/// in which case its `*` is taken literally (a sound subsumption check).
pub fn pattern_covers(pattern: &str, resource: &str) -> bool {
    if glob_match(pattern, resource) {
        return true;
    }
    if !pattern.contains(':') {
        let verb = resource.split(':').next().unwrap_or(resource);
        return glob_match(pattern, verb);
    }
    false
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AgentContext {
    pub agent_id: String,
    pub session_id: String,
    pub goal_id: String,
    pub risk_tier: RiskTier,
    pub role: Option<String>,
    pub active_containment: ContainmentLevel,
    pub recent_signals: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    AllowReadOnly,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    Granted,
    Exempt,
    ReadOnlyVariant,
    NoPermission,
    Expired,
    GoalContextMismatch,
    ConstraintFailed,
    ToolRestricted,
    ReadOnlyGrant,
    Isolated,
}

impl ReasonCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasonCode::Granted => "granted",
            ReasonCode::Exempt => "exempt",
            ReasonCode::ReadOnlyVariant => "read_only_variant",
            ReasonCode::NoPermission => "no_permission",
            ReasonCode::Expired => "expired",
            ReasonCode::GoalContextMismatch => "goal_context_mismatch",
            ReasonCode::ConstraintFailed => "constraint_failed",
            ReasonCode::ToolRestricted => "tool_restricted",
            ReasonCode::ReadOnlyGrant => "read_only_grant",
            ReasonCode::Isolated => "isolated",
        }
    }
}

impl fmt::Display for ReasonCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub agent_id: String,
    pub event_id: String,
    pub resource: String,
    pub verdict: Verdict,
    pub reason: ReasonCode,
    pub message: String,
    pub grant_id: Option<String>,
    /// Grant ids from the matched permission back to its direct root.
    pub provenance_chain: Vec<String>,
    pub read_only_variant: Option<String>,
    pub evaluated_at_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuthzConfig {
    /// Verb or target patterns that count as writes.
    pub write_class: Vec<String>,
    /// Write resource → read-only substitute.
    pub read_only_variants: BTreeMap<String, String>,
    /// Action verbs that need no permission and pass isolation (e.g. approvals).
    pub exempt_verbs: Vec<String>,
    pub default_delegation_expiry_ms: i64,
    pub denial_burst_count: usize,
    pub denial_burst_window_ms: i64,
}

impl Default for AuthzConfig {
    fn default() -> Self {
        Self {
            write_class: vec![
                "db.write".into(),
                "bank.transfer".into(),
                "system.*".into(),
                "file.write".into(),
            ],
            read_only_variants: BTreeMap::new(),
            exempt_verbs: vec!["approve.action".into()],
            default_delegation_expiry_ms: DEFAULT_DELEGATION_EXPIRY_MS,
            denial_burst_count: 3,
            denial_burst_window_ms: 60_000,
        }
    }
}

impl AuthzConfig {
    pub fn is_write_class(&self, resource: &str) -> bool {
        let (verb, target) = match resource.split_once(':') {
            Some((v, t)) => (v, Some(t)),
            None => (resource, None),
        };
        self.write_class
            .iter()
            .any(|p| glob_match(p, verb) || target.is_some_and(|t| glob_match(p, t)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DelegationEdge {
    pub parent: String,
    pub child: String,
    pub grant_ids: Vec<String>,
    pub granted_at_ms: i64,
    pub expires_at_ms: i64,
}

/// Parent→child links between agents plus the grant records on them.
#[derive(Debug, Clone, Default)]
pub struct DelegationGraph {
    children: BTreeMap<String, BTreeSet<String>>,
    parents: BTreeMap<String, BTreeSet<String>>,
    component: BTreeMap<String, String>,
    members: BTreeMap<String, BTreeSet<String>>,
    edges: Vec<DelegationEdge>,
}

impl DelegationGraph {
    /// True if adding `parent → child` would close a cycle.
    pub fn would_cycle(&self, parent: &str, child: &str) -> bool {
        if parent == child {
            return true;
        }
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let mut stack = vec![child];
        while let Some(a) = stack.pop() {
            for c in self.children.get(a).into_iter().flatten() {
                if c == parent {
                    return true;
                }
                if seen.insert(c) {
                    stack.push(c);
                }
            }
        }
        false
    }

    pub fn has_link(&self, parent: &str, child: &str) -> bool {
        self.children.get(parent).is_some_and(|c| c.contains(child))
    }

    /// Adds a structural link. Returns false if it already existed.
    pub fn link(&mut self, parent: &str, child: &str) -> Result<bool, AuthzError> {
        if self.has_link(parent, child) {
            return Ok(false);
        }
        if self.would_cycle(parent, child) {
            return Err(AuthzError::CycleDetected {
                parent: parent.into(),
                child: child.into(),
            });
        }
        self.insert_link(parent, child);
        Ok(true)
    }

    /// Link insertion once the caller has ruled out duplicates and cycles.
    fn insert_link(&mut self, parent: &str, child: &str) {
        fn add(map: &mut BTreeMap<String, BTreeSet<String>>, key: &str, value: &str) {
            match map.get_mut(key) {
                Some(set) => {
                    set.insert(value.to_string());
                }
                None => {
                    map.insert(key.to_string(), BTreeSet::from([value.to_string()]));
                }
            }
        }
        add(&mut self.children, parent, child);
        add(&mut self.parents, child, parent);
        self.merge(parent, child);
    }

    fn root_of<'a>(&'a self, agent: &'a str) -> &'a str {
        self.component.get(agent).map_or(agent, String::as_str)
    }

    /// Folds the child's component into the parent's, keeping the parent's
    /// root so that group keys stay stable as subagents join.
    fn merge(&mut self, parent: &str, child: &str) {
        let (keep, drop) = (self.root_of(parent), self.root_of(child));
        if keep == drop {
            return;
        }
        let (keep, drop) = (keep.to_string(), drop.to_string());
        let moved = self.members.remove(&drop).unwrap_or_else(|| [drop].into());
        if !self.members.contains_key(&keep) {
            self.members.insert(keep.clone(), [keep.clone()].into());
            self.component.insert(keep.clone(), keep.clone());
        }
        let dest = self.members.get_mut(&keep).expect("inserted above");
        for m in moved {
            self.component.insert(m.clone(), keep.clone());
            dest.insert(m);
        }
    }

    /// Key of the weakly connected component: the first agent that acted as
    /// a parent in it (an unlinked agent is its own root).
    pub fn group_root(&self, agent: &str) -> String {
        self.component
            .get(agent)
            .cloned()
            .unwrap_or_else(|| agent.to_string())
    }

    pub fn parents(&self, agent: &str) -> Vec<String> {
        self.parents
            .get(agent)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn children(&self, agent: &str) -> Vec<String> {
        self.children
            .get(agent)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// All agents reachable from `agent`, sorted, excluding itself.
    pub fn descendants(&self, agent: &str) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<&str> = VecDeque::from([agent]);
        while let Some(a) = queue.pop_front() {
            if let Some(cs) = self.children.get(a) {
                for c in cs {
                    if seen.insert(c.clone()) {
                        queue.push_back(c);
                    }
                }
            }
        }
        seen.remove(agent);
        seen.into_iter().collect()
    }

    pub fn edges(&self) -> &[DelegationEdge] {
        &self.edges
    }

    pub fn agents(&self) -> BTreeSet<String> {
        self.children.keys().chain(self.parents.keys()).cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftTrigger {
    GoalChange,
    TierChange,
    ContainmentChange,
    DriftAlert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftAction {
    Retained,
    Narrowed,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionUpdate {
    pub holder: String,
    pub grant_id: String,
    pub resource: String,
    pub action: ShiftAction,
    pub trigger: ShiftTrigger,
    /// Set when the revocation cascaded from a grantor's permission.
    pub cascaded_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelegationAudit {
    pub parent: String,
    pub child: String,
    pub requested: Vec<String>,
    pub granted: Vec<String>,
    pub outcome: String,
    pub at_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DenialBurst {
    pub agent_id: String,
    pub denials: usize,
    pub window_ms: i64,
    pub at_ms: i64,
}

/// Policy inputs that never change after construction; shared between clones.
#[derive(Debug, Default)]
struct PolicyInputs {
    config: AuthzConfig,
    direct: Vec<(String, Vec<PermissionSpec>)>,
    roles: Vec<(String, String)>,
    authority_matrix: BTreeMap<String, Vec<String>>,
}

/// Authorization state: contexts, live permissions and the delegation graph.
#[derive(Debug, Clone, Default)]
pub struct Authz {
    policy: Arc<PolicyInputs>,
    contexts: BTreeMap<String, AgentContext>,
    permissions: BTreeMap<String, Vec<Permission>>,
    graph: DelegationGraph,
    denials: BTreeMap<String, VecDeque<i64>>,
    audit: Vec<DelegationAudit>,
    delegation_seq: u64,
}

impl Authz {
    /// `direct` and `roles` are keyed by agent-id patterns.
    pub fn new(
        config: AuthzConfig,
        direct: BTreeMap<String, Vec<PermissionSpec>>,
        roles: BTreeMap<String, String>,
        authority_matrix: BTreeMap<String, Vec<String>>,
    ) -> Self {
        Self {
            policy: Arc::new(PolicyInputs {
                config,
                direct: direct.into_iter().collect(),
                roles: roles.into_iter().collect(),
                authority_matrix,
            }),
            ..Default::default()
        }
    }

    pub fn config(&self) -> &AuthzConfig {
        &self.policy.config
    }

    pub fn graph(&self) -> &DelegationGraph {
        &self.graph
    }

    pub fn context(&self, agent: &str) -> Option<&AgentContext> {
        self.contexts.get(agent)
    }

    pub fn context_mut(&mut self, agent: &str) -> Option<&mut AgentContext> {
        self.contexts.get_mut(agent)
    }

    pub fn permissions(&self, agent: &str) -> &[Permission] {
        self.permissions.get(agent).map_or(&[], |v| v.as_slice())
    }

    pub fn audit(&self) -> &[DelegationAudit] {
        &self.audit
    }

    /// Creates the agent's context and direct grants on first sight.
    pub fn ensure_agent(&mut self, agent: &str, session: &str, tier: RiskTier) -> &mut AgentContext {
        if !self.contexts.contains_key(agent) {
            let role = self
                .policy
                .roles
                .iter()
                .find(|(p, _)| glob_match(p, agent))
                .map(|(_, r)| r.clone());
            let mut perms = Vec::new();
            for (pattern, specs) in &self.policy.direct {
                if !glob_match(pattern, agent) {
                    continue;
                }
                for (i, spec) in specs.iter().enumerate() {
                    let base = spec
                        .grant_id
                        .clone()
                        .unwrap_or_else(|| format!("{pattern}#{i}"));
                    perms.push(Permission {
                        grant_id: format!("{agent}/{base}"),
                        holder: agent.to_string(),
                        resource: spec.resource.clone(),
                        effect: spec.effect,
                        constraints: spec.constraints.clone(),
                        goal_scope: spec.goal_scope.clone(),
                        expires_at_ms: spec.expires_at_ms,
                        provenance: Provenance::Direct,
                        source_grant: None,
                    });
                }
            }
            self.permissions.insert(agent.to_string(), perms);
            self.contexts.insert(
                agent.to_string(),
                AgentContext {
                    agent_id: agent.to_string(),
                    session_id: session.to_string(),
                    goal_id: String::new(),
                    risk_tier: tier,
                    role,
                    active_containment: ContainmentLevel::None,
                    recent_signals: 0,
                },
            );
        }
        self.contexts.get_mut(agent).expect("inserted above")
    }

    fn find_grant(&self, grant_id: &str) -> Option<&Permission> {
        self.permissions
            .values()
            .flatten()
            .find(|p| p.grant_id == grant_id)
    }

    /// Grant ids from `grant_id` up to its direct root.
    pub fn provenance_chain(&self, grant_id: &str) -> Vec<String> {
        let mut chain = Vec::new();
        let mut cur = Some(grant_id.to_string());
        while let Some(id) = cur {
            let Some(p) = self.find_grant(&id) else {
                break;
            };
            chain.push(id);
            cur = p.source_grant.clone();
        }
        chain
    }

    /// Decides an Action request against the agent's current context.
    pub fn evaluate(&self, request: &Event) -> Result<Decision, AuthzError> {
        let ctx = self
            .contexts
            .get(&request.agent_id)
            .ok_or_else(|| AuthzError::UnknownAgent(request.agent_id.clone()))?;
        let now = request.timestamp_ms;
        let resource = request.resource();
        let decide = |verdict, reason: ReasonCode, message: String, grant: Option<&Permission>, ro: Option<String>| {
            let grant_id = grant.map(|g| g.grant_id.clone());
            Decision {
                agent_id: request.agent_id.clone(),
                event_id: request.event_id.clone(),
                resource: resource.clone(),
                verdict,
                reason,
                message,
                provenance_chain: grant_id
                    .as_deref()
                    .map(|g| self.provenance_chain(g))
                    .unwrap_or_default(),
                grant_id,
                read_only_variant: ro,
                evaluated_at_ms: now,
            }
        };

        // Exempt verbs are oversight acts (approvals) carried on the agent's
        // stream; the agent's own isolation does not gate them.
        if self.policy.config.exempt_verbs.iter().any(|v| glob_match(v, &request.verb)) {
            return Ok(decide(Verdict::Allow, ReasonCode::Exempt, "exempt verb".into(), None, None));
        }
        if ctx.active_containment >= ContainmentLevel::ExecutionIsolation {
            return Ok(decide(
                Verdict::Deny,
                ReasonCode::Isolated,
                "agent is under execution isolation".into(),
                None,
                None,
            ));
        }

        let perms = self.permissions(&request.agent_id);
        let candidates: Vec<&Permission> = perms.iter().filter(|p| p.covers(&resource)).collect();
        if candidates.is_empty() {
            let scoped_to_goal = perms
                .iter()
                .any(|p| p.goal_scope.is_some() && p.scope_matches(&ctx.goal_id) && !p.expired_at(now));
            return Ok(if scoped_to_goal {
                decide(
                    Verdict::Deny,
                    ReasonCode::GoalContextMismatch,
                    format!("`{resource}` is outside the permissions of goal `{}`", ctx.goal_id),
                    None,
                    None,
                )
            } else {
                decide(
                    Verdict::Deny,
                    ReasonCode::NoPermission,
                    format!("no permission covers `{resource}`"),
                    None,
                    None,
                )
            });
        }

        // stage reached: 0 expired, 1 goal scope, 2 constraints, 3 granted
        let mut best_fail: Option<(u8, &Permission)> = None;
        let mut granted: Vec<&Permission> = Vec::new();
        for p in candidates {
            let stage = if p.expired_at(now) {
                0
            } else if !p.scope_matches(&ctx.goal_id) {
                1
            } else if !p.constraints.iter().all(|c| c.eval(request)) {
                2
            } else {
                3
            };
            if stage == 3 {
                granted.push(p);
            } else if best_fail.map_or(true, |(s, _)| stage > s) {
                best_fail = Some((stage, p));
            }
        }
        granted.sort_by(|a, b| a.effect.cmp(&b.effect).then_with(|| a.grant_id.cmp(&b.grant_id)));
        let Some(grant) = granted.first().copied() else {
            let (stage, p) = best_fail.expect("nonempty candidates");
            let (reason, msg) = match stage {
                0 => (ReasonCode::Expired, format!("grant `{}` expired", p.grant_id)),
                1 => (
                    ReasonCode::GoalContextMismatch,
                    format!(
                        "grant `{}` is scoped to `{}`, current goal is `{}`",
                        p.grant_id,
                        p.goal_scope.as_deref().unwrap_or_default(),
                        ctx.goal_id
                    ),
                ),
                _ => (ReasonCode::ConstraintFailed, format!("grant `{}` constraints not met", p.grant_id)),
            };
            return Ok(decide(Verdict::Deny, reason, msg, Some(p), None));
        };

        let restricted = ctx.active_containment >= ContainmentLevel::ToolRestriction;
        let read_only = grant.effect == Effect::AllowReadOnly;
        if (restricted || read_only) && self.policy.config.is_write_class(&resource) {
            let variant = self.policy.config.read_only_variants.get(&resource).cloned();
            let reason_if_denied = if restricted {
                ReasonCode::ToolRestricted
            } else {
                ReasonCode::ReadOnlyGrant
            };
            return Ok(match variant {
                Some(v) => decide(
                    Verdict::AllowReadOnly,
                    ReasonCode::ReadOnlyVariant,
                    format!("write downgraded to `{v}`"),
                    Some(grant),
                    Some(v),
                ),
                None => decide(
                    Verdict::Deny,
                    reason_if_denied,
                    format!("write `{resource}` blocked and no read-only variant is declared"),
                    Some(grant),
                    None,
                ),
            });
        }
        let verdict = if read_only { Verdict::AllowReadOnly } else { Verdict::Allow };
        Ok(decide(verdict, ReasonCode::Granted, format!("granted by `{}`", grant.grant_id), Some(grant), None))
    }

    /// Tracks denials; returns a burst signal when the configured count is
    /// reached within the window. The counter restarts after each burst.
    pub fn note_decision(&mut self, d: &Decision) -> Option<DenialBurst> {
        if d.verdict != Verdict::Deny || d.reason == ReasonCode::Isolated || self.policy.config.denial_burst_count == 0 {
            return None;
        }
        let window = self.policy.config.denial_burst_window_ms;
        let q = self.denials.entry(d.agent_id.clone()).or_default();
        q.push_back(d.evaluated_at_ms);
        while q.front().is_some_and(|&t| d.evaluated_at_ms - t > window) {
            q.pop_front();
        }
        if q.len() >= self.policy.config.denial_burst_count {
            let n = q.len();
            q.clear();
            return Some(DenialBurst {
                agent_id: d.agent_id.clone(),
                denials: n,
                window_ms: window,
                at_ms: d.evaluated_at_ms,
            });
        }
        None
    }

    /// Adds a parent→child link without grants (e.g. `parent_agent_id` seen).
    pub fn link(&mut self, parent: &str, child: &str) -> Result<bool, AuthzError> {
        self.graph.link(parent, child)
    }

    fn authority_allows(&self, role: Option<&str>, resource: &str) -> bool {
        if self.policy.authority_matrix.is_empty() {
            return true;
        }
        role.and_then(|r| self.policy.authority_matrix.get(r))
            .is_some_and(|pats| pats.iter().any(|p| pattern_covers(p, resource)))
    }

    /// Copies each requested resource from a covering, unexpired parent grant.
    /// All-or-nothing: any uncovered resource rejects the whole delegation.
    pub fn record_delegation(
        &mut self,
        parent: &str,
        child: &str,
        grants: &[String],
        expires_at_ms: Option<i64>,
        now_ms: i64,
    ) -> Result<Vec<String>, AuthzError> {
        let outcome = self.try_delegate(parent, child, grants, expires_at_ms, now_ms);
        self.audit.push(DelegationAudit {
            parent: parent.into(),
            child: child.into(),
            requested: grants.to_vec(),
            granted: outcome.as_ref().map(|g| g.clone()).unwrap_or_default(),
            outcome: match &outcome {
                Ok(_) => "granted".into(),
                Err(e) => e.to_string(),
            },
            at_ms: now_ms,
        });
        outcome
    }

    fn try_delegate(
        &mut self,
        parent: &str,
        child: &str,
        grants: &[String],
        expires_at_ms: Option<i64>,
        now_ms: i64,
    ) -> Result<Vec<String>, AuthzError> {
        let linked = self.graph.has_link(parent, child);
        if !linked && self.graph.would_cycle(parent, child) {
            return Err(AuthzError::CycleDetected {
                parent: parent.into(),
                child: child.into(),
            });
        }
        let parent_role = self.contexts.get(parent).and_then(|c| c.role.as_deref());
        let held = self.permissions(parent);
        let mut sources: Vec<&Permission> = Vec::with_capacity(grants.len());
        for r in grants {
            let source = held
                .iter()
                .filter(|p| !p.expired_at(now_ms) && p.covers(r))
                .min_by(|a, b| a.effect.cmp(&b.effect).then_with(|| a.grant_id.cmp(&b.grant_id)));
            let Some(source) = source else {
                return Err(AuthzError::EscalationAttempt {
                    parent: parent.into(),
                    child: child.into(),
                    resource: r.clone(),
                    reason: "not held by the grantor".into(),
                });
            };
            if !self.authority_allows(parent_role, r) {
                return Err(AuthzError::EscalationAttempt {
                    parent: parent.into(),
                    child: child.into(),
                    resource: r.clone(),
                    reason: format!("role {:?} may not delegate it", parent_role.unwrap_or("none")),
                });
            }
            sources.push(source);
        }
        let requested_exp = expires_at_ms.unwrap_or(now_ms + self.policy.config.default_delegation_expiry_ms);
        let mut seq = self.delegation_seq;
        let mut edge_exp = requested_exp;
        let mut copies = Vec::with_capacity(grants.len());
        for (r, src) in grants.iter().zip(sources) {
            seq += 1;
            let exp = src.expires_at_ms.map_or(requested_exp, |e| e.min(requested_exp));
            edge_exp = edge_exp.min(exp);
            copies.push(Permission {
                grant_id: format!("{child}/d{seq}"),
                holder: child.into(),
                resource: r.clone(),
                effect: src.effect,
                constraints: src.constraints.clone(),
                goal_scope: src.goal_scope.clone(),
                expires_at_ms: Some(exp),
                provenance: Provenance::Delegated {
                    from: parent.into(),
                    depth: src.provenance.depth() + 1,
                },
                source_grant: Some(src.grant_id.clone()),
            });
        }
        self.delegation_seq = seq;
        if !linked {
            self.graph.insert_link(parent, child);
        }
        let ids: Vec<String> = copies.iter().map(|p| p.grant_id.clone()).collect();
        self.permissions.entry(child.into()).or_default().extend(copies);
        self.graph.edges.push(DelegationEdge {
            parent: parent.into(),
            child: child.into(),
            grant_ids: ids.clone(),
            granted_at_ms: now_ms,
            expires_at_ms: edge_exp,
        });
        Ok(ids)
    }

    /// Removes a permission and every delegated copy derived from it.
    pub fn revoke(&mut self, grant_id: &str, trigger: ShiftTrigger) -> Vec<PermissionUpdate> {
        let mut out = Vec::new();
        let mut queue: VecDeque<(String, Option<String>)> = VecDeque::from([(grant_id.to_string(), None)]);
        while let Some((id, from)) = queue.pop_front() {
            let mut removed = None;
            for perms in self.permissions.values_mut() {
                if let Some(pos) = perms.iter().position(|p| p.grant_id == id) {
                    removed = Some(perms.remove(pos));
                    break;
                }
            }
            let Some(p) = removed else { continue };
            for perms in self.permissions.values() {
                for q in perms {
                    if q.source_grant.as_deref() == Some(id.as_str()) {
                        queue.push_back((q.grant_id.clone(), Some(id.clone())));
                    }
                }
            }
            out.push(PermissionUpdate {
                holder: p.holder,
                grant_id: p.grant_id,
                resource: p.resource,
                action: ShiftAction::Revoked,
                trigger,
                cascaded_from: from,
            });
        }
        out
    }

    /// Re-evaluates an agent's permissions after a significant shift.
    /// Goal-scoped grants that no longer match are revoked (cascading);
    /// write-class grants of a tool-restricted agent are reported narrowed.
    pub fn on_context_shift(&mut self, agent: &str, trigger: ShiftTrigger) -> Vec<PermissionUpdate> {
        let Some(ctx) = self.contexts.get(agent).cloned() else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut to_revoke = Vec::new();
        for p in self.permissions(agent) {
            if !p.scope_matches(&ctx.goal_id) {
                to_revoke.push(p.grant_id.clone());
                continue;
            }
            let action = if ctx.active_containment >= ContainmentLevel::ToolRestriction
                && self.policy.config.is_write_class(&p.resource)
            {
                ShiftAction::Narrowed
            } else {
                ShiftAction::Retained
            };
            out.push(PermissionUpdate {
                holder: agent.into(),
                grant_id: p.grant_id.clone(),
                resource: p.resource.clone(),
                action,
                trigger,
                cascaded_from: None,
            });
        }
        for id in to_revoke {
            out.extend(self.revoke(&id, trigger));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predicate::CmpOp;
    use crate::telemetry::{classify_verb, Scalar};

    fn req(agent: &str, ts: i64, verb: &str, tool: &str, extra: &[(&str, Scalar)]) -> Event {
        let mut payload: BTreeMap<String, Scalar> = extra.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        payload.insert("tool".into(), tool.into());
        Event {
            event_id: format!("{agent}-{ts}"),
            agent_id: agent.into(),
            session_id: "s".into(),
            timestamp_ms: ts,
            verb: verb.into(),
            category: classify_verb(verb, false).unwrap().category,
            risk_tier: RiskTier::HighlyCapable,
            goal_id: String::new(),
            parent_agent_id: None,
            payload,
        }
    }

    fn spec(resource: &str) -> PermissionSpec {
        PermissionSpec {
            grant_id: None,
            resource: resource.into(),
            effect: Effect::Allow,
            constraints: vec![],
            goal_scope: None,
            expires_at_ms: None,
        }
    }

    fn authz(grants: &[(&str, Vec<PermissionSpec>)]) -> Authz {
        Authz::new(
            AuthzConfig::default(),
            grants.iter().map(|(a, g)| (a.to_string(), g.clone())).collect(),
            BTreeMap::new(),
            BTreeMap::new(),
        )
    }

    #[test]
    fn goal_context_mismatch() {
        let mut s = spec("tool.invoke:db.read");
        s.goal_scope = Some("data analysis".into());
        let mut a = authz(&[("bank", vec![s])]);
        a.ensure_agent("bank", "s", RiskTier::HighlyCapable).goal_id = "data analysis".into();
        let d = a.evaluate(&req("bank", 0, "tool.invoke", "system.configure", &[])).unwrap();
        assert_eq!((d.verdict, d.reason), (Verdict::Deny, ReasonCode::GoalContextMismatch));
        let d = a.evaluate(&req("bank", 0, "tool.invoke", "db.read", &[])).unwrap();
        assert_eq!(d.verdict, Verdict::Allow);
        assert_eq!(d.provenance_chain, ["bank/bank#0"]);
    }

    #[test]
    fn expiry_boundary() {
        let mut s = spec("tool.invoke:*");
        s.expires_at_ms = Some(1000);
        let mut a = authz(&[("x", vec![s])]);
        a.ensure_agent("x", "s", RiskTier::BasicAgency);
        assert_eq!(a.evaluate(&req("x", 1000, "tool.invoke", "t", &[])).unwrap().verdict, Verdict::Allow);
        let d = a.evaluate(&req("x", 1001, "tool.invoke", "t", &[])).unwrap();
        assert_eq!((d.verdict, d.reason), (Verdict::Deny, ReasonCode::Expired));
    }

    #[test]
    fn constraints_and_unknown_agent() {
        let mut s = spec("tool.invoke:bank.transfer");
        s.constraints = vec![Condition::new("amount", CmpOp::Le, 10_000i64)];
        let mut a = authz(&[("t*", vec![s])]);
        assert!(matches!(
            a.evaluate(&req("t1", 0, "tool.invoke", "bank.transfer", &[])),
            Err(AuthzError::UnknownAgent(_))
        ));
        a.ensure_agent("t1", "s", RiskTier::FullyAgentic);
        let ok = a.evaluate(&req("t1", 0, "tool.invoke", "bank.transfer", &[("amount", 500i64.into())])).unwrap();
        assert_eq!(ok.verdict, Verdict::Allow);
        let no = a.evaluate(&req("t1", 0, "tool.invoke", "bank.transfer", &[("amount", 50_000i64.into())])).unwrap();
        assert_eq!(no.reason, ReasonCode::ConstraintFailed);
        let none = a.evaluate(&req("t1", 0, "api.call", "x", &[])).unwrap();
        assert_eq!(none.reason, ReasonCode::NoPermission);
    }

    #[test]
    fn tool_restriction_downgrades_writes() {
        let mut cfg = AuthzConfig::default();
        cfg.read_only_variants.insert("tool.invoke:db.write".into(), "tool.invoke:db.read".into());
        let mut a = Authz::new(cfg, [("x".to_string(), vec![spec("tool.invoke:*")])].into(), BTreeMap::new(), BTreeMap::new());
        a.ensure_agent("x", "s", RiskTier::HighlyCapable).active_containment = ContainmentLevel::ToolRestriction;
        let d = a.evaluate(&req("x", 0, "tool.invoke", "db.write", &[])).unwrap();
        assert_eq!(d.verdict, Verdict::AllowReadOnly);
        assert_eq!(d.read_only_variant.as_deref(), Some("tool.invoke:db.read"));
        let d = a.evaluate(&req("x", 0, "tool.invoke", "bank.transfer", &[])).unwrap();
        assert_eq!((d.verdict, d.reason), (Verdict::Deny, ReasonCode::ToolRestricted));
        let d = a.evaluate(&req("x", 0, "tool.invoke", "web.search", &[])).unwrap();
        assert_eq!(d.verdict, Verdict::Allow);
    }

    #[test]
    fn isolation_denies_all_but_exempt_verbs() {
        let mut a = authz(&[("x", vec![spec("*")])]);
        a.ensure_agent("x", "s", RiskTier::HighlyCapable).active_containment = ContainmentLevel::ExecutionIsolation;
        for verb in ["api.call", "tool.invoke", "db.read"] {
            let d = a.evaluate(&req("x", 0, verb, "t", &[])).unwrap();
            assert_eq!((d.verdict, d.reason), (Verdict::Deny, ReasonCode::Isolated));
        }
        let d = a.evaluate(&req("x", 0, "approve.action", "t", &[])).unwrap();
        assert_eq!((d.verdict, d.reason), (Verdict::Allow, ReasonCode::Exempt));
    }

    #[test]
    fn monitoring_changes_nothing() {
        let mut a = authz(&[("x", vec![spec("tool.invoke:*")])]);
        a.ensure_agent("x", "s", RiskTier::HighlyCapable);
        let before = a.evaluate(&req("x", 0, "tool.invoke", "db.write", &[])).unwrap();
        a.context_mut("x").unwrap().active_containment = ContainmentLevel::Monitoring;
        let after = a.evaluate(&req("x", 0, "tool.invoke", "db.write", &[])).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn delegation_subset_and_escalation() {
        let mut a = authz(&[("p", vec![spec("tool.invoke:a"), spec("tool.invoke:b")])]);
        a.ensure_agent("p", "s", RiskTier::HighlyCapable);
        a.ensure_agent("c", "s", RiskTier::HighlyCapable);
        let ids = a.record_delegation("p", "c", &["tool.invoke:a".into()], None, 100).unwrap();
        let copy = &a.permissions("c")[0];
        assert_eq!(copy.grant_id, ids[0]);
        assert_eq!(copy.provenance, Provenance::Delegated { from: "p".into(), depth: 1 });
        assert_eq!(copy.expires_at_ms, Some(100 + DEFAULT_DELEGATION_EXPIRY_MS));
        assert_eq!(a.provenance_chain(&ids[0]), [ids[0].clone(), "p/p#0".into()]);

        a.ensure_agent("c2", "s", RiskTier::HighlyCapable);
        let err = a.record_delegation("c", "c2", &["tool.invoke:a".into(), "tool.invoke:b".into()], None, 200);
        assert!(matches!(err, Err(AuthzError::EscalationAttempt { .. })));
        assert!(a.permissions("c2").is_empty());
        assert_eq!(a.audit().len(), 2);
    }

    #[test]
    fn delegation_cycle_rejected() {
        let mut a = authz(&[("*", vec![spec("tool.invoke:*")])]);
        for x in ["root", "p", "c"] {
            a.ensure_agent(x, "s", RiskTier::BasicAgency);
        }
        a.record_delegation("root", "p", &["tool.invoke:a".into()], None, 0).unwrap();
        a.record_delegation("p", "c", &["tool.invoke:a".into()], None, 0).unwrap();
        assert!(matches!(
            a.record_delegation("c", "root", &["tool.invoke:a".into()], None, 0),
            Err(AuthzError::CycleDetected { .. })
        ));
    }

    #[test]
    fn authority_matrix_limits_delegation() {
        let mut a = Authz::new(
            AuthzConfig::default(),
            [("*".to_string(), vec![spec("tool.invoke:*")])].into(),
            [("boss".to_string(), "manager".to_string())].into(),
            [("manager".to_string(), vec!["tool.invoke:report".to_string()])].into(),
        );
        for x in ["boss", "clerk", "c"] {
            a.ensure_agent(x, "s", RiskTier::BasicAgency);
        }
        assert!(a.record_delegation("boss", "c", &["tool.invoke:report".into()], None, 0).is_ok());
        assert!(a.record_delegation("boss", "c", &["tool.invoke:pay".into()], None, 0).is_err());
        assert!(a.record_delegation("clerk", "c", &["tool.invoke:report".into()], None, 0).is_err());
    }

    #[test]
    fn goal_shift_revokes_and_cascades() {
        let mut scoped = spec("tool.invoke:db.write");
        scoped.goal_scope = Some("data analysis".into());
        let mut a = authz(&[("p", vec![scoped, spec("tool.invoke:db.read")])]);
        a.ensure_agent("p", "s", RiskTier::HighlyCapable).goal_id = "data analysis".into();
        a.ensure_agent("c", "s", RiskTier::HighlyCapable);
        a.ensure_agent("g", "s", RiskTier::HighlyCapable);
        a.record_delegation("p", "c", &["tool.invoke:db.write".into(), "tool.invoke:db.read".into()], None, 0).unwrap();
        a.record_delegation("c", "g", &["tool.invoke:db.write".into()], None, 0).unwrap();

        a.context_mut("p").unwrap().goal_id = "system configuration".into();
        let ups = a.on_context_shift("p", ShiftTrigger::GoalChange);
        let revoked: Vec<_> = ups.iter().filter(|u| u.action == ShiftAction::Revoked).map(|u| u.holder.as_str()).collect();
        assert_eq!(revoked, ["p", "c", "g"]);
        assert!(ups.iter().any(|u| u.action == ShiftAction::Retained && u.resource == "tool.invoke:db.read"));
        assert_eq!(a.permissions("c").len(), 1);
        assert!(a.permissions("g").is_empty());
    }

    #[test]
    fn unscoped_permissions_retained() {
        let mut a = authz(&[("p", vec![spec("tool.invoke:a")])]);
        a.ensure_agent("p", "s", RiskTier::HighlyCapable).goal_id = "x".into();
        let ups = a.on_context_shift("p", ShiftTrigger::GoalChange);
        assert!(ups.iter().all(|u| u.action == ShiftAction::Retained));
    }

    #[test]
    fn denial_burst() {
        let mut a = authz(&[]);
        a.ensure_agent("x", "s", RiskTier::HighlyCapable);
        let mut bursts = 0;
        for ts in [0, 10_000, 20_000, 100_000, 200_000, 210_000, 215_000] {
            let d = a.evaluate(&req("x", ts, "api.call", "e", &[])).unwrap();
            bursts += a.note_decision(&d).is_some() as usize;
        }
        assert_eq!(bursts, 2);
    }

    #[test]
    fn group_roots() {
        let mut g = DelegationGraph::default();
        g.link("m", "z").unwrap();
        g.link("b", "y").unwrap();
        assert_eq!(g.group_root("z"), "m");
        g.link("y", "z").unwrap();
        for x in ["m", "z", "b", "y"] {
            assert_eq!(g.group_root(x), "b");
        }
        assert_eq!(g.group_root("lonely"), "lonely");
        assert_eq!(g.descendants("b"), ["y", "z"]);
        g.link("t", "a").unwrap();
        assert_eq!(g.group_root("a"), "t");
    }
}
