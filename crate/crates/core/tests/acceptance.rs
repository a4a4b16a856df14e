//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Tolerances and time budgets are pinned in
//! the constants below.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Parser;
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agentgov::authz::{Authz, AuthzConfig, AuthzError, DelegationGraph, PermissionSpec, Provenance, ShiftTrigger};
use agentgov::cli::Cli;
use agentgov::conformance::{RuleSpec, ViolationKind};
use agentgov::containment::{
    score_signals, select_level, ContainmentConfig, ContainmentController, ContainmentLevel, ContextFactors, Signal,
    SignalKind,
};
use agentgov::drift::{js_divergence, mann_whitney_u, Severity, ShiftVerdict};
use agentgov::harness::generate::{AgentSpec, GoalScript, Regime};
use agentgov::harness::{evaluate, generate, run_suite, AttackType, GroundTruth, Profile, Ratio as MRatio, ScenarioSpec};
use agentgov::telemetry::{read_trace, ParseOptions};
use agentgov::{compute_ari, replay, tier_for, EngineOptions, EnforcementMode, Event, Policy, Report, RiskTier, ScoreSheet};

const ARI_SHEETS: usize = 100_000;
const ARI_BUDGET: Duration = Duration::from_secs(5);
const DUAL_BUDGET: Duration = Duration::from_secs(1);
const REORDER_TRACES: usize = 1_000;
const REORDER_BUDGET: Duration = Duration::from_secs(60);
const OK_RULE_COUNTS: [usize; 6] = [1, 2, 4, 8, 16, 32];
const OK_MIN_R2: f64 = 0.99;
const OK_MIN_EVENTS_PER_SEC: f64 = 50_000.0;
const JSD_PAIRS: usize = 10_000;
const JSD_TOL: f64 = 1e-12;
const MWU_SAMPLES: usize = 1_000;
const DRIFT_TRIALS: usize = 200;
const DRIFT_MIN_HIT: f64 = 0.95;
const DRIFT_MAX_BENIGN: f64 = 0.05;
const DRIFT_WINDOWS: usize = 2;
const SHIFT_TRIALS: usize = 50;
const DELEGATION_MAX_NODES: usize = 5;
const DELEGATION_BUDGET: Duration = Duration::from_secs(30);
const RATCHET_SEQUENCES: usize = 1_000;
const SUITE_BUDGET: Duration = Duration::from_secs(120);

const TEAM: [&str; 4] = ["trader_1", "analyst_1", "support_1", "compliance_1"];

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn load_trace(path: &Path) -> Vec<Event> {
    let f = File::open(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    read_trace(BufReader::new(f), &ParseOptions::default()).expect("fixture parses")
}

fn observe() -> EngineOptions {
    EngineOptions::default()
}

fn mode(m: EnforcementMode) -> EngineOptions {
    EngineOptions {
        mode: m,
        ..Default::default()
    }
}

// ---------------------------------------------------------------- ARI

fn oracle_tier(total: u32) -> RiskTier {
    let a = Ratio::new(total, 36);
    if a <= Ratio::new(1, 4) {
        RiskTier::BasicAgency
    } else if a <= Ratio::new(1, 2) {
        RiskTier::SemiAgentic
    } else if a <= Ratio::new(3, 4) {
        RiskTier::HighlyCapable
    } else {
        RiskTier::FullyAgentic
    }
}

fn ari_arithmetic() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..ARI_SHEETS {
        let mut rows = [[0u8; 4]; 3];
        for v in rows.iter_mut().flatten() {
            *v = rng.gen_range(0..=3);
        }
        let r = compute_ari(&ScoreSheet::new(rows).unwrap());
        let total: u32 = rows.iter().flatten().map(|&v| v as u32).sum();
        let exact = Ratio::new(total, 36);
        // the float is the correctly rounded quotient, so it converts back exactly
        let back = Ratio::<i64>::approximate_float(r.ari).ok_or("ari not finite")?;
        ensure(r.total_score == total, || format!("total {} vs {total}", r.total_score))?;
        ensure(back == Ratio::new(*exact.numer() as i64, *exact.denom() as i64), || {
            format!("ari {} is not {exact}", r.ari)
        })?;
        ensure(r.tier == oracle_tier(total), || format!("tier {:?} for total {total}", r.tier))?;
        ensure(tier_for(r.ari).unwrap() == r.tier, || format!("tier_for disagrees at {total}"))?;
    }
    for (v, want) in [
        (0.25, 1),
        (0.2500001, 2),
        (0.50, 2),
        (0.5000001, 3),
        (0.71, 3),
        (0.75, 3),
        (0.7500001, 4),
    ] {
        let got = tier_for(v).unwrap().value();
        ensure(got == want, || format!("tier_for({v}) = {got}, want {want}"))?;
    }
    for total in [9u32, 18, 27] {
        ensure(oracle_tier(total).value() as u32 == total / 9, || format!("boundary total {total}"))?;
    }
    Ok(format!("{ARI_SHEETS} sheets exact; boundaries 0.25/0.50/0.75 inclusive; 0.71 -> tier 3"))
}

// ---------------------------------------------------------------- dual control

fn dual_control() -> Check {
    let mut parts = Vec::new();
    for (file, want) in [("approved_30s", 0usize), ("approved_61s", 1), ("approval_absent", 1)] {
        let events = load_trace(&fixtures().join("dual_control").join(format!("{file}.jsonl")));
        let a = replay(Policy::default_policy(), observe(), events.clone());
        let b = replay(Policy::default_policy(), observe(), events);
        ensure(a == b, || format!("{file}: nondeterministic"))?;
        let expired = a
            .violations
            .iter()
            .filter(|v| v.rule_id == "dual_control" && v.kind == ViolationKind::DeadlineExpired)
            .count();
        ensure(a.violations.len() == want && expired == want, || {
            format!("{file}: {} violations ({expired} expired), want {want}", a.violations.len())
        })?;
        parts.push(format!("{file}={expired}"));
    }
    Ok(parts.join(" "))
}

// ---------------------------------------------------------------- reordering

type ViolationKey = (String, ViolationKind, Vec<String>);

fn violation_set(r: &Report) -> BTreeSet<ViolationKey> {
    r.violations
        .iter()
        .map(|v| (v.rule_id.clone(), v.kind, v.triggering_event_ids.clone()))
        .collect()
}

fn random_spec(rng: &mut ChaCha8Rng, id: &str) -> ScenarioSpec {
    let n = rng.gen_range(1..=3);
    let start = rng.gen_range(0..TEAM.len());
    let agents: Vec<&str> = (0..n).map(|i| TEAM[(start + i) % TEAM.len()]).collect();
    let mut spec = ScenarioSpec::benign(id, rng.gen(), rng.gen_range(60..240), &agents);
    for _ in 0..rng.gen_range(0..=2) {
        let attack = [
            AttackType::DualControlBypass,
            AttackType::DataExfiltrationSequence,
            AttackType::UnauthorizedAccess,
            AttackType::PrivilegeEscalation,
        ][rng.gen_range(0..4)];
        let agent = agents[rng.gen_range(0..agents.len())];
        spec = spec.with_injection(attack, agent, rng.gen_range(5..50));
    }
    spec
}

fn reordering() -> Check {
    let window = Policy::default_policy().doc.engine.reorder_window_ms;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut displaced, mut total_violations) = (0usize, 0usize);
    for t in 0..REORDER_TRACES {
        let spec = random_spec(&mut rng, &format!("ro{t}"));
        let (sorted, _) = generate(&spec).map_err(|e| e.to_string())?;
        let mut keyed: Vec<(i64, Event)> = sorted
            .iter()
            .map(|e| (e.timestamp_ms + rng.gen_range(0..window), e.clone()))
            .collect();
        keyed.sort_by_key(|(k, _)| *k);
        let permuted: Vec<Event> = keyed.into_iter().map(|(_, e)| e).collect();
        displaced += permuted.iter().zip(&sorted).filter(|(a, b)| a.event_id != b.event_id).count();

        let base = replay(Policy::default_policy(), observe(), sorted.clone());
        let again = replay(Policy::default_policy(), observe(), sorted);
        let shuffled = replay(Policy::default_policy(), observe(), permuted);
        let (vs, va, vp) = (violation_set(&base), violation_set(&again), violation_set(&shuffled));
        ensure(vs == va, || format!("trace {t}: sorted replays differ"))?;
        ensure(vp.is_subset(&vs), || format!("trace {t}: permuted input produced {:?}", vp.difference(&vs)))?;
        ensure(shuffled.late_event_ids.is_empty(), || format!("trace {t}: late events"))?;
        total_violations += vs.len();
    }
    Ok(format!(
        "{REORDER_TRACES} traces, {displaced} displaced events, {total_violations} violations, permuted ⊆ sorted"
    ))
}

// ---------------------------------------------------------------- O(k)

fn rules(k: usize) -> Vec<RuleSpec> {
    let tools = ["market.fetch", "risk.calc", "stats.run", "ticket.update", "alert.raise", "report.build"];
    (0..k)
        .map(|i| {
            let src = format!(
                "rule_id = \"r{i}\"\nmode = \"forbidden_sequence\"\nwindow_ms = 30000\nsteps = [{{ verb = \"tool.invoke\", payload = {{ tool = \"{}\" }} }}, {{ verb = \"api.call\", payload = {{ endpoint = \"sink{i}\" }} }}]\n",
                tools[i % tools.len()]
            );
            toml::from_str(&src).expect("rule parses")
        })
        .collect()
}

fn policy_with_rules(k: usize) -> Policy {
    let mut doc = Policy::default_policy().doc;
    doc.rules = rules(k);
    Policy::from_doc(doc, "<bench>").expect("valid")
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - (icpt + slope * x)).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    (slope, icpt, 1.0 - ss_res / ss_tot)
}

fn linear_in_rules() -> Check {
    let spec = ScenarioSpec::benign("ok", 77, 20_000, &TEAM);
    let (events, _) = generate(&spec).map_err(|e| e.to_string())?;
    let n = events.len() as f64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rate_k8 = 0.0;
    for &k in &OK_RULE_COUNTS {
        let policy = policy_with_rules(k);
        let t0 = Instant::now();
        let r = replay(policy, observe(), events.clone());
        let secs = t0.elapsed().as_secs_f64();
        xs.push(k as f64);
        ys.push(r.predicate_evaluations as f64 / n);
        if k == 8 {
            rate_k8 = n / secs;
        }
    }
    let (slope, icpt, r2) = linear_fit(&xs, &ys);
    let detail = format!(
        "evals/event = {slope:.3}k + {icpt:.3}, R² = {r2:.6}; {rate_k8:.0} events/s at k=8 (full engine)"
    );
    ensure(r2 > OK_MIN_R2, || format!("R² too low: {detail}"))?;
    ensure(rate_k8 >= OK_MIN_EVENTS_PER_SEC, || format!("throughput too low: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- JSD / MWU

fn jsd_oracle(p: &[f64], q: &[f64]) -> f64 {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    let kl = |a: &[f64], sa: f64| -> f64 {
        a.iter()
            .zip(p.iter().zip(q))
            .map(|(&x, (&pp, &qq))| {
                let x = x / sa;
                let m = 0.5 * (pp / sp + qq / sq);
                if x > 0.0 {
                    x * (x / m).ln()
                } else {
                    0.0
                }
            })
            .sum()
    };
    (0.5 * kl(p, sp) + 0.5 * kl(q, sq)) / std::f64::consts::LN_2
}

fn stat_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..JSD_PAIRS {
        let n = rng.gen_range(1..=24);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.0..100.0) })
                .collect();
            if v.iter().all(|x| *x == 0.0) {
                v[0] = 1.0;
            }
            v
        };
        let p = draw(&mut rng);
        let q = draw(&mut rng);
        let got = js_divergence(&p, &q).map_err(|e| e.to_string())?;
        let want = jsd_oracle(&p, &q).clamp(0.0, 1.0);
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= JSD_TOL, || format!("JSD max error {worst:e}"))?;
    for i in 0..MWU_SAMPLES {
        let a: Vec<f64> = (0..rng.gen_range(8..=20)).map(|_| rng.gen_range(0..8) as f64).collect();
        let b: Vec<f64> = (0..rng.gen_range(8..=20)).map(|_| rng.gen_range(0..8) as f64).collect();
        let mut pairs = 0.0;
        for x in &a {
            for y in &b {
                pairs += if x > y {
                    1.0
                } else if x == y {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let r = mann_whitney_u(&a, &b).map_err(|e| e.to_string())?;
        ensure(r.u == pairs, || format!("sample {i}: U {} vs pair count {pairs}", r.u))?;
    }
    Ok(format!(
        "JSD max |err| {worst:.1e} over {JSD_PAIRS} pairs (tol {JSD_TOL:e}); MWU U exact on {MWU_SAMPLES} samples"
    ))
}

// ---------------------------------------------------------------- drift

fn agent_index(events: &[Event], agent: &str) -> BTreeMap<String, usize> {
    events
        .iter()
        .filter(|e| e.agent_id == agent)
        .enumerate()
        .map(|(i, e)| (e.event_id.clone(), i))
        .collect()
}

fn alerts<'a>(r: &'a Report, agent: &'a str) -> impl Iterator<Item = &'a agentgov::drift::DriftSignal> {
    r.drift_signals
        .iter()
        .filter(move |s| s.agent_id == agent && s.severity == Severity::Alert)
}

fn drift() -> Check {
    let policy = Policy::default_policy();
    let w = policy.doc.drift.window_size;
    let mut hits = 0usize;
    let mut benign_alerts = 0usize;
    for i in 0..DRIFT_TRIALS {
        let agent = TEAM[i % TEAM.len()];
        let spec = ScenarioSpec::benign(&format!("dr{i}"), 7_000 + i as u64, 700, &[agent])
            .with_injection(AttackType::DriftRegimeChange, agent, 250);
        let (events, gt) = generate(&spec).map_err(|e| e.to_string())?;
        let idx = agent_index(&events, agent);
        let change_at = gt.entries[0].committed_at_ms;
        let change = events
            .iter()
            .filter(|e| e.agent_id == agent && e.timestamp_ms >= change_at)
            .map(|e| idx[&e.event_id])
            .min()
            .ok_or("no post-change events")?;
        let r = replay(policy.clone(), observe(), events);
        let hit = alerts(&r, agent).any(|s| {
            let last = idx[&s.window_last];
            last >= change && last < change + DRIFT_WINDOWS * w
        });
        hits += usize::from(hit);

        let spec = ScenarioSpec::benign(&format!("db{i}"), 5_000 + i as u64, 700, &[agent]);
        let (events, _) = generate(&spec).map_err(|e| e.to_string())?;
        let r = replay(policy.clone(), observe(), events);
        benign_alerts += usize::from(alerts(&r, agent).next().is_some());
    }
    let hit_rate = hits as f64 / DRIFT_TRIALS as f64;
    let fa_rate = benign_alerts as f64 / DRIFT_TRIALS as f64;
    let detail = format!(
        "alerted within {DRIFT_WINDOWS} windows {hits}/{DRIFT_TRIALS}; benign trials alerting {benign_alerts}/{DRIFT_TRIALS}"
    );
    ensure(hit_rate >= DRIFT_MIN_HIT && fa_rate <= DRIFT_MAX_BENIGN, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- goal shift

fn goal_shift() -> Check {
    let policy = Policy::default_policy();
    let (mut flagged, mut adopted) = (0usize, 0usize);
    for i in 0..SHIFT_TRIALS {
        let agent = TEAM[i % TEAM.len()];
        let alt = Profile::from_agent_id(agent).unwrap().alternate_goal();

        let spec = ScenarioSpec::benign(&format!("rh{i}"), 12_000 + i as u64, 500, &[agent])
            .with_injection(AttackType::RewardHacking, agent, 250);
        let (events, _) = generate(&spec).map_err(|e| e.to_string())?;
        let r = replay(policy.clone(), observe(), events);
        let v: Vec<_> = r.goal_shift_verdicts.iter().filter(|v| v.new_goal == alt).collect();
        flagged += usize::from(v.len() == 1 && v[0].verdict == ShiftVerdict::FlagSuspicious);

        let mut a = AgentSpec::new(agent);
        a.goals.push(GoalScript {
            at: 250,
            goal: alt.into(),
            regime: Some(Regime::Shifted),
        });
        let mut spec = ScenarioSpec::benign(&format!("gs{i}"), 13_000 + i as u64, 500, &[agent]);
        spec.agents = vec![a];
        let (events, _) = generate(&spec).map_err(|e| e.to_string())?;
        let r = replay(policy.clone(), observe(), events);
        let v: Vec<_> = r.goal_shift_verdicts.iter().filter(|v| v.new_goal == alt).collect();
        adopted += usize::from(v.len() == 1 && v[0].verdict == ShiftVerdict::AdoptNewBaseline);
    }
    let detail = format!("reward hacking flagged {flagged}/{SHIFT_TRIALS}; genuine shifts adopted {adopted}/{SHIFT_TRIALS}");
    ensure(flagged == SHIFT_TRIALS && adopted == SHIFT_TRIALS, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- delegation

const NODES: [&str; DELEGATION_MAX_NODES] = ["n0", "n1", "n2", "n3", "n4"];
const SHARED: &str = "db.read:r0";

fn delegation_base(n: usize) -> Authz {
    let direct: BTreeMap<String, Vec<PermissionSpec>> = (0..n)
        .map(|i| {
            (
                NODES[i].to_string(),
                vec![PermissionSpec {
                    grant_id: None,
                    resource: format!("db.read:r{i}"),
                    effect: Default::default(),
                    constraints: Vec::new(),
                    goal_scope: None,
                    expires_at_ms: None,
                }],
            )
        })
        .collect();
    let mut a = Authz::new(AuthzConfig::default(), direct, BTreeMap::new(), BTreeMap::new());
    for node in &NODES[..n] {
        a.ensure_agent(node, "s", RiskTier::HighlyCapable);
    }
    a
}

#[derive(Clone)]
struct Expected {
    /// Edge subset chosen so far, one bit per entry of `pairs`.
    mask: u32,
    /// reach[v]: nodes reachable from v, v included.
    reach: [u32; DELEGATION_MAX_NODES],
    /// Nodes holding the shared resource.
    holds: u32,
    accepted: usize,
}

/// Offers edge `p -> c` and compares the outcome with the oracle.
fn offer(authz: &mut Authz, st: &mut Expected, n: usize, p: usize, c: usize) -> Result<(), String> {
    let mask = st.mask;
    let got = authz.record_delegation(NODES[p], NODES[c], &[SHARED.to_string()], None, 0);
    if st.reach[c] & (1 << p) != 0 {
        ensure(matches!(got, Err(AuthzError::CycleDetected { .. })), || {
            format!("mask {mask:#x}: {p}->{c} should close a cycle, got {got:?}")
        })
    } else if st.holds & (1 << p) == 0 {
        ensure(matches!(got, Err(AuthzError::EscalationAttempt { .. })), || {
            format!("mask {mask:#x}: {p}->{c} is an escalation, got {got:?}")
        })
    } else {
        ensure(got.is_ok(), || format!("mask {mask:#x}: {p}->{c} rejected: {got:?}"))?;
        st.holds |= 1 << c;
        st.accepted += 1;
        let rc = st.reach[c];
        for v in 0..n {
            if st.reach[v] & (1 << p) != 0 {
                st.reach[v] |= rc;
            }
        }
        Ok(())
    }
}

/// Invariants of the final state of one edge set.
fn verify(mut authz: Authz, st: &Expected, n: usize) -> Result<(), String> {
    let mask = st.mask;
    // acyclicity of what the graph actually recorded
    let node = |name: &str| (name.as_bytes()[1] - b'0') as usize;
    let mut adj = vec![0u32; n];
    for e in authz.graph().edges() {
        adj[node(&e.parent)] |= 1 << node(&e.child);
    }
    ensure(authz.graph().edges().len() == st.accepted, || format!("mask {mask:#x}: edge count"))?;
    let mut closure = adj.clone();
    for _ in 0..n {
        for v in 0..n {
            let mut r = closure[v];
            for u in 0..n {
                if r & (1 << u) != 0 {
                    r |= closure[u];
                }
            }
            closure[v] = r;
        }
    }
    ensure((0..n).all(|v| closure[v] & (1 << v) == 0), || format!("mask {mask:#x}: recorded graph has a cycle"))?;
    // subset and provenance
    let mut delegated = 0usize;
    for (v, name) in NODES[..n].iter().enumerate() {
        let perms = authz.permissions(name);
        let has = perms.iter().any(|p| p.resource == SHARED);
        ensure(has == (st.holds & (1 << v) != 0), || format!("mask {mask:#x}: {name} holding mismatch"))?;
        for perm in perms {
            match &perm.provenance {
                Provenance::Direct => ensure(
                    perm.resource.strip_prefix("db.read:r").and_then(|i| i.parse().ok()) == Some(v),
                    || format!("mask {mask:#x}: stray direct grant"),
                )?,
                Provenance::Delegated { from, depth } => {
                    delegated += 1;
                    let src_id = perm.source_grant.as_deref().ok_or("delegated grant without source")?;
                    let src = authz
                        .permissions(from)
                        .iter()
                        .find(|q| q.grant_id == src_id)
                        .ok_or_else(|| format!("mask {mask:#x}: source {src_id} not held by {from}"))?;
                    ensure(src.covers(&perm.resource) && src.provenance.depth() + 1 == *depth, || {
                        format!("mask {mask:#x}: {} exceeds its source", perm.grant_id)
                    })?;
                    ensure(adj[node(from)] & (1 << v) != 0, || format!("mask {mask:#x}: no edge {from}->{name}"))?;
                }
            }
        }
    }
    // cascade revocation of the root grant
    let updates = authz.revoke("n0/n0#0", ShiftTrigger::GoalChange);
    ensure(updates.len() == 1 + delegated, || {
        format!("mask {mask:#x}: revoked {} of {}", updates.len(), 1 + delegated)
    })?;
    for name in &NODES[..n] {
        ensure(!authz.permissions(name).iter().any(|p| p.resource == SHARED), || {
            format!("mask {mask:#x}: {name} kept {SHARED} after revocation")
        })?;
    }
    Ok(())
}

/// Visits every subset of `pairs`, offering the chosen edges in order. Edge
/// sets sharing a prefix share the state reached after it, so each prefix is
/// replayed once; every subset still ends in its own `verify`.
fn walk(pairs: &[(usize, usize)], n: usize, bit: usize, authz: Authz, st: Expected, tally: &mut (u64, usize)) -> Result<(), String> {
    if bit == pairs.len() {
        tally.0 += 1;
        tally.1 += st.accepted;
        return verify(authz, &st, n);
    }
    let (p, c) = pairs[bit];
    let mut with = authz.clone();
    let mut st_with = st.clone();
    st_with.mask |= 1 << bit;
    offer(&mut with, &mut st_with, n, p, c)?;
    walk(pairs, n, bit + 1, with, st_with, tally)?;
    walk(pairs, n, bit + 1, authz, st, tally)
}

fn delegation() -> Check {
    let mut tally = (0u64, 0usize);
    for n in 1..=DELEGATION_MAX_NODES {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|p| (0..n).filter(move |&c| c != p).map(move |c| (p, c)))
            .collect();
        let start = Expected {
            mask: 0,
            reach: std::array::from_fn(|v| 1 << v),
            holds: 1,
            accepted: 0,
        };
        walk(&pairs, n, 0, delegation_base(n), start, &mut tally)?;
    }
    Ok(format!(
        "{} edge sets over 1..={DELEGATION_MAX_NODES} nodes, {} delegations accepted",
        tally.0, tally.1
    ))
}

// ---------------------------------------------------------------- containment

fn containment() -> Check {
    let cfg = ContainmentConfig::default();
    let kinds = [
        Signal::new(SignalKind::Violation, "v"),
        Signal::critical("c"),
        Signal::new(SignalKind::DriftAlert, "d"),
        Signal::new(SignalKind::AuthzDenialBurst, "b"),
    ];
    let mut cases = 0usize;
    for subset in 1u32..16 {
        let signals: Vec<Signal> = (0..4).filter(|i| subset & (1 << i) != 0).map(|i| kinds[i].clone()).collect();
        for f in 0..243u32 {
            let v: Vec<u8> = (0..5).map(|i| (f / 3u32.pow(i) % 3) as u8 + 1).collect();
            let factors = ContextFactors {
                business_impact: v[0],
                financial_exposure: v[1],
                regulatory_scope: v[2],
                recovery_complexity: v[3],
                time_sensitivity: v[4],
            };
            let levels: Vec<ContainmentLevel> = RiskTier::ALL
                .iter()
                .map(|&t| select_level(score_signals(&signals, t, &factors, &cfg.severity), &cfg.thresholds).unwrap())
                .collect();
            ensure(levels.windows(2).all(|w| w[0] <= w[1]), || format!("not monotone: {levels:?}"))?;
            cases += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let agents = ["a", "b", "c", "d"];
    let mut releases = 0usize;
    for s in 0..RATCHET_SEQUENCES {
        let mut graph = DelegationGraph::default();
        graph.link("a", "b").unwrap();
        graph.link("b", "c").unwrap();
        let mut ctl = ContainmentController::new(cfg.clone());
        let mut prev: BTreeMap<&str, ContainmentLevel> = BTreeMap::new();
        let mut any_release = false;
        for step in 0..30 {
            let agent = agents[rng.gen_range(0..agents.len())];
            let released = rng.gen_bool(0.05);
            if released {
                ctl.release(agent, ContainmentLevel::None, step);
                releases += 1;
            } else {
                let k = rng.gen_range(1..=2);
                let signals: Vec<Signal> = (0..k).map(|_| kinds[rng.gen_range(0..4)].clone()).collect();
                let tier = RiskTier::ALL[rng.gen_range(0..4)];
                let factors = ContextFactors::uniform(rng.gen_range(1..=3));
                ctl.on_signals(agent, tier, &factors, &signals, &graph, step);
            }
            for a in agents {
                let now = ctl.level(a);
                let before = prev.get(a).copied().unwrap_or_default();
                ensure(now >= before || (released && a == agent), || {
                    format!("sequence {s} step {step}: {a} dropped {before:?} -> {now:?}")
                })?;
                prev.insert(a, now);
            }
            any_release |= released;
            // operator releases may legitimately leave a child below its parent
            if !any_release {
                for parent in agents {
                    if ctl.level(parent) >= ContainmentLevel::ToolRestriction {
                        for d in graph.descendants(parent) {
                            ensure(ctl.level(&d) >= ContainmentLevel::ToolRestriction, || {
                                format!("sequence {s}: descendant {d} of {parent} below tool restriction")
                            })?;
                        }
                    }
                }
            }
        }
    }
    Ok(format!(
        "{cases} signal/factor cases monotone over tiers; ratchet held over {RATCHET_SEQUENCES} sequences ({releases} releases)"
    ))
}

// ---------------------------------------------------------------- metrics

fn ratio(r: MRatio) -> (u64, u64) {
    (r.numerator, r.denominator)
}

fn end_to_end() -> Check {
    let policy = Policy::default_policy();
    let mut parts = Vec::new();
    for m in [EnforcementMode::Observe, EnforcementMode::Enforce] {
        let s = run_suite(&policy, &mode(m)).map_err(|e| e.to_string())?;
        let o = &s.overall;
        ensure(s.scenarios.len() == 50, || format!("{} scenarios", s.scenarios.len()))?;
        ensure(o.detection_rate.value == Some(1.0), || format!("{m:?}: detection {:?}", ratio(o.detection_rate)))?;
        ensure(s.benign_detections == 0, || format!("{m:?}: {} benign detections", s.benign_detections))?;
        ensure(o.risk_coverage_rate.value == Some(1.0), || format!("{m:?}: coverage {:?}", ratio(o.risk_coverage_rate)))?;
        parts.push(format!(
            "{}: detection {}/{} benign FP 0",
            m.as_str(),
            o.detection_rate.numerator,
            o.detection_rate.denominator
        ));
    }
    // (detection, fpr, coverage, clarity, predictive, proactive) by hand
    type Expected = [(u64, u64); 6];
    let audited: [(&str, EnforcementMode, Expected); 3] = [
        ("a_mixed", EnforcementMode::Observe, [(2, 3), (1, 4), (2, 3), (2, 2), (2, 3), (0, 3)]),
        ("b_enforce", EnforcementMode::Enforce, [(2, 2), (0, 3), (2, 2), (2, 2), (1, 2), (1, 2)]),
        ("c_late_approval", EnforcementMode::Observe, [(1, 1), (1, 2), (1, 1), (1, 1), (1, 1), (0, 1)]),
    ];
    for (name, m, want) in audited {
        let dir = fixtures().join("audited");
        let events = load_trace(&dir.join(format!("{name}.jsonl")));
        let gt = GroundTruth::read_jsonl(BufReader::new(File::open(dir.join(format!("{name}.gt.jsonl"))).unwrap()))?;
        let r = replay(policy.clone(), mode(m), events);
        let mr = evaluate(&gt, &r).map_err(|e| e.to_string())?;
        let got = [
            ratio(mr.detection_rate),
            ratio(mr.false_positive_rate),
            ratio(mr.risk_coverage_rate),
            ratio(mr.causal_chain_clarity),
            ratio(mr.predictive_alerting),
            ratio(mr.proactive_intervention),
        ];
        ensure(got == want, || format!("{name}: got {got:?}, want {want:?}"))?;
    }
    parts.push("3 audited fixtures match".into());
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- determinism

fn replay_determinism() -> Check {
    let mut traces: Vec<PathBuf> = Vec::new();
    for sub in ["dual_control", "audited", "benign"] {
        for e in std::fs::read_dir(fixtures().join(sub)).unwrap() {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            if name.ends_with(".jsonl") && !name.ends_with(".gt.jsonl") && name != "ground_truth.jsonl" {
                traces.push(p);
            }
        }
    }
    traces.sort();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0usize;
    for (i, trace) in traces.iter().enumerate() {
        let mut outs = Vec::new();
        for run in 0..2 {
            let out = tmp.path().join(format!("{i}-{run}"));
            let args = ["agentgov", "replay", "--trace", trace.to_str().unwrap(), "--out", out.to_str().unwrap()];
            let cli = Cli::try_parse_from(args).map_err(|e| e.to_string())?;
            let code = agentgov::cli::run(cli, &mut std::io::sink()).map_err(|e| e.to_string())?;
            ensure(code == 0 || code == 2, || format!("{}: exit {code}", trace.display()))?;
            outs.push(out);
        }
        let list = |d: &Path| -> BTreeSet<String> {
            std::fs::read_dir(d)
                .unwrap()
                .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .collect()
        };
        let names = list(&outs[0]);
        ensure(names == list(&outs[1]) && !names.is_empty(), || format!("{}: file sets differ", trace.display()))?;
        for n in &names {
            let a = std::fs::read(outs[0].join(n)).unwrap();
            let b = std::fs::read(outs[1].join(n)).unwrap();
            ensure(a == b, || format!("{}: {n} differs", trace.display()))?;
            files += 1;
        }
    }
    Ok(format!("{} fixtures, {files} output files byte-identical across two runs", traces.len()))
}

// ---------------------------------------------------------------- driver

fn main() {
    let criteria: [(&str, Option<Duration>, fn() -> Check); 11] = [
        ("ari_arithmetic", Some(ARI_BUDGET), ari_arithmetic),
        ("dual_control", Some(DUAL_BUDGET), dual_control),
        ("reordering", Some(REORDER_BUDGET), reordering),
        ("linear_in_rules", None, linear_in_rules),
        ("jsd_mwu_oracles", None, stat_oracles),
        ("drift_sensitivity_specificity", None, drift),
        ("goal_shift_verification", None, goal_shift),
        ("delegation_exhaustive", Some(DELEGATION_BUDGET), delegation),
        ("containment_monotonicity", None, containment),
        ("end_to_end_metrics", Some(SUITE_BUDGET), end_to_end),
        ("replay_determinism", None, replay_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let mut result = f();
        let took = t0.elapsed();
        if let (Ok(detail), Some(b)) = (&result, budget) {
            if took > b {
                result = Err(format!("{detail}; over budget {:.2}s > {:.0}s", took.as_secs_f64(), b.as_secs_f64()));
            }
        }
        let budget = budget.map_or(String::new(), |b| format!(" / {:.0}s", b.as_secs_f64()));
        match result {
            Ok(d) => println!("PASS {name} [{:.2}s{budget}] {d}", took.as_secs_f64()),
            Err(d) => {
                failed += 1;
                println!("FAIL {name} [{:.2}s{budget}] {d}", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
