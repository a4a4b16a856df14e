//! Goal-conditioned behavioral drift detection.
//!
//! Each (agent, goal) pair learns a baseline of action symbols (`verb` or
//! `verb:target`), symbol bigrams and continuous metrics (inter-event gap and
//! payload `amount`). Once established, every full window of recent events is
//! scored against it: Jensen-Shannon divergence for the discrete
//! distributions, Mann-Whitney |z| for the continuous ones. Windows without
//! an alert are folded back into the baseline.
//!
//! Declared goal changes are verified: the next window is compared against
//! the previous goal's baseline, and a relabel with unchanged behavior is
//! flagged as suspicious instead of adopted.

pub mod stats;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::Event;

pub use stats::{cosine_similarity, js_divergence, js_divergence_counts, mann_whitney_u, MwuResult};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DriftError {
    #[error("distribution has zero total mass")]
    EmptyDistribution,
    #[error("distribution contains negative or non-finite weights")]
    InvalidDistribution,
    #[error("distributions are over different supports")]
    SupportMismatch,
    #[error("need at least 8 samples per side (recent {recent}, baseline {baseline})")]
    InsufficientSamples { recent: usize, baseline: usize },
    #[error("baseline file: {0}")]
    BaselineFile(String),
}

pub const METRIC_SYMBOL: &str = "verb";
pub const METRIC_BIGRAM: &str = "bigram";
pub const METRIC_GAP: &str = "gap_ms";
pub const METRIC_AMOUNT: &str = "amount";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    pub window_size: usize,
    pub min_baseline_events: u64,
    pub reservoir_size: usize,
    pub alpha: f64,
    pub sigma_multiplier: f64,
    pub jsd_floor: f64,
    /// Floor for the bigram JSD, whose benign sampling noise sits well above
    /// the single-symbol one.
    pub bigram_jsd_floor: f64,
    pub mwu_floor: f64,
    pub adoption_margin: f64,
    pub seed_similarity: f64,
    pub seed_window: u64,
    /// Threshold multiplier while a seeded baseline is still unestablished.
    pub cold_start_factor: f64,
    /// Completed bigram windows that only calibrate the threshold. Bigram
    /// counts over a fresh baseline are sparse enough to trip the floor.
    pub bigram_warmup_windows: u64,
    pub rng_seed: u64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            window_size: 100,
            min_baseline_events: 50,
            reservoir_size: 512,
            alpha: 0.1,
            sigma_multiplier: 3.0,
            jsd_floor: 0.15,
            bigram_jsd_floor: 0.35,
            mwu_floor: 4.0,
            adoption_margin: 0.25,
            seed_similarity: 0.9,
            seed_window: 20,
            cold_start_factor: 2.0,
            bigram_warmup_windows: 1,
            rng_seed: 0x5eed,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window_size == 0 || self.min_baseline_events == 0 || self.reservoir_size == 0 {
            return Err("window_size, min_baseline_events and reservoir_size must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err("alpha must lie in (0, 1)".into());
        }
        if self.jsd_floor < 0.0 || self.bigram_jsd_floor < 0.0 || self.mwu_floor < 0.0 || self.adoption_margin < 0.0 {
            return Err("floors and adoption margin must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMethod {
    JsDivergence,
    MannWhitneyU,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Alert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSignal {
    pub signal_id: String,
    pub agent_id: String,
    pub goal_id: String,
    pub method: DriftMethod,
    pub metric: String,
    pub score: f64,
    pub threshold: f64,
    pub severity: Severity,
    pub window_first: String,
    pub window_last: String,
    pub window_event_ids: Vec<String>,
    pub emitted_at_ms: i64,
}

/// `max(floor, ewma_mean + k * sqrt(ewma_var))`, with the EWMA seeded by the
/// first score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveThreshold {
    pub ewma_mean: f64,
    pub ewma_var: f64,
    pub alpha: f64,
    pub floor: f64,
    pub multiplier: f64,
    pub observations: u64,
}

impl AdaptiveThreshold {
    pub fn new(alpha: f64, floor: f64, multiplier: f64) -> Self {
        Self {
            ewma_mean: 0.0,
            ewma_var: 0.0,
            alpha,
            floor,
            multiplier,
            observations: 0,
        }
    }

    pub fn threshold(&self) -> f64 {
        if self.observations == 0 {
            return self.floor;
        }
        self.floor
            .max(self.ewma_mean + self.multiplier * self.ewma_var.max(0.0).sqrt())
    }

    pub fn update(&mut self, x: f64) {
        if self.observations == 0 {
            self.ewma_mean = x;
            self.ewma_var = 0.0;
        } else {
            let d = x - self.ewma_mean;
            self.ewma_mean += self.alpha * d;
            self.ewma_var = (1.0 - self.alpha) * (self.ewma_var + self.alpha * d * d);
        }
        self.observations += 1;
    }
}

/// Bounded uniform sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Reservoir {
    pub samples: Vec<f64>,
    pub seen: u64,
}

impl Reservoir {
    fn add<R: Rng>(&mut self, x: f64, cap: usize, rng: &mut R) {
        self.seen += 1;
        if self.samples.len() < cap {
            self.samples.push(x);
        } else {
            let j = rng.gen_range(0..self.seen);
            if (j as usize) < cap {
                self.samples[j as usize] = x;
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GoalBaseline {
    pub agent_id: String,
    pub goal_id: String,
    pub verb_counts: BTreeMap<String, u64>,
    pub bigram_counts: BTreeMap<String, u64>,
    pub continuous_reservoirs: BTreeMap<String, Reservoir>,
    pub total_events: u64,
    /// Events observed under this goal (excludes seeded counts).
    pub own_events: u64,
    pub established: bool,
    #[serde(default)]
    pub seeded_from: Option<String>,
}

impl GoalBaseline {
    pub fn new(agent_id: &str, goal_id: &str) -> Self {
        Self {
            agent_id: agent_id.into(),
            goal_id: goal_id.into(),
            ..Default::default()
        }
    }

    fn absorb<R: Rng>(&mut self, obs: &Observation, cap: usize, rng: &mut R) {
        *self.verb_counts.entry(obs.symbol.clone()).or_default() += 1;
        if let Some(b) = &obs.bigram {
            *self.bigram_counts.entry(b.clone()).or_default() += 1;
        }
        for (name, v) in obs.continuous() {
            self.continuous_reservoirs
                .entry(name.to_string())
                .or_default()
                .add(v, cap, rng);
        }
        self.total_events += 1;
        self.own_events += 1;
    }
}

/// One event reduced to what drift scoring needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub event_id: String,
    pub symbol: String,
    pub bigram: Option<String>,
    pub gap_ms: Option<f64>,
    pub amount: Option<f64>,
}

impl Observation {
    fn continuous(&self) -> impl Iterator<Item = (&'static str, f64)> {
        [(METRIC_GAP, self.gap_ms), (METRIC_AMOUNT, self.amount)]
            .into_iter()
            .filter_map(|(n, v)| v.map(|v| (n, v)))
    }
}

pub fn symbol_of(event: &Event) -> String {
    event.resource()
}

#[derive(Debug, Clone, Default)]
struct Window {
    goal: String,
    obs: Vec<Observation>,
}

impl Window {
    fn symbol_counts(&self) -> BTreeMap<String, u64> {
        counts(self.obs.iter().map(|o| o.symbol.as_str()))
    }

    fn bigram_counts(&self) -> BTreeMap<String, u64> {
        counts(self.obs.iter().filter_map(|o| o.bigram.as_deref()))
    }

    fn series(&self, metric: &str) -> Vec<f64> {
        self.obs
            .iter()
            .filter_map(|o| match metric {
                METRIC_GAP => o.gap_ms,
                METRIC_AMOUNT => o.amount,
                _ => None,
            })
            .collect()
    }

    fn ids(&self) -> Vec<String> {
        self.obs.iter().map(|o| o.event_id.clone()).collect()
    }
}

fn counts<'a>(it: impl Iterator<Item = &'a str>) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    for s in it {
        *m.entry(s.to_string()).or_default() += 1;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftVerdict {
    AdoptNewBaseline,
    FlagSuspicious,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalShiftVerdict {
    pub verdict_id: String,
    pub agent_id: String,
    pub old_goal: String,
    pub new_goal: String,
    pub verdict: ShiftVerdict,
    pub jsd_vs_old: f64,
    pub jsd_vs_target: Option<f64>,
    pub margin: f64,
    pub window_event_ids: Vec<String>,
    pub decided_at_ms: i64,
}

#[derive(Debug, Clone)]
struct PendingShift {
    old_goal: String,
    new_goal: String,
    old_snapshot: BTreeMap<String, u64>,
    prior_target: Option<BTreeMap<String, u64>>,
    new_baseline_preexisting: bool,
    window: Window,
}

#[derive(Debug, Clone)]
struct AgentState {
    baselines: BTreeMap<String, GoalBaseline>,
    thresholds: BTreeMap<(String, String), AdaptiveThreshold>,
    window: Window,
    last_ts: Option<i64>,
    last_symbol: Option<String>,
    pending: Option<PendingShift>,
    rng: ChaCha8Rng,
    seq: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DriftOutput {
    pub signals: Vec<DriftSignal>,
    pub verdicts: Vec<GoalShiftVerdict>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Baseline snapshot for warm restarts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineFile {
    pub baselines: Vec<GoalBaseline>,
}

#[derive(Debug, Clone)]
pub struct DriftMonitor {
    config: DriftConfig,
    agents: BTreeMap<String, AgentState>,
    imported: BTreeMap<String, Vec<GoalBaseline>>,
}

impl DriftMonitor {
    pub fn new(config: DriftConfig) -> Self {
        Self {
            config,
            agents: BTreeMap::new(),
            imported: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &DriftConfig {
        &self.config
    }

    pub fn baseline(&self, agent: &str, goal: &str) -> Option<&GoalBaseline> {
        self.agents.get(agent).and_then(|s| s.baselines.get(goal))
    }

    pub fn threshold(&self, agent: &str, goal: &str, metric: &str) -> Option<&AdaptiveThreshold> {
        self.agents
            .get(agent)
            .and_then(|s| s.thresholds.get(&(goal.to_string(), metric.to_string())))
    }

    fn state(&mut self, agent: &str) -> &mut AgentState {
        if !self.agents.contains_key(agent) {
            let mut baselines = BTreeMap::new();
            for b in self.imported.remove(agent).unwrap_or_default() {
                baselines.insert(b.goal_id.clone(), b);
            }
            self.agents.insert(
                agent.to_string(),
                AgentState {
                    baselines,
                    thresholds: BTreeMap::new(),
                    window: Window::default(),
                    last_ts: None,
                    last_symbol: None,
                    pending: None,
                    rng: ChaCha8Rng::seed_from_u64(self.config.rng_seed ^ fnv1a(agent)),
                    seq: 0,
                },
            );
        }
        self.agents.get_mut(agent).expect("inserted above")
    }

    /// Scores one event. Signals are produced only when a window completes.
    pub fn observe(&mut self, event: &Event) -> DriftOutput {
        let cfg = self.config.clone();
        let mut out = DriftOutput::default();
        let agent = event.agent_id.clone();
        let st = self.state(&agent);

        let symbol = symbol_of(event);
        let obs = Observation {
            event_id: event.event_id.clone(),
            bigram: st.last_symbol.as_ref().map(|p| format!("{p}>{symbol}")),
            gap_ms: st.last_ts.map(|t| (event.timestamp_ms - t).max(0) as f64),
            amount: event.payload.get("amount").and_then(|v| v.as_f64()),
            symbol: symbol.clone(),
        };
        st.last_ts = Some(event.timestamp_ms);
        st.last_symbol = Some(symbol);

        let mut shift_ready = false;
        if let Some(p) = st.pending.as_mut() {
            p.window.obs.push(obs.clone());
            shift_ready = p.window.obs.len() >= cfg.window_size;
        }
        observe_goal(&cfg, &agent, st, obs, event, &mut out);
        if shift_ready {
            let p = st.pending.take().expect("checked above");
            out.verdicts.push(decide_shift(&cfg, &agent, st, p, event.timestamp_ms));
        }
        out
    }

    /// Called after a `goal.set` changed the agent's goal. Opens a verification
    /// window when the old goal has an established baseline.
    pub fn on_goal_change(&mut self, agent: &str, old_goal: &str, new_goal: &str, at_ms: i64) -> DriftOutput {
        let cfg = self.config.clone();
        let mut out = DriftOutput::default();
        let st = self.state(agent);
        if let Some(p) = st.pending.take() {
            if !p.window.obs.is_empty() {
                out.verdicts.push(decide_shift(&cfg, agent, st, p, at_ms));
            }
        }
        st.window = Window {
            goal: new_goal.to_string(),
            obs: Vec::new(),
        };
        if old_goal == new_goal {
            return out;
        }
        let Some(old) = st.baselines.get(old_goal).filter(|b| b.established) else {
            return out;
        };
        let target = st.baselines.get(new_goal);
        st.pending = Some(PendingShift {
            old_goal: old_goal.to_string(),
            new_goal: new_goal.to_string(),
            old_snapshot: old.verb_counts.clone(),
            prior_target: target.filter(|b| b.established).map(|b| b.verb_counts.clone()),
            new_baseline_preexisting: target.is_some(),
            window: Window::default(),
        });
        out
    }

    /// Most similar established baseline of the same agent for a new goal, or
    /// None. Similarity is cosine over symbol counts; ties go to the
    /// lexically smaller goal.
    pub fn seed_from_similar(&self, agent: &str, new_goal: &str, partial: &BTreeMap<String, u64>) -> Option<GoalBaseline> {
        let st = self.agents.get(agent)?;
        best_seed(&self.config, st, new_goal, partial)
    }

    pub fn export_baselines(&self) -> BaselineFile {
        let mut baselines: Vec<GoalBaseline> = self
            .agents
            .values()
            .flat_map(|s| s.baselines.values().filter(|b| b.established).cloned())
            .collect();
        baselines.sort_by(|a, b| (&a.agent_id, &a.goal_id).cmp(&(&b.agent_id, &b.goal_id)));
        BaselineFile { baselines }
    }

    /// Loads baselines for agents not yet seen.
    pub fn import_baselines(&mut self, file: BaselineFile) {
        for b in file.baselines {
            self.imported.entry(b.agent_id.clone()).or_default().push(b);
        }
    }
}

impl BaselineFile {
    pub fn to_toml(&self) -> Result<String, DriftError> {
        toml::to_string(self).map_err(|e| DriftError::BaselineFile(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self, DriftError> {
        toml::from_str(s).map_err(|e| DriftError::BaselineFile(e.to_string()))
    }
}

fn observe_goal(
    cfg: &DriftConfig,
    agent: &str,
    st: &mut AgentState,
    obs: Observation,
    event: &Event,
    out: &mut DriftOutput,
) {
    let goal = event.goal_id.clone();
    if st.window.goal != goal {
        st.window = Window {
            goal: goal.clone(),
            obs: Vec::new(),
        };
    }
    let established = st
        .baselines
        .entry(goal.clone())
        .or_insert_with(|| GoalBaseline::new(agent, &goal))
        .established;

    if established {
        st.window.obs.push(obs);
        if st.window.obs.len() >= cfg.window_size {
            let window = std::mem::replace(
                &mut st.window,
                Window {
                    goal: goal.clone(),
                    obs: Vec::new(),
                },
            );
            let signals = assess_window(cfg, agent, st, &window, 1.0, false, event.timestamp_ms);
            if !signals.iter().any(|s| s.severity == Severity::Alert) {
                let b = st.baselines.get_mut(&goal).expect("exists");
                for o in &window.obs {
                    b.absorb(o, cfg.reservoir_size, &mut st.rng);
                }
            }
            out.signals.extend(signals);
        }
        return;
    }

    // learning
    {
        let b = st.baselines.get_mut(&goal).expect("exists");
        b.absorb(&obs, cfg.reservoir_size, &mut st.rng);
    }
    st.window.obs.push(obs);
    let (own, seeded) = {
        let b = &st.baselines[&goal];
        (b.own_events, b.seeded_from.is_some())
    };
    if !seeded && own == cfg.seed_window {
        if let Some(seed) = seed_candidate(cfg, st, &goal) {
            let b = st.baselines.get_mut(&goal).expect("exists");
            let own_counts = b.clone();
            *b = seed;
            b.goal_id = goal.clone();
            b.own_events = own_counts.own_events;
            b.total_events += own_counts.own_events;
            for (k, v) in own_counts.verb_counts {
                *b.verb_counts.entry(k).or_default() += v;
            }
            for (k, v) in own_counts.bigram_counts {
                *b.bigram_counts.entry(k).or_default() += v;
            }
        }
    }
    let b = st.baselines.get_mut(&goal).expect("exists");
    if b.own_events >= cfg.min_baseline_events {
        b.established = true;
        st.window.obs.clear();
    } else if st.window.obs.len() >= cfg.window_size {
        let window = std::mem::take(&mut st.window.obs);
        let window = Window {
            goal: goal.clone(),
            obs: window,
        };
        let seeded = st.baselines[&goal].seeded_from.is_some();
        out.signals.extend(assess_window(
            cfg,
            agent,
            st,
            &window,
            cfg.cold_start_factor,
            !seeded,
            event.timestamp_ms,
        ));
    }
}

fn best_seed(cfg: &DriftConfig, st: &AgentState, new_goal: &str, partial: &BTreeMap<String, u64>) -> Option<GoalBaseline> {
    let mut best: Option<(f64, &GoalBaseline)> = None;
    for (goal, b) in &st.baselines {
        if goal == new_goal || !b.established {
            continue;
        }
        let sim = cosine_similarity(&b.verb_counts, partial);
        if sim > cfg.seed_similarity && best.map_or(true, |(s, _)| sim > s) {
            best = Some((sim, b));
        }
    }
    best.map(|(_, b)| {
        let mut c = b.clone();
        c.seeded_from = Some(b.goal_id.clone());
        c.established = false;
        c.own_events = 0;
        c.goal_id = new_goal.to_string();
        c
    })
}

fn seed_candidate(cfg: &DriftConfig, st: &AgentState, goal: &str) -> Option<GoalBaseline> {
    let partial = st.baselines.get(goal)?.verb_counts.clone();
    best_seed(cfg, st, goal, &partial)
}

fn decide_shift(cfg: &DriftConfig, agent: &str, st: &mut AgentState, p: PendingShift, at_ms: i64) -> GoalShiftVerdict {
    let counts = p.window.symbol_counts();
    let jsd_old = js_divergence_counts(&counts, &p.old_snapshot).unwrap_or(1.0);
    let jsd_target = p
        .prior_target
        .as_ref()
        .and_then(|t| js_divergence_counts(&counts, t).ok());
    let verdict = if jsd_target.is_some_and(|j| j <= cfg.adoption_margin) || jsd_old > cfg.adoption_margin {
        ShiftVerdict::AdoptNewBaseline
    } else {
        ShiftVerdict::FlagSuspicious
    };
    if verdict == ShiftVerdict::FlagSuspicious && !p.new_baseline_preexisting {
        st.baselines.remove(&p.new_goal);
        st.thresholds.retain(|(g, _), _| *g != p.new_goal);
        if st.window.goal == p.new_goal {
            st.window.obs.clear();
        }
    }
    st.seq += 1;
    GoalShiftVerdict {
        verdict_id: format!("{agent}/shift{}", st.seq),
        agent_id: agent.to_string(),
        old_goal: p.old_goal,
        new_goal: p.new_goal,
        verdict,
        jsd_vs_old: jsd_old,
        jsd_vs_target: jsd_target,
        margin: cfg.adoption_margin,
        window_event_ids: p.window.ids(),
        decided_at_ms: at_ms,
    }
}

/// Scores a completed window against the goal's baseline and updates the
/// adaptive thresholds. `info_only` is the unseeded cold-start path: a single
/// JSD signal whose threshold is the divergence maximum, so it is always Info.
fn assess_window(
    cfg: &DriftConfig,
    agent: &str,
    st: &mut AgentState,
    window: &Window,
    factor: f64,
    info_only: bool,
    at_ms: i64,
) -> Vec<DriftSignal> {
    let Some(b) = st.baselines.get(&window.goal) else {
        return Vec::new();
    };
    let mut scores: Vec<(DriftMethod, &'static str, f64)> = Vec::new();
    if let Ok(s) = js_divergence_counts(&window.symbol_counts(), &b.verb_counts) {
        scores.push((DriftMethod::JsDivergence, METRIC_SYMBOL, s));
    }
    if !info_only {
        if let Ok(s) = js_divergence_counts(&window.bigram_counts(), &b.bigram_counts) {
            scores.push((DriftMethod::JsDivergence, METRIC_BIGRAM, s));
        }
        for metric in [METRIC_GAP, METRIC_AMOUNT] {
            let recent = window.series(metric);
            let base = b
                .continuous_reservoirs
                .get(metric)
                .map(|r| r.samples.as_slice())
                .unwrap_or(&[]);
            if let Ok(r) = mann_whitney_u(&recent, base) {
                scores.push((DriftMethod::MannWhitneyU, metric, r.z.abs()));
            }
        }
    }
    let ids = window.ids();
    let mut out = Vec::new();
    for (method, metric, score) in scores {
        let threshold = if info_only {
            1.0
        } else {
            let floor = match method {
                DriftMethod::JsDivergence if metric == METRIC_BIGRAM => cfg.bigram_jsd_floor,
                DriftMethod::JsDivergence => cfg.jsd_floor,
                DriftMethod::MannWhitneyU => cfg.mwu_floor,
            };
            let th = st
                .thresholds
                .entry((window.goal.clone(), metric.to_string()))
                .or_insert_with(|| AdaptiveThreshold::new(cfg.alpha, floor, cfg.sigma_multiplier));
            let warming = metric == METRIC_BIGRAM && th.observations < cfg.bigram_warmup_windows;
            let t = if warming { 1.0 } else { th.threshold() * factor };
            th.update(score);
            t
        };
        st.seq += 1;
        out.push(DriftSignal {
            signal_id: format!("{agent}/drift{}", st.seq),
            agent_id: agent.to_string(),
            goal_id: window.goal.clone(),
            method,
            metric: metric.to_string(),
            score,
            threshold,
            severity: if score > threshold { Severity::Alert } else { Severity::Info },
            window_first: ids.first().cloned().unwrap_or_default(),
            window_last: ids.last().cloned().unwrap_or_default(),
            window_event_ids: ids.clone(),
            emitted_at_ms: at_ms,
        });
    }
    out
}
