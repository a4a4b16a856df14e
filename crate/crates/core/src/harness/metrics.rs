//! Governance metrics from a report and its ground truth.
//!
//! A ground-truth entry is detected when some detection shares an event id
//! with its span; detections sharing no id with any span are false alarms.
//! Ratios with a zero denominator are reported as null.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authz::Verdict;
use crate::engine::Report;

use super::generate::{AttackType, GroundTruth};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("ground truth is for trace {expected}, report is for trace {found}")]
    TraceMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: u64,
    pub denominator: u64,
    pub value: Option<f64>,
}

impl Ratio {
    pub fn new(numerator: u64, denominator: u64) -> Self {
        Self {
            numerator,
            denominator,
            value: (denominator > 0).then(|| numerator as f64 / denominator as f64),
        }
    }

    fn add(self, o: Ratio) -> Ratio {
        Ratio::new(self.numerator + o.numerator, self.denominator + o.denominator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryOutcome {
    pub violation_id: String,
    pub attack_type: AttackType,
    pub detection_ids: Vec<String>,
    pub detected: bool,
    pub chain_complete: bool,
    pub predicted: bool,
    pub proactive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub trace_digests: Vec<String>,
    pub ground_truth_entries: u64,
    pub detections: u64,
    pub detection_rate: Ratio,
    pub false_positive_rate: Ratio,
    pub risk_coverage_rate: Ratio,
    pub causal_chain_clarity: Ratio,
    pub predictive_alerting: Ratio,
    pub proactive_intervention: Ratio,
    pub attack_types_present: Vec<AttackType>,
    pub attack_types_detected: Vec<AttackType>,
    pub false_alarm_ids: Vec<String>,
    pub entries: Vec<EntryOutcome>,
}

pub fn evaluate(gt: &GroundTruth, report: &Report) -> Result<MetricsReport, MetricsError> {
    if gt.trace_digest != report.trace_digest {
        return Err(MetricsError::TraceMismatch {
            expected: gt.trace_digest.clone(),
            found: report.trace_digest.clone(),
        });
    }
    let span_ids: BTreeSet<&str> = gt
        .entries
        .iter()
        .flat_map(|e| e.event_ids.iter().map(String::as_str))
        .collect();
    let false_alarm_ids: Vec<String> = report
        .detections
        .iter()
        .filter(|d| !d.event_ids.iter().any(|id| span_ids.contains(id.as_str())))
        .map(|d| d.detection_id.clone())
        .collect();

    // warnings: FSM progress warnings and drift alerts, keyed by event id
    let mut warnings: Vec<(i64, BTreeSet<&str>)> = report
        .warnings
        .iter()
        .map(|w| (w.timestamp_ms, [w.event_id.as_str()].into()))
        .collect();
    warnings.extend(
        report
            .drift_signals
            .iter()
            .filter(|s| s.severity == crate::drift::Severity::Alert)
            .map(|s| (s.emitted_at_ms, s.window_event_ids.iter().map(String::as_str).collect())),
    );
    let denied: BTreeMap<&str, i64> = report
        .decisions
        .iter()
        .filter(|d| d.verdict == Verdict::Deny)
        .map(|d| (d.event_id.as_str(), d.evaluated_at_ms))
        .collect();

    let mut entries = Vec::new();
    for e in &gt.entries {
        let span: BTreeSet<&str> = e.event_ids.iter().map(String::as_str).collect();
        let hits: Vec<_> = report
            .detections
            .iter()
            .filter(|d| d.event_ids.iter().any(|id| span.contains(id.as_str())))
            .collect();
        let predicted = warnings
            .iter()
            .any(|(ts, ids)| *ts < e.committed_at_ms && ids.iter().any(|id| span.contains(id)));
        let deny_first = e
            .event_ids
            .iter()
            .filter_map(|id| denied.get(id.as_str()))
            .any(|&ts| ts < e.committed_at_ms);
        let delegation_denied_first = report.delegations.iter().any(|a| {
            a.outcome != "granted" && a.at_ms < e.committed_at_ms && e.agent_ids.contains(&a.parent) && e.agent_ids.contains(&a.child)
        });
        let contained_first = report.escalations.iter().any(|x| {
            x.event.to_level > x.event.from_level
                && e.agent_ids.contains(&x.event.agent_id)
                && x.event.at_ms < e.committed_at_ms
                && x.event.at_ms >= e.started_at_ms
        });
        entries.push(EntryOutcome {
            violation_id: e.violation_id.clone(),
            attack_type: e.attack_type,
            detection_ids: hits.iter().map(|d| d.detection_id.clone()).collect(),
            detected: !hits.is_empty(),
            chain_complete: hits.iter().any(|d| d.causal_chain.complete),
            predicted,
            proactive: deny_first || delegation_denied_first || contained_first,
        });
    }

    let count = |f: &dyn Fn(&EntryOutcome) -> bool| entries.iter().filter(|o| f(o)).count() as u64;
    let total = entries.len() as u64;
    let detected = count(&|o| o.detected);
    let present: BTreeSet<AttackType> = entries.iter().map(|o| o.attack_type).collect();
    let covered: BTreeSet<AttackType> = entries.iter().filter(|o| o.detected).map(|o| o.attack_type).collect();
    Ok(MetricsReport {
        trace_digests: vec![gt.trace_digest.clone()],
        ground_truth_entries: total,
        detections: report.detections.len() as u64,
        detection_rate: Ratio::new(detected, total),
        false_positive_rate: Ratio::new(false_alarm_ids.len() as u64, report.detections.len() as u64),
        risk_coverage_rate: Ratio::new(covered.len() as u64, present.len() as u64),
        causal_chain_clarity: Ratio::new(count(&|o| o.detected && o.chain_complete), detected),
        predictive_alerting: Ratio::new(count(&|o| o.predicted), total),
        proactive_intervention: Ratio::new(count(&|o| o.proactive), total),
        attack_types_present: present.into_iter().collect(),
        attack_types_detected: covered.into_iter().collect(),
        false_alarm_ids,
        entries,
    })
}

impl MetricsReport {
    /// Pools counts across runs; coverage uses the union of attack types.
    pub fn combine(reports: &[MetricsReport]) -> MetricsReport {
        let zero = Ratio::new(0, 0);
        let mut present = BTreeSet::new();
        let mut covered = BTreeSet::new();
        let mut out = MetricsReport {
            trace_digests: Vec::new(),
            ground_truth_entries: 0,
            detections: 0,
            detection_rate: zero,
            false_positive_rate: zero,
            risk_coverage_rate: zero,
            causal_chain_clarity: zero,
            predictive_alerting: zero,
            proactive_intervention: zero,
            attack_types_present: Vec::new(),
            attack_types_detected: Vec::new(),
            false_alarm_ids: Vec::new(),
            entries: Vec::new(),
        };
        for r in reports {
            out.trace_digests.extend(r.trace_digests.iter().cloned());
            out.ground_truth_entries += r.ground_truth_entries;
            out.detections += r.detections;
            out.detection_rate = out.detection_rate.add(r.detection_rate);
            out.false_positive_rate = out.false_positive_rate.add(r.false_positive_rate);
            out.causal_chain_clarity = out.causal_chain_clarity.add(r.causal_chain_clarity);
            out.predictive_alerting = out.predictive_alerting.add(r.predictive_alerting);
            out.proactive_intervention = out.proactive_intervention.add(r.proactive_intervention);
            present.extend(r.attack_types_present.iter().copied());
            covered.extend(r.attack_types_detected.iter().copied());
            out.false_alarm_ids.extend(r.false_alarm_ids.iter().cloned());
            out.entries.extend(r.entries.iter().cloned());
        }
        out.risk_coverage_rate = Ratio::new(covered.len() as u64, present.len() as u64);
        out.attack_types_present = present.into_iter().collect();
        out.attack_types_detected = covered.into_iter().collect();
        out
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>10} {:>12}", "metric", "value", "count");
        for (name, r) in [
            ("detection_rate", self.detection_rate),
            ("false_positive_rate", self.false_positive_rate),
            ("risk_coverage_rate", self.risk_coverage_rate),
            ("causal_chain_clarity", self.causal_chain_clarity),
            ("predictive_alerting", self.predictive_alerting),
            ("proactive_intervention", self.proactive_intervention),
        ] {
            let v = r.value.map_or("null".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{:<24} {:>10} {:>12}", name, v, format!("{}/{}", r.numerator, r.denominator));
        }
        s
    }
}
