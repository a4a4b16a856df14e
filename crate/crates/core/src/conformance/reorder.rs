//! Watermark-based reorder buffer.
//!
//! Events are held until the watermark (the maximum timestamp observed so far)
//! is at least `timestamp + window_ms`, then released in `(timestamp, event_id)`
//! order. Any event displaced by less than the window therefore comes out in
//! sorted position.

use std::collections::BTreeMap;

use crate::telemetry::Event;

pub const DEFAULT_REORDER_WINDOW_MS: i64 = 5_000;

#[derive(Debug, Clone)]
pub struct ReorderBuffer {
    window_ms: i64,
    pending: BTreeMap<(i64, String), Event>,
    watermark_ms: Option<i64>,
    last_released: Option<(i64, String)>,
    late: Vec<String>,
}

impl ReorderBuffer {
    pub fn new(window_ms: i64) -> Self {
        assert!(window_ms >= 0, "reorder window must be nonnegative");
        Self {
            window_ms,
            pending: BTreeMap::new(),
            watermark_ms: None,
            last_released: None,
            late: Vec::new(),
        }
    }

    pub fn window_ms(&self) -> i64 {
        self.window_ms
    }

    pub fn watermark_ms(&self) -> Option<i64> {
        self.watermark_ms
    }

    /// Timestamp up to which every non-late event has been released.
    pub fn frontier_ms(&self) -> Option<i64> {
        self.watermark_ms.map(|w| w.saturating_sub(self.window_ms))
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Ids of events that arrived after a later-ordered event was already
    /// released. They are passed through unsorted.
    pub fn late_event_ids(&self) -> &[String] {
        &self.late
    }

    /// Accepts one event and returns whatever became releasable, in order.
    pub fn push(&mut self, event: Event) -> Vec<Event> {
        let key = (event.timestamp_ms, event.event_id.clone());
        if self.last_released.as_ref().is_some_and(|last| key < *last) {
            self.late.push(event.event_id.clone());
            return vec![event];
        }
        self.watermark_ms = Some(match self.watermark_ms {
            Some(w) => w.max(event.timestamp_ms),
            None => event.timestamp_ms,
        });
        self.pending.insert(key, event);
        self.release_ready()
    }

    fn release_ready(&mut self) -> Vec<Event> {
        let Some(wm) = self.watermark_ms else {
            return Vec::new();
        };
        let mut out = Vec::new();
        while let Some(entry) = self.pending.first_entry() {
            if entry.key().0.saturating_add(self.window_ms) > wm {
                break;
            }
            let (key, event) = entry.remove_entry();
            self.last_released = Some(key);
            out.push(event);
        }
        out
    }

    /// Releases everything still pending (end of stream).
    pub fn flush(&mut self) -> Vec<Event> {
        let pending = std::mem::take(&mut self.pending);
        if let Some((key, _)) = pending.last_key_value() {
            self.last_released = Some(key.clone());
        }
        pending.into_values().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ari::RiskTier;
    use crate::telemetry::EventCategory;
    use proptest::prelude::*;

    fn ev(id: &str, ts: i64) -> Event {
        Event {
            event_id: id.into(),
            agent_id: "a".into(),
            session_id: "s".into(),
            timestamp_ms: ts,
            verb: "plan.step".into(),
            category: EventCategory::Cognitive,
            risk_tier: RiskTier::BasicAgency,
            goal_id: String::new(),
            parent_agent_id: None,
            payload: Default::default(),
        }
    }

    #[test]
    fn holds_until_watermark_passes_window() {
        let mut b = ReorderBuffer::new(100);
        assert!(b.push(ev("a", 10)).is_empty());
        assert!(b.push(ev("b", 5)).is_empty());
        assert!(b.push(ev("c", 104)).is_empty());
        let out: Vec<_> = b.push(ev("d", 110)).into_iter().map(|e| e.event_id).collect();
        assert_eq!(out, ["b", "a"]);
        let rest: Vec<_> = b.flush().into_iter().map(|e| e.event_id).collect();
        assert_eq!(rest, ["c", "d"]);
    }

    #[test]
    fn late_event_passes_through() {
        let mut b = ReorderBuffer::new(0);
        assert_eq!(b.push(ev("a", 10)).len(), 1);
        let out = b.push(ev("b", 5));
        assert_eq!(out[0].event_id, "b");
        assert_eq!(b.late_event_ids(), ["b"]);
    }

    proptest! {
        #[test]
        fn bounded_displacement_is_fully_sorted(
            gaps in prop::collection::vec(0i64..400, 1..80),
            jitter in prop::collection::vec(0i64..1000, 80),
        ) {
            let window = 1000;
            let mut ts = 0;
            let mut events: Vec<Event> = gaps.iter().enumerate().map(|(i, g)| {
                ts += g;
                ev(&format!("e{i:03}"), ts)
            }).collect();
            let sorted: Vec<String> = events.iter().map(|e| e.event_id.clone()).collect();
            // arrival time = ts + jitter, jitter < window
            let mut arrival: Vec<(i64, usize)> = events.iter().enumerate()
                .map(|(i, e)| (e.timestamp_ms + jitter[i], i)).collect();
            arrival.sort();
            let order: Vec<usize> = arrival.into_iter().map(|(_, i)| i).collect();
            let mut slots: Vec<Option<Event>> = events.drain(..).map(Some).collect();
            let mut b = ReorderBuffer::new(window);
            let mut out = Vec::new();
            for i in order {
                out.extend(b.push(slots[i].take().unwrap()));
            }
            out.extend(b.flush());
            prop_assert!(b.late_event_ids().is_empty());
            let ids: Vec<String> = out.into_iter().map(|e| e.event_id).collect();
            prop_assert_eq!(ids, sorted);
        }
    }
}
