//! Runtime governance for agentic systems.
//!
//! Agent telemetry traces are replayed through a reorder buffer, dispatched to
//! authorization, conformance and drift monitors, and scored by a graduated
//! containment controller. The [`harness`] module generates labeled traces and
//! computes governance metrics from engine reports.

pub mod ari;
pub mod authz;
pub mod cli;
pub mod conformance;
pub mod containment;
pub mod drift;
pub mod engine;
pub mod harness;
pub mod policy;
pub mod predicate;
pub mod telemetry;

pub use ari::{compute_ari, tier_for, AriResult, RiskTier, ScoreSheet};
pub use engine::{replay, Engine, EngineOptions, EnforcementMode, Report};
pub use policy::Policy;
pub use telemetry::{Event, EventCategory, Scalar};
