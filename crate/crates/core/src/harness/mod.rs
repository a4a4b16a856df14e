//! Labeled scenario generation and governance metrics.

pub mod generate;
pub mod import;
pub mod metrics;
pub mod suite;

pub use generate::{generate, AttackType, GenerateError, GroundTruth, GroundTruthEntry, Profile, ScenarioSpec};
pub use metrics::{evaluate, MetricsError, MetricsReport, Ratio};
pub use suite::{default_suite, run_suite, SuiteResult};
