//! Frozen-backbone task heads and analyses.

pub mod anomaly;
pub mod embed;
pub mod fewshot;
pub mod geometry;
pub mod heads;
pub mod metrics;
pub mod recommend;
pub mod report;
pub mod tasks;
