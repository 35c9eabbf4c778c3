//! Maintenance actions derived from the damage class.

use crate::taxonomy::{DamageLabel, DamageType, Severity};
use serde::Serialize;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum MaintenanceAction {
    ImmediateReplace,
    ScheduleRepair,
    ContinueMonitoring,
    NoAction,
}

impl MaintenanceAction {
    pub const ALL: [MaintenanceAction; 4] = [
        MaintenanceAction::ImmediateReplace,
        MaintenanceAction::ScheduleRepair,
        MaintenanceAction::ContinueMonitoring,
        MaintenanceAction::NoAction,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn urgency(self) -> f64 {
        match self {
            MaintenanceAction::ImmediateReplace => 1.0,
            MaintenanceAction::ScheduleRepair => 0.66,
            MaintenanceAction::ContinueMonitoring => 0.33,
            MaintenanceAction::NoAction => 0.0,
        }
    }

    pub fn colour(self) -> &'static str {
        match self {
            MaintenanceAction::ImmediateReplace => "red",
            MaintenanceAction::ScheduleRepair => "orange",
            MaintenanceAction::ContinueMonitoring => "yellow",
            MaintenanceAction::NoAction => "green",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaintenanceAction::ImmediateReplace => "Immediate Replace",
            MaintenanceAction::ScheduleRepair => "Schedule Repair",
            MaintenanceAction::ContinueMonitoring => "Continue Monitoring",
            MaintenanceAction::NoAction => "No Action",
        }
    }
}

impl fmt::Display for MaintenanceAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rule mapping from class to action. Strand Coreout, which the rule set
/// leaves open, is scheduled for repair.
pub fn action_for(label: &DamageLabel) -> MaintenanceAction {
    use MaintenanceAction::*;
    match (label.damage_type, label.severity, label.compound_partner()) {
        (_, Severity::High, _) => ImmediateReplace,
        (DamageType::CoreOut, _, Some(DamageType::CutStrands)) => ImmediateReplace,
        (_, Severity::Medium, _) => ScheduleRepair,
        (_, _, Some(_)) => ScheduleRepair,
        (_, Severity::Low, _) => ContinueMonitoring,
        (DamageType::Compression, Severity::None, None) => NoAction,
        // Strand Coreout.
        _ => ScheduleRepair,
    }
}

pub fn action_for_class(class_index: usize) -> MaintenanceAction {
    action_for(&DamageLabel::from_class(class_index).expect("valid class"))
}

/// Mean absolute urgency difference.
pub fn urgency_mae(pred: &[MaintenanceAction], truth: &[MaintenanceAction]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(truth).map(|(a, b)| (a.urgency() - b.urgency()).abs()).sum::<f64>() / n
}
