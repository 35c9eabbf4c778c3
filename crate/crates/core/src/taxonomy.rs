//! The 14-class rope damage taxonomy.

use std::fmt;

pub const NUM_CLASSES: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DamageType {
    Chafing,
    CutStrands,
    Placking,
    Compression,
    CoreOut,
}

impl DamageType {
    pub const ALL: [DamageType; 5] = [
        DamageType::Chafing,
        DamageType::CutStrands,
        DamageType::Placking,
        DamageType::Compression,
        DamageType::CoreOut,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Types graded High/Medium/Low.
    pub fn has_severity(self) -> bool {
        matches!(self, DamageType::Chafing | DamageType::CutStrands | DamageType::Placking)
    }

    pub fn name(self) -> &'static str {
        match self {
            DamageType::Chafing => "Chafing",
            DamageType::CutStrands => "CutStrands",
            DamageType::Placking => "Placking",
            DamageType::Compression => "Compression",
            DamageType::CoreOut => "CoreOut",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Severity {
    High,
    Medium,
    Low,
    None,
}

impl Severity {
    /// Ordinal target: Low = 0, Medium = 1, High = 2.
    pub fn ordinal(self) -> Option<usize> {
        match self {
            Severity::Low => Some(0),
            Severity::Medium => Some(1),
            Severity::High => Some(2),
            Severity::None => None,
        }
    }

    /// Bin of a continuous severity scalar in `[0, 1]`.
    pub fn from_scalar(s: f64) -> Self {
        if s < 1.0 / 3.0 {
            Severity::Low
        } else if s < 2.0 / 3.0 {
            Severity::Medium
        } else {
            Severity::High
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Severity::High => "High",
            Severity::Medium => "Medium",
            Severity::Low => "Low",
            Severity::None => "None",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Severity::High, Severity::Medium, Severity::Low, Severity::None]
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DamageLabel {
    pub class_index: usize,
    pub damage_type: DamageType,
    pub severity: Severity,
}

struct ClassRow {
    name: &'static str,
    damage_type: DamageType,
    severity: Severity,
    partner: Option<DamageType>,
}

const CLASSES: [ClassRow; NUM_CLASSES] = [
    ClassRow { name: "Chafing/High", damage_type: DamageType::Chafing, severity: Severity::High, partner: None },
    ClassRow { name: "Chafing/Medium", damage_type: DamageType::Chafing, severity: Severity::Medium, partner: None },
    ClassRow { name: "Chafing/Low", damage_type: DamageType::Chafing, severity: Severity::Low, partner: None },
    ClassRow { name: "CutStrands/High", damage_type: DamageType::CutStrands, severity: Severity::High, partner: None },
    ClassRow { name: "CutStrands/Medium", damage_type: DamageType::CutStrands, severity: Severity::Medium, partner: None },
    ClassRow { name: "CutStrands/Low", damage_type: DamageType::CutStrands, severity: Severity::Low, partner: None },
    ClassRow { name: "Placking/High", damage_type: DamageType::Placking, severity: Severity::High, partner: None },
    ClassRow { name: "Placking/Medium", damage_type: DamageType::Placking, severity: Severity::Medium, partner: None },
    ClassRow { name: "Placking/Low", damage_type: DamageType::Placking, severity: Severity::Low, partner: None },
    ClassRow { name: "Compression", damage_type: DamageType::Compression, severity: Severity::None, partner: None },
    ClassRow { name: "Compression+Chafing", damage_type: DamageType::Compression, severity: Severity::None, partner: Some(DamageType::Chafing) },
    ClassRow { name: "Compression+CutStrands", damage_type: DamageType::Compression, severity: Severity::None, partner: Some(DamageType::CutStrands) },
    ClassRow { name: "CoreOut+CutStrands", damage_type: DamageType::CoreOut, severity: Severity::None, partner: Some(DamageType::CutStrands) },
    ClassRow { name: "Strand Coreout", damage_type: DamageType::CoreOut, severity: Severity::None, partner: None },
];

impl DamageLabel {
    pub fn from_class(class_index: usize) -> Option<Self> {
        CLASSES.get(class_index).map(|r| DamageLabel {
            class_index,
            damage_type: r.damage_type,
            severity: r.severity,
        })
    }

    pub fn name(&self) -> &'static str {
        CLASSES[self.class_index].name
    }

    /// Second damage mode of a compound class.
    pub fn compound_partner(&self) -> Option<DamageType> {
        CLASSES[self.class_index].partner
    }

    pub fn is_compound(&self) -> bool {
        self.compound_partner().is_some()
    }
}

impl fmt::Display for DamageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn class_name(class_index: usize) -> &'static str {
    CLASSES[class_index].name
}

pub fn class_of(damage_type: DamageType, severity: Severity) -> Option<usize> {
    CLASSES
        .iter()
        .position(|r| r.damage_type == damage_type && r.severity == severity && r.partner.is_none())
}

pub fn all_labels() -> Vec<DamageLabel> {
    (0..NUM_CLASSES).map(|c| DamageLabel::from_class(c).unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout() {
        let l = all_labels();
        assert_eq!(l.len(), 14);
        assert_eq!(l.iter().filter(|l| l.severity != Severity::None).count(), 9);
        for lab in &l {
            assert_eq!(lab.severity != Severity::None, lab.damage_type.has_severity());
        }
        assert_eq!(class_of(DamageType::Chafing, Severity::High), Some(0));
        assert_eq!(class_of(DamageType::Placking, Severity::Low), Some(8));
        assert_eq!(class_of(DamageType::CoreOut, Severity::None), Some(13));
        assert_eq!(l[12].compound_partner(), Some(DamageType::CutStrands));
    }

    #[test]
    fn severity_bins() {
        assert_eq!(Severity::from_scalar(0.0), Severity::Low);
        assert_eq!(Severity::from_scalar(0.34), Severity::Medium);
        assert_eq!(Severity::from_scalar(2.0 / 3.0), Severity::High);
        assert_eq!(Severity::High.ordinal(), Some(2));
    }
}
