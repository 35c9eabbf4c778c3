//! Template descriptions paired with every rendered sample.

use crate::taxonomy::{DamageLabel, DamageType, Severity};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const HIGH_WORDS: [&str; 4] = ["severe", "extensive", "heavy", "pronounced"];
pub const MEDIUM_WORDS: [&str; 4] = ["moderate", "noticeable", "partial", "intermediate"];
pub const LOW_WORDS: [&str; 4] = ["slight", "minor", "faint", "superficial"];

pub fn severity_words(sev: Severity) -> &'static [&'static str] {
    match sev {
        Severity::High => &HIGH_WORDS,
        Severity::Medium => &MEDIUM_WORDS,
        Severity::Low => &LOW_WORDS,
        Severity::None => &[],
    }
}

fn nouns(t: DamageType) -> &'static [&'static str] {
    match t {
        DamageType::Chafing => &["surface abrasion", "fibre wear", "fuzzing of the outer yarns"],
        DamageType::CutStrands => &["cut strands", "severed yarns", "broken strand ends"],
        DamageType::Placking => &["strand displacement", "lifted strands", "loosened lay geometry"],
        DamageType::Compression => &["compression flattening", "compression of the strand profile", "compression set"],
        DamageType::CoreOut => &["core protrusion", "exposed core fibres", "core material pushed out"],
    }
}

fn consequences(sev: Severity) -> &'static [&'static str] {
    match sev {
        Severity::High => &[
            "with fibre bundle exposure and likely strength loss",
            "and load capacity is compromised",
            "reaching deep into the rope body",
        ],
        Severity::Medium => &[
            "affecting several yarns but not the core",
            "with some reduction in cross section",
            "spreading beyond the outer layer",
        ],
        Severity::Low => &[
            "limited to the outer layer",
            "with the rope body intact",
            "confined to a few surface yarns",
        ],
        Severity::None => &[],
    }
}

fn graded(noun: &str, adverb: &str, tail: &str, template: usize) -> String {
    match template {
        0 => format!("{adverb} {noun} on the rope surface {tail}"),
        1 => format!("inspection shows {adverb} {noun} across the strands {tail}"),
        _ => format!("{adverb} {noun} visible along the lay {tail}"),
    }
}

fn plain(label: &DamageLabel, template: usize, rng: &mut ChaCha8Rng) -> String {
    let main = *nouns(label.damage_type).choose(rng).expect("nouns");
    match label.compound_partner() {
        Some(p) => {
            let second = *nouns(p).choose(rng).expect("nouns");
            match template {
                0 => format!("{main} combined with {second} in one section"),
                1 => format!("inspection shows {main} together with {second}"),
                _ => format!("a section with {main} and {second} along the lay"),
            }
        }
        None => match template {
            0 => format!("{main} across the rope section"),
            1 => format!("inspection shows {main} along the lay"),
            _ => format!("the strands show {main} in one section"),
        },
    }
}

/// One of three templates per class, chosen and filled from `seed`. Graded
/// classes carry an intensity word from their severity lexicon; other
/// classes carry none.
pub fn describe(label: &DamageLabel, _severity_scalar: f64, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = *[0usize, 1, 2].choose(&mut rng).expect("templates");
    if label.severity == Severity::None {
        return plain(label, template, &mut rng);
    }
    let noun = *nouns(label.damage_type).choose(&mut rng).expect("nouns");
    let adverb = *severity_words(label.severity).choose(&mut rng).expect("lexicon");
    let tail = *consequences(label.severity).choose(&mut rng).expect("tails");
    graded(noun, adverb, tail, template)
}

/// Every description the templates can produce, for vocabulary building.
pub fn template_corpus() -> Vec<String> {
    let mut out = Vec::new();
    for sev in [Severity::High, Severity::Medium, Severity::Low] {
        for t in DamageType::ALL {
            for n in nouns(t) {
                for a in severity_words(sev) {
                    for c in consequences(sev) {
                        for k in 0..3 {
                            out.push(graded(n, a, c, k));
                        }
                    }
                }
            }
        }
    }
    for a in DamageType::ALL {
        for b in DamageType::ALL {
            for na in nouns(a) {
                for nb in nouns(b) {
                    out.push(format!("{na} combined with {nb} in one section"));
                    out.push(format!("inspection shows {na} together with {nb}"));
                    out.push(format!("a section with {na} and {nb} along the lay"));
                }
            }
        }
        for na in nouns(a) {
            out.push(format!("{na} across the rope section"));
            out.push(format!("inspection shows {na} along the lay"));
            out.push(format!("the strands show {na} in one section"));
        }
    }
    out
}
