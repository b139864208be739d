use std::collections::BTreeMap;

use super::item::{BenchmarkItem, BroadCategory, ItemKind};
use crate::error::{Error, Result};

/// Open-ended question count of the reference benchmark.
pub const OPEN_QUESTION_TOTAL: usize = 115;

/// Broad category, its question count, and its sub-categories with counts.
/// Questions may carry several labels, so counts overlap.
pub const TAXONOMY: [(BroadCategory, usize, &[(&str, usize)]); 4] = [
    (
        BroadCategory::Microscopy,
        47,
        &[("Microscopic Description", 27), ("Differentiation", 20), ("Grading", 20)],
    ),
    (BroadCategory::Diagnosis, 23, &[("Diagnosis", 23)]),
    (
        BroadCategory::Clinical,
        26,
        &[("Risk Factors", 4), ("Prognosis", 20), ("Treatment", 22)],
    ),
    (
        BroadCategory::AncillaryTesting,
        40,
        &[("IHC", 17), ("Molecular", 21), ("Other Testing", 4)],
    ),
];

pub fn broad_of(sub: &str) -> Option<BroadCategory> {
    TAXONOMY
        .iter()
        .find(|(_, _, subs)| subs.iter().any(|(s, _)| *s == sub))
        .map(|(b, _, _)| *b)
}

/// Checks the preset is coherent: every sub-category fits inside its broad
/// category and every broad category fits inside the question total.
pub fn check_taxonomy_preset() -> Result<()> {
    for (broad, count, subs) in TAXONOMY {
        if count > OPEN_QUESTION_TOTAL {
            return Err(Error::Config(format!("{} exceeds the question total", broad.name())));
        }
        if let Some((s, c)) = subs.iter().find(|(_, c)| *c > count) {
            return Err(Error::Config(format!("{s} ({c}) exceeds {} ({count})", broad.name())));
        }
        // every question of a broad category has at least one sub-category
        if subs.iter().map(|(_, c)| c).sum::<usize>() < count {
            return Err(Error::Config(format!("{} sub-categories do not cover it", broad.name())));
        }
    }
    let covered: usize = TAXONOMY.iter().map(|(_, c, _)| c).sum();
    if covered < OPEN_QUESTION_TOTAL {
        return Err(Error::Config("some questions would carry no category".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaxonomyCounts {
    pub questions: usize,
    pub broad: BTreeMap<BroadCategory, usize>,
    pub sub: BTreeMap<String, usize>,
}

pub fn taxonomy_counts(items: &[BenchmarkItem]) -> TaxonomyCounts {
    let mut out = TaxonomyCounts::default();
    for item in items.iter().filter(|i| i.kind == ItemKind::Open) {
        out.questions += 1;
        for b in &item.categories {
            *out.broad.entry(*b).or_default() += 1;
        }
        for s in &item.sub_categories {
            *out.sub.entry(s.clone()).or_default() += 1;
        }
    }
    out
}

/// Compares the open items' labels against the preset counts and checks
/// each sub-category label sits under one of the item's broad categories.
pub fn validate_taxonomy(items: &[BenchmarkItem]) -> Result<()> {
    for item in items.iter().filter(|i| i.kind == ItemKind::Open) {
        for s in &item.sub_categories {
            match broad_of(s) {
                Some(b) if item.categories.contains(&b) => {}
                Some(b) => {
                    return Err(Error::Dataset(format!(
                        "item {}: sub-category {s} requires broad category {}",
                        item.id,
                        b.name()
                    )))
                }
                None => return Err(Error::Dataset(format!("item {}: unknown sub-category {s}", item.id))),
            }
        }
    }
    let counts = taxonomy_counts(items);
    let mut problems = Vec::new();
    if counts.questions != OPEN_QUESTION_TOTAL {
        problems.push(format!("{} questions, expected {OPEN_QUESTION_TOTAL}", counts.questions));
    }
    for (broad, count, subs) in TAXONOMY {
        let got = counts.broad.get(&broad).copied().unwrap_or(0);
        if got != count {
            problems.push(format!("{}: {got}, expected {count}", broad.name()));
        }
        for (s, c) in subs {
            let got = counts.sub.get(*s).copied().unwrap_or(0);
            if got != *c {
                problems.push(format!("{s}: {got}, expected {c}"));
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Dataset(format!("taxonomy mismatch: {}", problems.join("; "))))
    }
}
