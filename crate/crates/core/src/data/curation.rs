//! Caption and instruction filters.
//!
//! Rules are read from a plain text file, one section per rule:
//!
//! ```text
//! [min_words]
//! 12
//! [generic_caption]
//! ^an? h&e image of \w+\.?$
//! [keyword_block]
//! rat
//! positive control
//! ```
//!
//! Keyword entries are literal words or phrases matched on word boundaries;
//! the other pattern sections hold regular expressions. All matching is
//! case-insensitive.

use std::fmt;

use regex::{Regex, RegexBuilder};

use super::record::InstructionRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RuleKind {
    MinWords,
    GenericCaption,
    KeywordBlock,
    TrivialQuestion,
    FailedResponse,
}

impl RuleKind {
    pub const ALL: [RuleKind; 5] = [
        RuleKind::MinWords,
        RuleKind::GenericCaption,
        RuleKind::KeywordBlock,
        RuleKind::TrivialQuestion,
        RuleKind::FailedResponse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RuleKind::MinWords => "min_words",
            RuleKind::GenericCaption => "generic_caption",
            RuleKind::KeywordBlock => "keyword_block",
            RuleKind::TrivialQuestion => "trivial_question",
            RuleKind::FailedResponse => "failed_response",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug)]
pub struct CurationRule {
    pub kind: RuleKind,
    /// Word threshold for `MinWords`; unused otherwise.
    pub threshold: usize,
    pub patterns: Vec<String>,
    compiled: Vec<Regex>,
}

impl CurationRule {
    pub fn min_words(threshold: usize) -> Self {
        Self {
            kind: RuleKind::MinWords,
            threshold,
            patterns: Vec::new(),
            compiled: Vec::new(),
        }
    }

    pub fn with_patterns(kind: RuleKind, patterns: Vec<String>) -> Result<Self> {
        if kind == RuleKind::MinWords {
            return Err(Error::Config("min_words takes a threshold, not patterns".into()));
        }
        if patterns.is_empty() {
            return Err(Error::Config(format!("rule {} has an empty pattern list", kind.name())));
        }
        let compiled = patterns
            .iter()
            .map(|p| {
                let src = if kind == RuleKind::KeywordBlock {
                    format!(r"\b{}\b", regex::escape(p))
                } else {
                    p.clone()
                };
                RegexBuilder::new(&src)
                    .case_insensitive(true)
                    .build()
                    .map_err(|e| Error::Config(format!("bad pattern {p:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            kind,
            threshold: 0,
            patterns,
            compiled,
        })
    }

    /// The first pattern (or the word count) that trips this rule on `text`.
    pub fn hit(&self, text: &str) -> Option<String> {
        match self.kind {
            RuleKind::MinWords => {
                let n = text.split_whitespace().count();
                (n < self.threshold).then(|| format!("{n} words"))
            }
            _ => self
                .compiled
                .iter()
                .zip(&self.patterns)
                .find(|(re, _)| re.is_match(text))
                .map(|(_, p)| p.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub rule: RuleKind,
    pub detail: String,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.rule.name(), self.detail)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Reject(Rejection),
}

impl Verdict {
    pub fn is_keep(&self) -> bool {
        matches!(self, Verdict::Keep)
    }
}

#[derive(Clone, Debug)]
pub struct CurationRules {
    pub rules: Vec<CurationRule>,
}

pub const FAILED_RESPONSE_EXAMPLE: &str =
    "Sorry, I cannot answer your request based on the information provided";

impl Default for CurationRules {
    fn default() -> Self {
        let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let rule = |k, v: &[&str]| CurationRule::with_patterns(k, owned(v)).expect("default rules compile");
        Self {
            rules: vec![
                rule(
                    RuleKind::KeywordBlock,
                    &[
                        "rat", "rats", "pig", "pigs", "mouse", "mice", "murine", "porcine", "canine",
                        "rabbit", "experimental", "positive control", "negative control",
                    ],
                ),
                rule(
                    RuleKind::GenericCaption,
                    &[r"^\s*(an?\s+)?(h&e|he|ihc)(\s+stained)?\s+(image|slide|section)\s+of\s+(a\s+)?\w+\s*\.?\s*$"],
                ),
                CurationRule::min_words(12),
                rule(
                    RuleKind::TrivialQuestion,
                    &[r"\bat what magnification\b", r"\bwhat (is the )?magnification\b"],
                ),
                rule(
                    RuleKind::FailedResponse,
                    &[r"^\s*sorry,? i cannot answer your request"],
                ),
            ],
        }
    }
}

impl CurationRules {
    pub fn get(&self, kind: RuleKind) -> impl Iterator<Item = &CurationRule> {
        self.rules.iter().filter(move |r| r.kind == kind)
    }

    fn first_hit(&self, kinds: &[RuleKind], text: &str) -> Option<Rejection> {
        self.rules
            .iter()
            .filter(|r| kinds.contains(&r.kind))
            .find_map(|r| r.hit(text).map(|detail| Rejection { rule: r.kind, detail }))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut sections: Vec<(RuleKind, Vec<String>)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let kind = RuleKind::parse(name)
                    .ok_or_else(|| Error::Config(format!("line {}: unknown rule [{name}]", n + 1)))?;
                sections.push((kind, Vec::new()));
            } else {
                let (_, entries) = sections
                    .last_mut()
                    .ok_or_else(|| Error::Config(format!("line {}: entry before any section", n + 1)))?;
                entries.push(line.to_string());
            }
        }
        let rules = sections
            .into_iter()
            .map(|(kind, entries)| match kind {
                RuleKind::MinWords => match entries.as_slice() {
                    [v] => v
                        .parse()
                        .map(CurationRule::min_words)
                        .map_err(|_| Error::Config(format!("min_words threshold {v:?} is not a number"))),
                    _ => Err(Error::Config("min_words takes exactly one threshold".into())),
                },
                _ => CurationRule::with_patterns(kind, entries),
            })
            .collect::<Result<_>>()?;
        Ok(Self { rules })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rules {
            out.push_str(&format!("[{}]\n", r.kind.name()));
            if r.kind == RuleKind::MinWords {
                out.push_str(&format!("{}\n", r.threshold));
            }
            for p in &r.patterns {
                out.push_str(p);
                out.push('\n');
            }
        }
        out
    }
}

/// Caption screening: too short, generic, or off-topic by keyword.
pub fn filter_caption(caption: &str, rules: &CurationRules) -> Verdict {
    const KINDS: [RuleKind; 3] = [RuleKind::KeywordBlock, RuleKind::GenericCaption, RuleKind::MinWords];
    match rules.first_hit(&KINDS, caption) {
        Some(r) => Verdict::Reject(r),
        None => Verdict::Keep,
    }
}

/// Instruction screening: trivial questions and failed answers anywhere in
/// the record.
pub fn filter_instruction(record: &InstructionRecord, rules: &CurationRules) -> Verdict {
    for t in &record.turns {
        if let Some(r) = rules.first_hit(&[RuleKind::TrivialQuestion], &t.instruction) {
            return Verdict::Reject(r);
        }
        if let Some(r) = rules.first_hit(&[RuleKind::FailedResponse], &t.answer) {
            return Verdict::Reject(r);
        }
    }
    Verdict::Keep
}
