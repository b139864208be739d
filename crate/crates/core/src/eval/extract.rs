use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prompt::LETTERS;
use crate::data::write_jsonl;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Choice {
    /// Index into the option list as passed in.
    Index(usize),
    Unparsed,
}

fn letter_index(c: char, n: usize) -> Option<usize> {
    let c = c.to_ascii_uppercase();
    LETTERS.iter().take(n).position(|&l| l == c)
}

fn normalize(s: &str) -> String {
    s.trim()
        .trim_end_matches(['.', '!', ';', ','])
        .trim()
        .to_lowercase()
}

/// Maps a free-text response onto one of `options` (given in presented,
/// lettered order).
///
/// Rules, first match wins: a bare letter (`"B"`, `"(B)"`, `"B."`); a
/// letter followed by `.` or `)` and text; a `- text` line equal to one
/// option; the response containing exactly one option string, where an
/// option that is a substring of another contained option does not count.
pub fn extract_choice(response: &str, options: &[&str]) -> Choice {
    let n = options.len();
    if n == 0 {
        return Choice::Unparsed;
    }
    let text = response.trim();

    let bare = text.trim_start_matches('(').trim_end_matches(['.', ')', ':']).trim();
    let mut chars = bare.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if let Some(i) = letter_index(c, n) {
            return Choice::Index(i);
        }
    }

    let mut chars = text.chars();
    if let (Some(c), Some(sep)) = (chars.next(), chars.next()) {
        if (sep == '.' || sep == ')') && chars.next().is_some_and(char::is_whitespace) {
            if let Some(i) = letter_index(c, n) {
                if c.is_ascii_uppercase() {
                    return Choice::Index(i);
                }
            }
        }
    }

    let lowered: Vec<String> = options.iter().map(|o| normalize(o)).collect();
    if let Some(rest) = text.strip_prefix('-') {
        let first_line = normalize(rest.lines().next().unwrap_or(""));
        let hits: Vec<usize> = (0..n).filter(|&i| lowered[i] == first_line).collect();
        if let [i] = hits[..] {
            return Choice::Index(i);
        }
    }

    let hay = text.to_lowercase();
    let contained: Vec<usize> = (0..n)
        .filter(|&i| !lowered[i].is_empty() && hay.contains(&lowered[i]))
        .collect();
    let maximal: Vec<usize> = contained
        .iter()
        .copied()
        .filter(|&i| {
            !contained
                .iter()
                .any(|&j| j != i && lowered[j].len() > lowered[i].len() && lowered[j].contains(&lowered[i]))
        })
        .collect();
    match maximal[..] {
        [i] => Choice::Index(i),
        _ => Choice::Unparsed,
    }
}

/// A response the extractor could not map, queued for a human.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewEntry {
    pub item_id: String,
    pub model_id: String,
    pub response: String,
    pub options: Vec<String>,
    /// Filled in by the reviewer: canonical option index.
    #[serde(default)]
    pub adjudicated: Option<usize>,
}

pub fn write_review_queue(path: &Path, entries: &[ReviewEntry]) -> Result<()> {
    write_jsonl(path, entries)
}
