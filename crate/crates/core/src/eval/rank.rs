//! Blinded ranking of open-ended responses.
//!
//! Export writes one plain-text sheet per item with responses in a seeded
//! shuffled order under anonymous slot names, and a separate key file that
//! maps slots back to models. A rater fills in `rank:` (1 = best, ties
//! allowed) and `label:` (`correct` or `incorrect`) for every slot; ingest
//! validates the sheets and rejoins provenance through the key.
//!
//! Sheet layout:
//!
//! ```text
//! # rank sheet v1
//! # <rubric lines>
//! item: q-017
//! question: What stains would help confirm the diagnosis?
//! slot: R1
//! rank: 2
//! label: correct
//! | response text, one line per response line
//! slot: R2
//! ...
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::item::BenchmarkItem;
use super::stats::{bootstrap_mean, BOOTSTRAP_RESAMPLES};
use crate::data::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};

const SHEET_MAGIC: &str = "# rank sheet v1";
pub const KEY_FILE: &str = "key.jsonl";

pub const RUBRIC: &str = "\
# Rank every response for this question: 1 is best, equal numbers mean a tie.
# Criteria in order of importance: 1. prompt following, 2. completeness,
# 3. succinctness, 4. use of correct terminology.
# Label each response `correct` or `incorrect`.";

/// A model's answer to one item, before blinding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub model: String,
    pub text: String,
    #[serde(default)]
    pub unsuccessful: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SheetSlot {
    pub slot: String,
    pub rank: Option<u32>,
    pub label: Option<bool>,
    pub text: String,
}

/// A sheet as a rater sees it: no provenance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawSheet {
    pub item: String,
    pub question: String,
    pub slots: Vec<SheetSlot>,
}

impl RawSheet {
    pub fn render(&self) -> String {
        let mut out = format!("{SHEET_MAGIC}\n{RUBRIC}\nitem: {}\nquestion: {}\n", self.item, one_line(&self.question));
        for s in &self.slots {
            out.push_str(&format!("slot: {}\n", s.slot));
            out.push_str(&format!("rank: {}\n", s.rank.map(|r| r.to_string()).unwrap_or_default()));
            let label = match s.label {
                Some(true) => "correct",
                Some(false) => "incorrect",
                None => "",
            };
            out.push_str(&format!("label: {label}\n"));
            for line in s.text.lines() {
                out.push_str(&format!("| {line}\n"));
            }
            if s.text.is_empty() {
                out.push_str("|\n");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |n: usize, m: &str| Error::RankSheet(format!("line {}: {m}", n + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == SHEET_MAGIC => {}
            _ => return Err(Error::RankSheet("missing sheet header".into())),
        }
        let mut sheet = RawSheet::default();
        let mut text_lines: Vec<Vec<String>> = Vec::new();
        for (n, line) in lines {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('|') {
                let body = rest.strip_prefix(' ').unwrap_or(rest);
                text_lines
                    .last_mut()
                    .ok_or_else(|| bad(n, "response text before any slot"))?
                    .push(body.to_string());
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| bad(n, "expected `field: value`"))?;
            let value = value.trim();
            match key.trim() {
                "item" => sheet.item = value.to_string(),
                "question" => sheet.question = value.to_string(),
                "slot" => {
                    sheet.slots.push(SheetSlot {
                        slot: value.to_string(),
                        ..SheetSlot::default()
                    });
                    text_lines.push(Vec::new());
                }
                "rank" => {
                    let slot = sheet.slots.last_mut().ok_or_else(|| bad(n, "rank before any slot"))?;
                    slot.rank = if value.is_empty() {
                        None
                    } else {
                        Some(value.parse().map_err(|_| bad(n, "rank is not a positive integer"))?)
                    };
                }
                "label" => {
                    let slot = sheet.slots.last_mut().ok_or_else(|| bad(n, "label before any slot"))?;
                    slot.label = match value.to_ascii_lowercase().as_str() {
                        "" => None,
                        "correct" => Some(true),
                        "incorrect" => Some(false),
                        _ => return Err(bad(n, "label must be `correct` or `incorrect`")),
                    };
                }
                other => return Err(bad(n, &format!("unknown field {other:?}"))),
            }
        }
        for (slot, lines) in sheet.slots.iter_mut().zip(text_lines) {
            slot.text = lines.join("\n");
        }
        if sheet.item.is_empty() {
            return Err(Error::RankSheet("sheet has no item id".into()));
        }
        Ok(sheet)
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Hidden provenance of one sheet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SheetKey {
    pub item: String,
    pub sheet: String,
    /// `(slot, model, unsuccessful)` per slot.
    pub slots: Vec<(String, String, bool)>,
}

fn sheet_file(item: &str) -> String {
    let safe: String = item
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("sheet_{safe}.txt")
}

/// Writes one blinded sheet per item plus `key.jsonl` into `dir`.
/// Returns the sheet paths in item order.
pub fn export_rank_sheets(
    items: &[BenchmarkItem],
    responses: &BTreeMap<String, Vec<Response>>,
    seed: u64,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys = Vec::with_capacity(items.len());
    let mut paths = Vec::with_capacity(items.len());
    for item in items {
        let mut resp: Vec<&Response> = responses
            .get(&item.id)
            .map(|v| v.iter().collect())
            .unwrap_or_default();
        let models: BTreeSet<&str> = resp.iter().map(|r| r.model.as_str()).collect();
        if models.len() < 2 || models.len() != resp.len() {
            return Err(Error::RankSheet(format!(
                "item {} needs responses from at least two distinct models, one each",
                item.id
            )));
        }
        resp.shuffle(&mut rng);
        let sheet = RawSheet {
            item: item.id.clone(),
            question: item.question.clone(),
            slots: resp
                .iter()
                .enumerate()
                .map(|(i, r)| SheetSlot {
                    slot: format!("R{}", i + 1),
                    rank: None,
                    label: None,
                    text: r.text.clone(),
                })
                .collect(),
        };
        let name = sheet_file(&item.id);
        let path = dir.join(&name);
        fs::write(&path, sheet.render())?;
        keys.push(SheetKey {
            item: item.id.clone(),
            sheet: name,
            slots: resp
                .iter()
                .enumerate()
                .map(|(i, r)| (format!("R{}", i + 1), r.model.clone(), r.unsuccessful))
                .collect(),
        });
        paths.push(path);
    }
    write_jsonl(&dir.join(KEY_FILE), &keys)?;
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankEntry {
    pub model: String,
    pub rank: u32,
    pub correct: bool,
    pub unsuccessful: bool,
    pub text: String,
}

/// A completed, de-blinded sheet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankSheet {
    pub item: String,
    pub entries: Vec<RankEntry>,
}

impl RankSheet {
    pub fn rank_of(&self, model: &str) -> Option<u32> {
        self.entries.iter().find(|e| e.model == model).map(|e| e.rank)
    }
}

/// Reads every sheet listed in `dir/key.jsonl`, validates ranks and labels,
/// and restores provenance.
pub fn ingest_rank_sheets(dir: &Path) -> Result<Vec<RankSheet>> {
    let keys: Vec<SheetKey> = read_jsonl(&dir.join(KEY_FILE))?;
    keys.iter()
        .map(|key| {
            let raw = RawSheet::parse(&fs::read_to_string(dir.join(&key.sheet))?)?;
            join_sheet(&raw, key)
        })
        .collect()
}

pub fn join_sheet(raw: &RawSheet, key: &SheetKey) -> Result<RankSheet> {
    let err = |m: String| Err(Error::RankSheet(format!("item {}: {m}", raw.item)));
    if raw.item != key.item {
        return err(format!("sheet names item {} but key expects {}", raw.item, key.item));
    }
    let n = key.slots.len();
    if raw.slots.len() != n {
        return err(format!("{} responses on sheet, {n} in key", raw.slots.len()));
    }
    let mut entries = Vec::with_capacity(n);
    for (slot, (name, model, unsuccessful)) in raw.slots.iter().zip(&key.slots) {
        if &slot.slot != name {
            return err(format!("slot {} does not match key slot {name}", slot.slot));
        }
        let rank = match slot.rank {
            Some(r) if r >= 1 && r as usize <= n => r,
            Some(r) => return err(format!("slot {name}: rank {r} outside 1..={n}")),
            None => return err(format!("slot {name} is unranked")),
        };
        let Some(correct) = slot.label else {
            return err(format!("slot {name} is unlabeled"));
        };
        entries.push(RankEntry {
            model: model.clone(),
            rank,
            correct: correct && !unsuccessful,
            unsuccessful: *unsuccessful,
            text: slot.text.clone(),
        });
    }
    let worst = entries.iter().map(|e| e.rank).max().unwrap_or(0);
    if let Some(e) = entries.iter().find(|e| e.unsuccessful && e.rank != worst) {
        return err(format!("unsuccessful response from {} must rank last or tied-last", e.model));
    }
    Ok(RankSheet {
        item: raw.item.clone(),
        entries,
    })
}

/// Win/tie/lose of `subject` against `rival` over items where both are ranked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadToHead {
    pub win: usize,
    pub tie: usize,
    pub lose: usize,
    pub n: usize,
    pub win_rate: f64,
    pub tie_rate: f64,
    pub lose_rate: f64,
    /// 95% bootstrap intervals for the three rates, same order.
    pub ci: [(f64, f64); 3],
}

pub fn head_to_head(sheets: &[RankSheet], subject: &str, rival: &str, seed: u64) -> Option<HeadToHead> {
    let mut outcomes: Vec<std::cmp::Ordering> = Vec::with_capacity(sheets.len());
    for s in sheets {
        match (s.rank_of(subject), s.rank_of(rival)) {
            // lower rank number is better
            (Some(a), Some(b)) => outcomes.push(b.cmp(&a)),
            _ => log::warn!("item {}: {subject} or {rival} unranked; excluded", s.item),
        }
    }
    let n = outcomes.len();
    if n == 0 {
        return None;
    }
    let count = |o| outcomes.iter().filter(|&&x| x == o).count();
    let (win, tie, lose) = (
        count(std::cmp::Ordering::Greater),
        count(std::cmp::Ordering::Equal),
        count(std::cmp::Ordering::Less),
    );
    let ci = [std::cmp::Ordering::Greater, std::cmp::Ordering::Equal, std::cmp::Ordering::Less].map(|o| {
        let v: Vec<f64> = outcomes.iter().map(|&x| if x == o { 1.0 } else { 0.0 }).collect();
        let (_, lo, hi) = bootstrap_mean(&v, seed, BOOTSTRAP_RESAMPLES);
        (lo, hi)
    });
    Some(HeadToHead {
        win,
        tie,
        lose,
        n,
        win_rate: win as f64 / n as f64,
        tie_rate: tie as f64 / n as f64,
        lose_rate: lose as f64 / n as f64,
        ci,
    })
}
