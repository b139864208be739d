use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MCQ_OPTIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Mcq,
    Open,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BroadCategory {
    Microscopy,
    Diagnosis,
    Clinical,
    #[serde(rename = "Ancillary Testing")]
    AncillaryTesting,
}

impl BroadCategory {
    pub const ALL: [BroadCategory; 4] = [
        BroadCategory::Microscopy,
        BroadCategory::Diagnosis,
        BroadCategory::Clinical,
        BroadCategory::AncillaryTesting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BroadCategory::Microscopy => "Microscopy",
            BroadCategory::Diagnosis => "Diagnosis",
            BroadCategory::Clinical => "Clinical",
            BroadCategory::AncillaryTesting => "Ancillary Testing",
        }
    }
}

/// One benchmark question. MCQ options are stored in canonical order with
/// `key` indexing the correct one; presentation order is derived per item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub image: String,
    #[serde(default)]
    pub organ: String,
    #[serde(default)]
    pub clinical_context: Option<String>,
    pub question: String,
    pub kind: ItemKind,
    #[serde(default)]
    pub options: Vec<String>,
    #[serde(default)]
    pub key: Option<usize>,
    #[serde(default)]
    pub categories: Vec<BroadCategory>,
    #[serde(default)]
    pub sub_categories: Vec<String>,
    /// Ground-truth answer text, when available.
    #[serde(default)]
    pub reference: Option<String>,
}

impl BenchmarkItem {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(format!("benchmark item {}: {m}", self.id)));
        match self.kind {
            ItemKind::Mcq => {
                if self.options.len() != MCQ_OPTIONS {
                    return bad(format!("{} options, expected {MCQ_OPTIONS}", self.options.len()));
                }
                let mut seen = self.options.clone();
                seen.sort();
                seen.dedup();
                if seen.len() != self.options.len() {
                    return bad("duplicate options".into());
                }
                match self.key {
                    Some(k) if k < self.options.len() => Ok(()),
                    _ => bad("missing or out-of-range key".into()),
                }
            }
            ItemKind::Open if self.categories.is_empty() => bad("open item without a category".into()),
            ItemKind::Open => Ok(()),
        }
    }

    /// Seeded presentation order: `order[slot]` is the canonical option index
    /// shown at letter `slot`.
    pub fn presentation_order(&self, seed: u64) -> Vec<usize> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.id.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
        let mut order: Vec<usize> = (0..self.options.len()).collect();
        order.shuffle(&mut rng);
        order
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    ImageOnly,
    #[serde(alias = "image_with_context")]
    WithContext,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::ImageOnly => "image_only",
            Setting::WithContext => "with_context",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_only" => Ok(Setting::ImageOnly),
            "with_context" | "image_with_context" => Ok(Setting::WithContext),
            other => Err(Error::Input(format!("unknown setting {other:?}"))),
        }
    }
}

/// Result of one model on one item in one setting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub item_id: String,
    pub model_id: String,
    pub setting: Setting,
    pub response: String,
    /// Canonical option index, `None` when unparsed or open-ended.
    pub choice: Option<usize>,
    pub correct: bool,
    pub attempts: u32,
    pub unsuccessful: bool,
    /// Stratum label (organ for MCQ items).
    #[serde(default)]
    pub stratum: String,
}

impl EvalOutcome {
    pub fn validate(&self) -> Result<()> {
        if self.unsuccessful && self.correct {
            return Err(Error::Dataset(format!(
                "outcome {}: unsuccessful responses are scored incorrect",
                self.item_id
            )));
        }
        Ok(())
    }
}
