use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::ChatTurn;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Conversation,
    Description,
    MultipleChoice,
    FreeResponse,
    TextOnly,
    Guardrail,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Conversation,
        Category::Description,
        Category::MultipleChoice,
        Category::FreeResponse,
        Category::TextOnly,
        Category::Guardrail,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Conversation => "conversation",
            Category::Description => "description",
            Category::MultipleChoice => "multiple_choice",
            Category::FreeResponse => "free_response",
            Category::TextOnly => "text_only",
            Category::Guardrail => "guardrail",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub instruction: String,
    pub answer: String,
}

impl Turn {
    pub fn new(instruction: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            answer: answer.into(),
        }
    }
}

/// One training example. Image references are file names relative to the
/// dataset's image directory; all images attach to the first instruction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub category: Category,
    #[serde(default)]
    pub images: Vec<String>,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub source: String,
}

impl InstructionRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Dataset(format!("record {}: {msg}", self.id)));
        if self.turns.is_empty() {
            return bad("no turns".into());
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.instruction.trim().is_empty() || t.answer.trim().is_empty() {
                return bad(format!("turn {i} has empty instruction or answer"));
            }
        }
        match self.category {
            Category::TextOnly if !self.images.is_empty() => bad("text_only record carries images".into()),
            Category::Guardrail | Category::TextOnly => Ok(()),
            _ if self.images.is_empty() => bad(format!("{} record needs an image", self.category)),
            _ => Ok(()),
        }
    }

    /// Alternating user/assistant turns; images go on the first user turn.
    pub fn chat_turns(&self) -> Vec<ChatTurn> {
        let mut out = Vec::with_capacity(2 * self.turns.len());
        for (i, t) in self.turns.iter().enumerate() {
            let images = if i == 0 { self.images.len() } else { 0 };
            out.push(ChatTurn::user(t.instruction.clone(), images));
            out.push(ChatTurn::assistant(t.answer.clone()));
        }
        out
    }
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
