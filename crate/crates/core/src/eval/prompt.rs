use super::item::{BenchmarkItem, ItemKind, Setting};
use crate::error::{Error, Result};

pub const LETTERS: [char; 10] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J'];

/// Question text with optional prepended context and a lettered options
/// block, one `X. option` line per option.
pub fn mcq_text(context: Option<&str>, question: &str, options: &[&str]) -> String {
    let mut out = String::new();
    if let Some(c) = context {
        out.push_str(c);
        out.push('\n');
    }
    out.push_str(question);
    for (letter, opt) in LETTERS.iter().zip(options) {
        out.push_str(&format!("\n{letter}. {opt}"));
    }
    out
}

/// A rendered benchmark query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub image: String,
    /// `order[slot]` = canonical option index at letter `slot`; empty for
    /// open items.
    pub order: Vec<usize>,
}

impl Prompt {
    /// Options as presented, i.e. in lettered order.
    pub fn presented<'a>(&self, item: &'a BenchmarkItem) -> Vec<&'a str> {
        self.order.iter().map(|&i| item.options[i].as_str()).collect()
    }
}

pub fn build_prompt(item: &BenchmarkItem, setting: Setting, seed: u64) -> Result<Prompt> {
    let context = match setting {
        Setting::ImageOnly => None,
        Setting::WithContext => Some(
            item.clinical_context
                .as_deref()
                .filter(|c| !c.trim().is_empty())
                .ok_or_else(|| Error::Input(format!("item {} has no clinical context", item.id)))?,
        ),
    };
    let (text, order) = match item.kind {
        ItemKind::Mcq => {
            let order = item.presentation_order(seed);
            let opts: Vec<&str> = order.iter().map(|&i| item.options[i].as_str()).collect();
            (mcq_text(context, &item.question, &opts), order)
        }
        ItemKind::Open => (mcq_text(context, &item.question, &[]), Vec::new()),
    };
    Ok(Prompt {
        text,
        image: item.image.clone(),
        order,
    })
}
