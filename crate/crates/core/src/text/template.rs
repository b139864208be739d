use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::{Special, TokenId, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

/// One chat message before tokenization; `images` counts attached images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
    pub images: usize,
}

impl ChatTurn {
    pub fn user(text: impl Into<String>, images: usize) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
            images: 0,
        }
    }
}

/// Token sequence with the per-token answer mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSample {
    pub ids: Vec<TokenId>,
    /// True exactly on answer tokens and the EOS closing each answer.
    pub loss_mask: Vec<bool>,
    /// Positions of IMAGE placeholders, ascending.
    pub image_slots: Vec<usize>,
    /// Token range of each input turn.
    pub turn_boundaries: Vec<Range<usize>>,
}

impl TokenizedSample {
    /// Sequence length once each placeholder becomes `image_tokens` embeddings.
    pub fn expanded_len(&self, image_tokens: usize) -> usize {
        self.ids.len() + self.image_slots.len() * image_tokens - self.image_slots.len()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Renders turns with the chat template
/// `BOS USER <images> text ASSISTANT answer EOS` per exchange.
///
/// Images sit at the start of their user turn, consecutive images separated
/// by NEWLINE_SEP. A trailing user turn ends with an open ASSISTANT marker so
/// the result can prime generation. `ctx_limit` is checked against the length
/// after each placeholder expands to `image_tokens` positions.
pub fn render_chat(
    vocab: &Vocab,
    turns: &[ChatTurn],
    ctx_limit: usize,
    image_tokens: usize,
) -> Result<TokenizedSample> {
    if turns.is_empty() {
        return Err(Error::Role("a chat needs at least one user turn".into()));
    }
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    let mut image_slots = Vec::new();
    let mut turn_boundaries = Vec::with_capacity(turns.len());
    let mut push = |ids: &mut Vec<TokenId>, id: TokenId, m: bool| {
        ids.push(id);
        mask.push(m);
    };
    for (i, turn) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if turn.role != expected {
            return Err(Error::Role(format!(
                "turn {i} is {:?}; roles must alternate starting with user",
                turn.role
            )));
        }
        let start = ids.len();
        match turn.role {
            Role::User => {
                push(&mut ids, Special::Bos.id(), false);
                push(&mut ids, Special::User.id(), false);
                for k in 0..turn.images {
                    if k > 0 {
                        push(&mut ids, Special::NewlineSep.id(), false);
                    }
                    image_slots.push(ids.len());
                    push(&mut ids, Special::Image.id(), false);
                }
                for id in vocab.encode(&turn.text) {
                    push(&mut ids, id, false);
                }
                push(&mut ids, Special::Assistant.id(), false);
            }
            Role::Assistant => {
                if turn.images > 0 {
                    return Err(Error::Role(format!(
                        "turn {i}: images can only be attached to user turns"
                    )));
                }
                if turn.text.is_empty() {
                    return Err(Error::EmptyAnswer(i));
                }
                for id in vocab.encode(&turn.text) {
                    push(&mut ids, id, true);
                }
                push(&mut ids, Special::Eos.id(), true);
            }
        }
        turn_boundaries.push(start..ids.len());
    }
    let sample = TokenizedSample {
        ids,
        loss_mask: mask,
        image_slots,
        turn_boundaries,
    };
    let len = sample.expanded_len(image_tokens);
    if len > ctx_limit {
        return Err(Error::ContextLength {
            len,
            limit: ctx_limit,
        });
    }
    Ok(sample)
}
