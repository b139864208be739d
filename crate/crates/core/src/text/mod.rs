//! Byte-level tokenizer and the chat template that builds the answer-only
//! loss mask.

mod template;
mod vocab;

pub use template::{render_chat, ChatTurn, Role, TokenizedSample};
pub use vocab::{Special, TokenId, Vocab, BYTE_TOKENS};
