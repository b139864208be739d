use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::decode::{decode, DecodeMode};
use crate::error::{Error, Result};
use crate::model::{preprocess_image, ImageInput, ModelBundle};
use crate::text::{render_chat, ChatTurn, Role, Special};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
    /// Base64-encoded PNG files.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            ..Self::user(text)
        }
    }

    /// Attaches an encoded PNG.
    pub fn with_png(mut self, png: &[u8]) -> Self {
        self.images.push(STANDARD.encode(png));
        self
    }
}

/// The full conversation so far; the service keeps no state between calls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<usize>,
    /// Greedy unless explicitly `false`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub greedy: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            max_new_tokens: None,
            greedy: None,
            temperature: None,
            seed: None,
        }
    }

    /// Roles alternate starting and ending with the user; only user messages
    /// carry images.
    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::Input("request has no messages".into()));
        }
        for (i, m) in self.messages.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != expected {
                return Err(Error::Role(format!("message {i} is {:?}; roles must alternate starting with user", m.role)));
            }
            if m.role == Role::Assistant && !m.images.is_empty() {
                return Err(Error::Role(format!("message {i}: images can only be attached to user messages")));
            }
        }
        if self.messages.len() % 2 == 0 {
            return Err(Error::Role("the last message must come from the user".into()));
        }
        Ok(())
    }

    pub fn mode(&self) -> DecodeMode {
        match self.greedy {
            Some(false) => DecodeMode::Sample {
                temperature: self.temperature.unwrap_or(1.0),
                seed: self.seed.unwrap_or(0),
            },
            _ => DecodeMode::Greedy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

/// Decodes one base64 PNG into the encoder's pixel tensor.
pub fn decode_png(b64: &str, image_size: usize) -> Result<ImageInput> {
    let bytes = STANDARD
        .decode(b64.trim())
        .map_err(|e| Error::Input(format!("image payload is not valid base64: {e}")))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Input(format!("image payload is not a PNG: {e}")))?
        .to_rgb8();
    Ok(ImageInput::Pixels(preprocess_image(&img, image_size)?))
}

/// Renders the whole history, decodes, and returns the assistant reply.
pub fn chat(bundle: &ModelBundle, request: &ChatRequest) -> Result<ChatReply> {
    request.validate()?;
    let cfg = &bundle.config;
    let turns: Vec<ChatTurn> = request
        .messages
        .iter()
        .map(|m| ChatTurn {
            role: m.role,
            text: m.text.clone(),
            images: m.images.len(),
        })
        .collect();
    let images = request
        .messages
        .iter()
        .flat_map(|m| &m.images)
        .map(|b| decode_png(b, cfg.image_size))
        .collect::<Result<Vec<_>>>()?;
    let prompt = render_chat(&bundle.vocab, &turns, cfg.ctx_limit, cfg.pool_latents)?;
    let max_new = request.max_new_tokens.unwrap_or(DEFAULT_MAX_NEW_TOKENS);
    let out = decode(bundle, &prompt, &images, max_new, request.mode(), true)?;
    let text_ids: Vec<_> = out.tokens.iter().copied().filter(|&id| Special::from_id(id).is_none()).collect();
    Ok(ChatReply {
        text: bundle.vocab.decode(&text_ids)?,
        prompt_tokens: out.prompt_len,
        completion_tokens: out.tokens.len(),
    })
}
