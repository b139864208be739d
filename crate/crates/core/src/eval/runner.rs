use std::fs;
use std::path::Path;

use super::extract::{extract_choice, Choice};
use super::item::{BenchmarkItem, EvalOutcome, ItemKind, Setting};
use super::prompt::{build_prompt, Prompt};
use crate::data::IMAGE_DIR;
use crate::error::Result;
use crate::infer::{chat, query_with_retry, ChatMessage, ChatRequest, RemoteEndpoint};
use crate::model::ModelBundle;

/// Tokens allowed for a benchmark answer.
pub const EVAL_MAX_NEW_TOKENS: usize = 48;

/// Remote targets get no decode parameters, leaving their defaults in force.
fn request_for(prompt: &Prompt, png: &[u8], max_new_tokens: Option<usize>) -> ChatRequest {
    let mut req = ChatRequest::new(vec![ChatMessage::user(prompt.text.clone()).with_png(png)]);
    req.max_new_tokens = max_new_tokens;
    req
}

/// Maps a response back to a canonical option and grades it. Open items
/// are never auto-graded.
pub fn grade(item: &BenchmarkItem, prompt: &Prompt, response: &str) -> (Option<usize>, bool) {
    if item.kind == ItemKind::Open {
        return (None, false);
    }
    let presented = prompt.presented(item);
    match extract_choice(response, &presented) {
        Choice::Index(slot) => {
            let canonical = prompt.order[slot];
            (Some(canonical), item.key == Some(canonical))
        }
        Choice::Unparsed => (None, false),
    }
}

fn outcome(
    item: &BenchmarkItem,
    prompt: &Prompt,
    model_id: &str,
    setting: Setting,
    response: String,
    attempts: u32,
    unsuccessful: bool,
) -> EvalOutcome {
    let (choice, correct) = if unsuccessful { (None, false) } else { grade(item, prompt, &response) };
    EvalOutcome {
        item_id: item.id.clone(),
        model_id: model_id.to_string(),
        setting,
        response,
        choice,
        correct,
        attempts,
        unsuccessful,
        stratum: item.organ.clone(),
    }
}

/// Runs every item through a local model with greedy decoding. Images are
/// read from `dataset_dir/images`.
pub fn evaluate_local(
    bundle: &ModelBundle,
    model_id: &str,
    items: &[BenchmarkItem],
    dataset_dir: &Path,
    setting: Setting,
    seed: u64,
) -> Result<Vec<EvalOutcome>> {
    items
        .iter()
        .map(|item| {
            item.validate()?;
            let prompt = build_prompt(item, setting, seed)?;
            let png = fs::read(dataset_dir.join(IMAGE_DIR).join(&prompt.image))?;
            let reply = chat(bundle, &request_for(&prompt, &png, Some(EVAL_MAX_NEW_TOKENS)))?;
            Ok(outcome(item, &prompt, model_id, setting, reply.text, 1, false))
        })
        .collect()
}

/// Runs every item against a remote endpoint with the retry protocol;
/// items that exhaust their attempts are recorded as unsuccessful.
pub fn evaluate_remote(
    endpoint: &RemoteEndpoint,
    model_id: &str,
    items: &[BenchmarkItem],
    dataset_dir: &Path,
    setting: Setting,
    seed: u64,
) -> Result<Vec<EvalOutcome>> {
    items
        .iter()
        .map(|item| {
            item.validate()?;
            let prompt = build_prompt(item, setting, seed)?;
            let png = fs::read(dataset_dir.join(IMAGE_DIR).join(&prompt.image))?;
            let result = query_with_retry(endpoint, &request_for(&prompt, &png, None))?;
            let attempts = result.attempts() as u32;
            let response = match (&result.answer, result.transcripts.last()) {
                (Some(a), _) => a.clone(),
                (None, Some(last)) => format!("{last:?}"),
                (None, None) => String::new(),
            };
            Ok(outcome(item, &prompt, model_id, setting, response, attempts, result.unsuccessful()))
        })
        .collect()
}
