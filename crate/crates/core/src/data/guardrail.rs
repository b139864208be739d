use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::record::{Category, InstructionRecord, Turn};
use crate::error::{Error, Result};

/// Answer when an image-specific instruction arrives without an image.
pub const NO_IMAGE_REFUSAL: &str = "Sorry, I cannot assist you since you have not uploaded any image.";
/// Answer when the attached image is outside the supported domain.
pub const OUT_OF_DOMAIN_REFUSAL: &str = "Sorry I can only assist you with queries related to pathology.";

/// Builds `n` records of each refusal kind.
///
/// Kind A pairs an image-referential prompt with no image; kind B attaches
/// an image from `image_pool` (out-of-domain pictures) to a prompt. Prompts
/// and pool entries are drawn with a seeded shuffle.
pub fn make_guardrails(
    prompts: &[String],
    image_pool: &[String],
    n: usize,
    seed: u64,
) -> Result<Vec<InstructionRecord>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if prompts.is_empty() {
        return Err(Error::Dataset("guardrail synthesis needs at least one prompt".into()));
    }
    if image_pool.is_empty() {
        return Err(Error::Dataset("out-of-domain image pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let prompt = prompts.choose(&mut rng).expect("nonempty");
        out.push(InstructionRecord {
            id: format!("guard-noimg-{seed}-{i}"),
            category: Category::Guardrail,
            images: Vec::new(),
            turns: vec![Turn::new(prompt.clone(), NO_IMAGE_REFUSAL)],
            source: "guardrail".into(),
        });
    }
    for i in 0..n {
        let prompt = prompts.choose(&mut rng).expect("nonempty");
        let image = image_pool.choose(&mut rng).expect("nonempty");
        out.push(InstructionRecord {
            id: format!("guard-domain-{seed}-{i}"),
            category: Category::Guardrail,
            images: vec![image.clone()],
            turns: vec![Turn::new(prompt.clone(), OUT_OF_DOMAIN_REFUSAL)],
            source: "guardrail".into(),
        });
    }
    Ok(out)
}
