//! Instruction data: record schema, curation filters, guardrail synthesis,
//! statistics and the synthetic shapes corpus.

mod curation;
mod guardrail;
mod record;
mod stats;
mod synth;

use std::path::Path;

pub use curation::{
    filter_caption, filter_instruction, CurationRule, CurationRules, Rejection, RuleKind, Verdict,
    FAILED_RESPONSE_EXAMPLE,
};
pub use guardrail::{make_guardrails, NO_IMAGE_REFUSAL, OUT_OF_DOMAIN_REFUSAL};
pub use record::{read_jsonl, write_jsonl, Category, InstructionRecord, Turn};
pub use stats::{dataset_stats, DatasetStats, REFERENCE_CATEGORY_COUNTS};
pub use synth::{
    all_labels, draw_photo, draw_shape, generate_synthetic_bench, generate_synthetic_corpus, write_images,
    CorpusSizes, Drawn, Shape, SyntheticCorpus, BENCH_FILE, COLORS, IMAGE_DIR, MCQ_QUESTION, RECORDS_FILE,
    SYNTH_IMAGE_SIZE,
};

use crate::error::{Error, Result};

/// Reads and validates `<dir>/records.jsonl`.
pub fn load_records(dir: &Path) -> Result<Vec<InstructionRecord>> {
    let records: Vec<InstructionRecord> = read_jsonl(&dir.join(RECORDS_FILE))?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// Opens an image referenced from a dataset or benchmark directory.
pub fn load_rgb(dir: &Path, name: &str) -> Result<image::RgbImage> {
    let path = dir.join(IMAGE_DIR).join(name);
    let img = image::open(&path)
        .map_err(|e| Error::Dataset(format!("cannot read image {}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}
