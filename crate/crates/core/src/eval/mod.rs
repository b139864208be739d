//! Benchmark harness: item schema, prompts, answer extraction, bootstrap
//! accuracy, blinded ranking and head-to-head aggregation.

mod extract;
mod item;
mod prompt;
mod rank;
mod report;
mod runner;
mod stats;
mod taxonomy;

pub use extract::{extract_choice, write_review_queue, Choice, ReviewEntry};
pub use item::{BenchmarkItem, BroadCategory, EvalOutcome, ItemKind, Setting, MCQ_OPTIONS};
pub use prompt::{build_prompt, mcq_text, Prompt, LETTERS};
pub use rank::{
    export_rank_sheets, head_to_head, ingest_rank_sheets, join_sheet, HeadToHead, RankEntry, RankSheet, RawSheet,
    Response, SheetKey, SheetSlot, KEY_FILE, RUBRIC,
};
pub use report::EvalReport;
pub use runner::{evaluate_local, evaluate_remote, grade, EVAL_MAX_NEW_TOKENS};
pub use stats::{
    accuracy, accuracy_with_ci, bootstrap_mean, percentile, score_remote, Accuracy, Restriction,
    BOOTSTRAP_RESAMPLES,
};
pub use taxonomy::{
    broad_of, check_taxonomy_preset, taxonomy_counts, validate_taxonomy, TaxonomyCounts, OPEN_QUESTION_TOTAL,
    TAXONOMY,
};
