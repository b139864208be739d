//! End-to-end toy run: synthetic corpus, tokenizer, both training stages and
//! the held-out multiple-choice benchmark.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{generate_synthetic_bench, generate_synthetic_corpus, write_images, write_jsonl, CorpusSizes, BENCH_FILE};
use crate::error::Result;
use crate::eval::{accuracy, evaluate_local, Accuracy, EvalOutcome, Setting};
use crate::model::{ModelBundle, StackConfig};
use crate::text::Vocab;
use crate::train::{prepare_examples, run_stage, select_for_stage, RunOptions, StageReport, TrainPlan};

#[derive(Clone, Debug)]
pub struct ToyRunConfig {
    pub seed: u64,
    pub sizes: CorpusSizes,
    pub bench_items: usize,
    /// Byte-pair merges learned on the corpus text.
    pub merges: usize,
    pub stage1: TrainPlan,
    pub stage2: TrainPlan,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            sizes: CorpusSizes {
                conversation: 512,
                description: 256,
                multiple_choice: 384,
                free_response: 1536,
                text_only: 16,
                guardrail: 16,
            },
            bench_items: 64,
            merges: 160,
            stage1: TrainPlan::toy_stage1(),
            stage2: TrainPlan::toy_stage2(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyRunReport {
    pub records: usize,
    pub vocab_size: usize,
    pub stage1: StageReport,
    pub stage2: StageReport,
    pub outcomes: Vec<EvalOutcome>,
    pub accuracy: Accuracy,
    pub train_secs: f64,
    pub total_secs: f64,
    pub checkpoint: PathBuf,
}

/// Runs the whole pipeline under `work_dir` (`data/`, `stage1/`, `stage2/`).
pub fn toy_run(cfg: &ToyRunConfig, work_dir: &Path) -> Result<ToyRunReport> {
    let started = Instant::now();
    let data_dir = work_dir.join("data");
    let corpus = generate_synthetic_corpus(cfg.seed, &cfg.sizes);
    corpus.write(&data_dir)?;
    let (bench, bench_images) = generate_synthetic_bench(cfg.seed ^ 0xBE7C, cfg.bench_items);
    write_images(&data_dir, &bench_images)?;
    write_jsonl(&data_dir.join(BENCH_FILE), &bench)?;

    let texts = corpus
        .records
        .iter()
        .flat_map(|r| r.turns.iter())
        .flat_map(|t| [t.instruction.as_str(), t.answer.as_str()]);
    let vocab = Vocab::train(texts, cfg.merges);
    let config = StackConfig {
        vocab_size: vocab.len(),
        ..StackConfig::toy()
    };
    let mut bundle = ModelBundle::init(config, vocab, cfg.seed)?;

    let train_start = Instant::now();
    let s1 = select_for_stage(&corpus.records, 1);
    let ex1 = prepare_examples(&bundle, &s1, &data_dir, &cfg.stage1)?;
    let stage1 = run_stage(
        &mut bundle,
        &ex1,
        &cfg.stage1,
        &RunOptions {
            out_dir: work_dir.join("stage1"),
            ..RunOptions::default()
        },
    )?;
    let ex2 = prepare_examples(&bundle, &corpus.records, &data_dir, &cfg.stage2)?;
    let stage2 = run_stage(
        &mut bundle,
        &ex2,
        &cfg.stage2,
        &RunOptions {
            out_dir: work_dir.join("stage2"),
            ..RunOptions::default()
        },
    )?;
    let train_secs = train_start.elapsed().as_secs_f64();

    let outcomes = evaluate_local(&bundle, "toy", &bench, &data_dir, Setting::ImageOnly, cfg.seed)?;
    let correct: Vec<bool> = outcomes.iter().map(|o| o.correct).collect();
    Ok(ToyRunReport {
        records: corpus.records.len(),
        vocab_size: bundle.vocab.len(),
        checkpoint: stage2.checkpoint.clone(),
        stage1,
        stage2,
        accuracy: accuracy(&correct, cfg.seed).ok_or_else(|| crate::Error::Dataset("benchmark is empty".into()))?,
        outcomes,
        train_secs,
        total_secs: started.elapsed().as_secs_f64(),
    })
}
