use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vlchat::data::{
    dataset_stats, filter_caption, filter_instruction, generate_synthetic_bench, generate_synthetic_corpus,
    load_records, read_jsonl, write_images, write_jsonl, Category, CorpusSizes, CurationRules, InstructionRecord,
    Verdict, BENCH_FILE, IMAGE_DIR,
};
use vlchat::eval::{
    accuracy_with_ci, evaluate_local, evaluate_remote, export_rank_sheets, head_to_head, ingest_rank_sheets,
    score_remote, BenchmarkItem, EvalOutcome, EvalReport, ItemKind, Response, Restriction, Setting,
};
use vlchat::infer::{serve, RemoteEndpoint};
use vlchat::model::StackConfig;
use vlchat::pipeline::{toy_run, ToyRunConfig};
use vlchat::text::Vocab;
use vlchat::train::{prepare_examples, run_stage, select_for_stage, RunOptions, TrainPlan};
use vlchat::ModelBundle;

#[derive(Parser)]
#[command(name = "vlchat", version, about = "Train, serve and evaluate a small vision-language chat model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes corpus and held-out benchmark.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Records per image category (text-only and guardrail get a sixteenth).
        #[arg(long, default_value_t = 128)]
        per_category: usize,
        #[arg(long, default_value_t = 64)]
        bench: usize,
    },
    /// Drop records that trip the curation rules.
    Curate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rules file; the built-in rules when omitted.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Print dataset statistics as JSON.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Learn a tokenizer on a dataset and write a freshly initialized model.
    Init {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 160)]
        merges: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run one training stage.
    Train(TrainArgs),
    /// Serve `POST /v1/chat` and `GET /healthz`.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Run a benchmark against a local checkpoint or a remote endpoint.
    Eval {
        #[command(subcommand)]
        kind: EvalKind,
    },
    /// Write blinded rank sheets from several models' open-ended responses.
    RankExport {
        /// Benchmark file with the open items.
        #[arg(long)]
        items: PathBuf,
        /// One outcomes file per model.
        #[arg(long, num_args = 1.., required = true)]
        responses: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Read completed rank sheets and print head-to-head results.
    RankIngest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        subject: String,
        #[arg(long, num_args = 1.., required = true)]
        rivals: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Accuracy tables with bootstrap intervals from outcome files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        outcomes: Vec<PathBuf>,
        /// Drop unsuccessful remote queries instead of scoring them incorrect.
        #[arg(long)]
        successful_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Synthetic data, both stages and the benchmark in one go.
    ToyRun {
        #[arg(long)]
        work: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long)]
    data: PathBuf,
    /// Model to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// stage1, stage2, toy_stage1 or toy_stage2; defaults to the toy plan of the stage.
    #[arg(long)]
    plan: Option<String>,
    #[arg(long)]
    train_encoder: bool,
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct Target {
    /// Local model checkpoint.
    #[arg(long, conflicts_with = "remote_url")]
    checkpoint: Option<PathBuf>,
    /// Remote chat endpoint URL.
    #[arg(long)]
    remote_url: Option<String>,
    /// Environment variable holding the remote bearer token.
    #[arg(long, requires = "remote_url")]
    token_env: Option<String>,
    #[arg(long)]
    model_id: String,
}

#[derive(Subcommand)]
enum EvalKind {
    /// Multiple-choice items, scored automatically.
    Mcq {
        #[command(flatten)]
        target: Target,
        /// Directory holding the benchmark file and its images.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "image_only")]
        setting: Setting,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Open-ended items; responses go to rank sheets.
    Open {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData {
            out,
            seed,
            per_category,
            bench,
        } => gen_data(&out, seed, per_category, bench),
        Command::Curate { input, out, rules } => curate(&input, &out, rules.as_deref()),
        Command::Stats { data } => {
            let records = load_records(&data)?;
            let stats = dataset_stats(&records, Some(&data.join(IMAGE_DIR)));
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(())
        }
        Command::Init {
            data,
            out,
            merges,
            seed,
        } => init(&data, &out, merges, seed),
        Command::Train(args) => train(args),
        Command::Serve {
            checkpoint,
            port,
            host,
        } => {
            let bundle = ModelBundle::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host or port")?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(Arc::new(bundle), addr))?;
            Ok(())
        }
        Command::Eval { kind } => eval(kind),
        Command::RankExport {
            items,
            responses,
            out,
            seed,
        } => rank_export(&items, &responses, &out, seed),
        Command::RankIngest {
            dir,
            subject,
            rivals,
            seed,
            json,
        } => {
            let sheets = ingest_rank_sheets(&dir)?;
            let mut report = EvalReport::default();
            for rival in rivals {
                match head_to_head(&sheets, &subject, &rival, seed) {
                    Some(h) => {
                        report.head_to_head.insert(format!("{subject} vs {rival}"), h);
                    }
                    None => log::warn!("no sheet ranks both {subject} and {rival}"),
                }
            }
            emit(&report, json.as_deref())
        }
        Command::Report {
            outcomes,
            successful_only,
            seed,
            json,
        } => report(&outcomes, successful_only, seed, json.as_deref()),
        Command::ToyRun { work, seed } => {
            let cfg = ToyRunConfig {
                seed,
                ..ToyRunConfig::default()
            };
            let r = toy_run(&cfg, &work)?;
            println!(
                "{} records, vocabulary {}, trained in {:.0}s",
                r.records, r.vocab_size, r.train_secs
            );
            println!(
                "benchmark accuracy {}/{} = {:.3} (95% CI {:.3}-{:.3})",
                r.accuracy.correct, r.accuracy.total, r.accuracy.estimate, r.accuracy.lo, r.accuracy.hi
            );
            println!("checkpoint: {}", r.checkpoint.display());
            Ok(())
        }
    }
}

fn gen_data(out: &Path, seed: u64, per_category: usize, bench: usize) -> Result<()> {
    let minor = (per_category / 16).max(1);
    let sizes = CorpusSizes {
        conversation: per_category,
        description: per_category,
        multiple_choice: per_category,
        free_response: per_category,
        text_only: minor,
        guardrail: minor,
    };
    let corpus = generate_synthetic_corpus(seed, &sizes);
    corpus.write(out)?;
    let (items, images) = generate_synthetic_bench(seed ^ 0xBE7C, bench);
    write_images(out, &images)?;
    write_jsonl(&out.join(BENCH_FILE), &items)?;
    println!("wrote {} records and {} benchmark items to {}", corpus.records.len(), items.len(), out.display());
    Ok(())
}

fn curate(input: &Path, out: &Path, rules: Option<&Path>) -> Result<()> {
    let rules = match rules {
        Some(p) => CurationRules::from_text(&fs::read_to_string(p)?)?,
        None => CurationRules::default(),
    };
    let records: Vec<InstructionRecord> = read_jsonl(input)?;
    let mut kept = Vec::new();
    let mut dropped: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        let caption = (r.category == Category::Description)
            .then(|| r.turns.first().map(|t| filter_caption(&t.answer, &rules)))
            .flatten()
            .unwrap_or(Verdict::Keep);
        let verdict = if caption.is_keep() { filter_instruction(&r, &rules) } else { caption };
        match verdict {
            Verdict::Keep => kept.push(r),
            Verdict::Reject(why) => {
                log::debug!("dropping {}: {why}", r.id);
                *dropped.entry(why.rule.name().to_string()).or_default() += 1;
            }
        }
    }
    write_jsonl(out, &kept)?;
    println!("kept {} records", kept.len());
    for (rule, n) in dropped {
        println!("dropped {n} by {rule}");
    }
    Ok(())
}

fn init(data: &Path, out: &Path, merges: usize, seed: u64) -> Result<()> {
    let records = load_records(data)?;
    let texts = records
        .iter()
        .flat_map(|r| r.turns.iter())
        .flat_map(|t| [t.instruction.as_str(), t.answer.as_str()]);
    let vocab = Vocab::train(texts, merges);
    let config = StackConfig {
        vocab_size: vocab.len(),
        ..StackConfig::toy()
    };
    let bundle = ModelBundle::<f32>::init(config, vocab, seed)?;
    bundle.save(out)?;
    println!("initialized {} parameters, vocabulary {}", bundle.num_params(None), bundle.vocab.len());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let default = if a.stage == 1 { "toy_stage1" } else { "toy_stage2" };
    let mut plan = TrainPlan::preset(a.plan.as_deref().unwrap_or(default))?.with_encoder(a.train_encoder);
    if plan.stage != a.stage {
        bail!("plan is for stage {}, not stage {}", plan.stage, a.stage);
    }
    if let Some(e) = a.epochs {
        plan.epochs = e;
    }
    if let Some(lr) = a.lr {
        plan.peak_lr = lr;
    }
    if let Some(k) = a.checkpoint_every {
        plan.checkpoint_every = k;
    }
    let mut bundle = ModelBundle::load(&a.checkpoint)?;
    let records = select_for_stage(&load_records(&a.data)?, a.stage);
    let examples = prepare_examples(&bundle, &records, &a.data, &plan)?;
    let report = run_stage(
        &mut bundle,
        &examples,
        &plan,
        &RunOptions {
            out_dir: a.out,
            resume: a.resume,
            stop_after: None,
        },
    )?;
    if let Some((step, loss, _)) = report.history.last() {
        println!("stage {} finished at update {} with loss {loss:.4}", plan.stage, step + 1);
    }
    println!("checkpoint: {}", report.checkpoint.display());
    Ok(())
}

fn endpoint(t: &Target) -> Option<RemoteEndpoint> {
    t.remote_url.as_ref().map(|url| RemoteEndpoint {
        token_env: t.token_env.clone(),
        ..RemoteEndpoint::new(url.clone())
    })
}

fn run_items(t: &Target, items: &[BenchmarkItem], data: &Path, setting: Setting, seed: u64) -> Result<Vec<EvalOutcome>> {
    if let Some(ep) = endpoint(t) {
        return Ok(evaluate_remote(&ep, &t.model_id, items, data, setting, seed)?);
    }
    let Some(ckpt) = &t.checkpoint else {
        bail!("give --checkpoint or --remote-url");
    };
    let bundle = ModelBundle::load(ckpt)?;
    Ok(evaluate_local(&bundle, &t.model_id, items, data, setting, seed)?)
}

fn eval(kind: EvalKind) -> Result<()> {
    match kind {
        EvalKind::Mcq {
            target,
            data,
            setting,
            seed,
            out,
        } => {
            let items: Vec<BenchmarkItem> = read_jsonl(&data.join(BENCH_FILE))?;
            let items: Vec<BenchmarkItem> = items.into_iter().filter(|i| i.kind == ItemKind::Mcq).collect();
            let outcomes = run_items(&target, &items, &data, setting, seed)?;
            write_jsonl(&out, &outcomes)?;
            let strata = accuracy_with_ci(&outcomes, |o| o.stratum.clone(), seed);
            let mut report = EvalReport::default();
            report.accuracy.insert(format!("{} / {setting}", target.model_id), strata);
            print!("{}", report.to_table());
            Ok(())
        }
        EvalKind::Open {
            target,
            data,
            seed,
            out,
        } => {
            let items: Vec<BenchmarkItem> = read_jsonl(&data.join(BENCH_FILE))?;
            let items: Vec<BenchmarkItem> = items.into_iter().filter(|i| i.kind == ItemKind::Open).collect();
            let outcomes = run_items(&target, &items, &data, Setting::ImageOnly, seed)?;
            write_jsonl(&out, &outcomes)?;
            println!("wrote {} responses to {}", outcomes.len(), out.display());
            Ok(())
        }
    }
}

fn rank_export(items: &Path, responses: &[PathBuf], out: &Path, seed: u64) -> Result<()> {
    let items: Vec<BenchmarkItem> = read_jsonl(items)?;
    let items: Vec<BenchmarkItem> = items.into_iter().filter(|i| i.kind == ItemKind::Open).collect();
    let mut by_item: BTreeMap<String, Vec<Response>> = BTreeMap::new();
    for path in responses {
        let outcomes: Vec<EvalOutcome> = read_jsonl(path)?;
        for o in outcomes {
            by_item.entry(o.item_id).or_default().push(Response {
                model: o.model_id,
                text: o.response,
                unsuccessful: o.unsuccessful,
            });
        }
    }
    let paths = export_rank_sheets(&items, &by_item, seed, out)?;
    println!("wrote {} sheets to {}", paths.len(), out.display());
    Ok(())
}

fn report(files: &[PathBuf], successful_only: bool, seed: u64, json: Option<&Path>) -> Result<()> {
    let mut runs: BTreeMap<(String, Setting), Vec<EvalOutcome>> = BTreeMap::new();
    for f in files {
        let outcomes: Vec<EvalOutcome> = read_jsonl(f)?;
        for o in outcomes {
            o.validate()?;
            runs.entry((o.model_id.clone(), o.setting)).or_default().push(o);
        }
    }
    let mut report = EvalReport::default();
    for ((model, setting), outcomes) in runs {
        let kept: Vec<EvalOutcome> = if successful_only {
            outcomes.into_iter().filter(|o| !o.unsuccessful).collect()
        } else {
            outcomes
        };
        let mut strata = accuracy_with_ci(&kept, |o| o.stratum.clone(), seed);
        let restriction = if successful_only { Restriction::SuccessfulOnly } else { Restriction::All };
        if let Some(a) = score_remote(&kept, restriction, seed) {
            strata.insert("all".into(), a);
        }
        report.accuracy.insert(format!("{model} / {setting}"), strata);
    }
    emit(&report, json)
}

fn emit(report: &EvalReport, json: Option<&Path>) -> Result<()> {
    print!("{}", report.to_table());
    if let Some(path) = json {
        fs::write(path, serde_json::to_string_pretty(report)?)?;
    }
    Ok(())
}
