use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_grad_norm, AdamW, Grads};
use super::plan::{Overflow, TrainPlan};
use crate::data::{load_rgb, Category, InstructionRecord};
use crate::error::{Error, Result};
use crate::model::checkpoint::{read_container, write_container};
use crate::model::{encoder_features, preprocess_image, sample_loss, ImageInput, ModelBundle, Params, Partition};
use crate::tensor::{Graph, Tensor};
use crate::text::{render_chat, TokenizedSample};

pub const MODEL_FILE: &str = "model.mmf";
pub const STATE_FILE: &str = "train_state.mmf";
pub const LOSS_FILE: &str = "loss.csv";

/// A tokenized record with its images ready for the forward pass.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub sample: TokenizedSample,
    pub images: Vec<ImageInput>,
}

/// Records used by a stage: captions only for stage 1, everything for stage 2.
pub fn select_for_stage(records: &[InstructionRecord], stage: u8) -> Vec<InstructionRecord> {
    records
        .iter()
        .filter(|r| stage != 1 || r.category == Category::Description)
        .cloned()
        .collect()
}

/// Tokenizes records and loads their images from `dataset_dir/images`.
///
/// When the encoder is not trained its output is computed once per distinct
/// image and reused. Records that overflow the context are skipped or
/// rejected according to the plan.
pub fn prepare_examples(
    bundle: &ModelBundle,
    records: &[InstructionRecord],
    dataset_dir: &Path,
    plan: &TrainPlan,
) -> Result<Vec<Example>> {
    let cfg = &bundle.config;
    let cache_features = !plan.trainable.contains(&Partition::Encoder);
    let mut cache: HashMap<String, ImageInput> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    let mut skipped = 0usize;
    for r in records {
        r.validate()?;
        let sample = match render_chat(&bundle.vocab, &r.chat_turns(), cfg.ctx_limit, cfg.pool_latents) {
            Ok(s) => s,
            Err(e @ Error::ContextLength { .. }) => match plan.overflow {
                Overflow::Skip => {
                    log::warn!("skipping record {}: {e}", r.id);
                    skipped += 1;
                    continue;
                }
                Overflow::Error => return Err(Error::Dataset(format!("record {}: {e}", r.id))),
            },
            Err(e) => return Err(e),
        };
        let mut images = Vec::with_capacity(r.images.len());
        for name in &r.images {
            if let Some(hit) = cache.get(name) {
                images.push(hit.clone());
                continue;
            }
            let pixels = preprocess_image(&load_rgb(dataset_dir, name)?, cfg.image_size)?;
            let input = if cache_features {
                ImageInput::Features(encoder_features(bundle, &pixels)?)
            } else {
                ImageInput::Pixels(pixels)
            };
            cache.insert(name.clone(), input.clone());
            images.push(input);
        }
        out.push(Example {
            id: r.id.clone(),
            sample,
            images,
        });
    }
    if skipped > 0 {
        log::info!("skipped {skipped} overlong records");
    }
    Ok(out)
}

/// Mean masked next-token loss over `examples`, without gradients.
pub fn instruction_loss(bundle: &ModelBundle, examples: &[&Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let mut total = 0.0;
    for ex in examples {
        let mut g = Graph::new();
        let p = Params::bind(&mut g, &bundle.weights, &[]);
        let loss = sample_loss(&mut g, &p, &bundle.config, &ex.sample, &ex.images)?;
        total += g.value(loss).item() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Mean loss and mean gradient of the trainable weights over `examples`.
///
/// Examples are visited in the order given; callers that want results
/// independent of batch order sort first (see [`train_step`]).
pub fn loss_and_grads(bundle: &ModelBundle, examples: &[&Example], trainable: &[Partition]) -> Result<(f64, Grads)> {
    if examples.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let names: Vec<&String> = bundle
        .weights
        .keys()
        .filter(|n| Partition::of(n).is_some_and(|p| trainable.contains(&p)))
        .collect();
    let mut grads: Grads = names
        .iter()
        .map(|n| ((*n).clone(), vec![0.0f32; bundle.weights[*n].numel()]))
        .collect();
    let mut total = 0.0f64;
    for ex in examples {
        let mut g = Graph::new();
        let p = Params::bind(&mut g, &bundle.weights, trainable);
        let loss = sample_loss(&mut g, &p, &bundle.config, &ex.sample, &ex.images)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            let origin = g
                .first_non_finite()
                .map(|(v, op)| format!("first produced by {op} at node {}", v.index()))
                .unwrap_or_default();
            return Err(Error::Training(format!("non-finite loss {value} on record {} {origin}", ex.id)));
        }
        total += value;
        g.backward(loss)?;
        for name in &names {
            let var = p.get(name)?;
            if let Some(gr) = g.grad(var) {
                let acc = grads.get_mut(*name).expect("buffer allocated above");
                acc.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
            }
        }
    }
    let inv = 1.0 / examples.len() as f32;
    for buf in grads.values_mut() {
        buf.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((total / examples.len() as f64, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Clips and applies an already-averaged gradient.
pub fn apply_gradients(
    bundle: &mut ModelBundle,
    mut grads: Grads,
    opt: &mut AdamW,
    plan: &TrainPlan,
    lr: f64,
) -> Result<f64> {
    let norm = clip_grad_norm(&mut grads, plan.clip_norm);
    if !norm.is_finite() {
        return Err(Error::Training(format!("non-finite gradient norm {norm}")));
    }
    opt.update(&mut bundle.weights, &grads, plan, lr)?;
    Ok(norm)
}

/// One optimizer update over every sample of `batch`.
///
/// Samples are processed sorted by id, so the update does not depend on
/// the order in which the batch was assembled.
pub fn train_step(
    bundle: &mut ModelBundle,
    batch: &[&Example],
    opt: &mut AdamW,
    plan: &TrainPlan,
    lr: f64,
) -> Result<StepMetrics> {
    let mut sorted = batch.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let (loss, grads) = loss_and_grads(bundle, &sorted, &plan.trainable)?;
    let grad_norm = apply_gradients(bundle, grads, opt, plan, lr)?;
    Ok(StepMetrics { loss, grad_norm, lr })
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Continue from `out_dir`'s saved state instead of starting fresh.
    pub resume: bool,
    /// Stop after this many updates in total (the rest of the schedule is
    /// unchanged, so a later resume picks up exactly where this left off).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    /// `(update, loss, lr)` for every update run in this invocation.
    pub history: Vec<(usize, f64, f64)>,
    pub total_updates: usize,
    pub completed: usize,
    pub checkpoint: PathBuf,
}

fn save_state(dir: &Path, opt: &AdamW, plan: &TrainPlan) -> Result<()> {
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    for (prefix, map) in [("m", &opt.m), ("v", &opt.v)] {
        for (name, buf) in map {
            owned.push((format!("{prefix}/{name}"), Tensor::new(vec![buf.len()], buf.clone())?));
        }
    }
    let refs: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let meta = format!("step={}\nstage={}\nseed={}\n", opt.step, plan.stage, plan.seed);
    write_container(&dir.join(STATE_FILE), &refs, &meta)
}

fn load_state(dir: &Path, plan: &TrainPlan) -> Result<AdamW> {
    let (tensors, meta) = read_container::<f32>(&dir.join(STATE_FILE))?;
    let mut step = None;
    for line in meta.lines() {
        match line.split_once('=') {
            Some(("step", v)) => step = v.parse().ok(),
            Some(("stage", v)) if v != plan.stage.to_string() => {
                return Err(Error::Checkpoint(format!("saved state is for stage {v}, plan is stage {}", plan.stage)))
            }
            _ => {}
        }
    }
    let mut opt = AdamW {
        step: step.ok_or_else(|| Error::Checkpoint("training state lacks a step count".into()))?,
        ..AdamW::default()
    };
    for (name, t) in tensors {
        let (kind, weight) = name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("bad optimizer entry {name}")))?;
        let map = match kind {
            "m" => &mut opt.m,
            "v" => &mut opt.v,
            _ => return Err(Error::Checkpoint(format!("bad optimizer entry {name}"))),
        };
        map.insert(weight.to_string(), t.to_vec());
    }
    Ok(opt)
}

/// Rewrites the loss log keeping only rows for updates before `upto`.
fn truncate_log(path: &Path, upto: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = String::from("step,loss,lr\n");
    for line in text.lines().skip(1) {
        let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
        if step.is_some_and(|s| s < upto) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Runs (or resumes) one training stage over `examples`.
///
/// Each epoch visits the examples in a seeded shuffle. The loss log
/// (`step,loss,lr`) and a resumable checkpoint (model plus optimizer
/// moments) are written to `opts.out_dir`.
pub fn run_stage(
    bundle: &mut ModelBundle,
    examples: &[Example],
    plan: &TrainPlan,
    opts: &RunOptions,
) -> Result<StageReport> {
    plan.validate()?;
    if examples.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    fs::create_dir_all(&opts.out_dir)?;
    let per_epoch = plan.updates_per_epoch(examples.len());
    let total = plan.total_updates(examples.len());
    let log_path = opts.out_dir.join(LOSS_FILE);

    let mut opt = if opts.resume {
        *bundle = ModelBundle::load(&opts.out_dir.join(MODEL_FILE))?;
        load_state(&opts.out_dir, plan)?
    } else {
        AdamW::default()
    };
    let start = opt.step as usize;
    truncate_log(&log_path, start)?;
    let mut log = fs::OpenOptions::new().append(true).open(&log_path)?;

    let end = opts.stop_after.map_or(total, |s| s.min(total));
    let per_update = plan.samples_per_update();
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = usize::MAX;
    let mut history = Vec::new();
    for step in start..end {
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = (0..examples.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);
            order_epoch = epoch;
        }
        let lo = (step % per_epoch) * per_update;
        let hi = (lo + per_update).min(examples.len());
        let batch: Vec<&Example> = order[lo..hi].iter().map(|&i| &examples[i]).collect();
        let lr = plan.lr_at(step, total)?;
        let m = train_step(bundle, &batch, &mut opt, plan, lr)?;
        writeln!(log, "{step},{},{}", m.loss, m.lr)?;
        history.push((step, m.loss, m.lr));
        if step % 10 == 0 || step + 1 == end {
            log::info!(
                "stage {} update {}/{total} loss {:.4} lr {:.3e} |g| {:.3}",
                plan.stage,
                step + 1,
                m.loss,
                m.lr,
                m.grad_norm
            );
        }
        let done = step + 1;
        if plan.checkpoint_every > 0 && done % plan.checkpoint_every == 0 && done < end {
            bundle.save(&opts.out_dir.join(MODEL_FILE))?;
            save_state(&opts.out_dir, &opt, plan)?;
        }
    }
    let checkpoint = opts.out_dir.join(MODEL_FILE);
    bundle.save(&checkpoint)?;
    save_state(&opts.out_dir, &opt, plan)?;
    Ok(StageReport {
        history,
        total_updates: total,
        completed: end,
        checkpoint,
    })
}
