mod common;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use vlchat::data::{generate_synthetic_corpus, Category, CorpusSizes, InstructionRecord, Turn};
use vlchat::model::{forward_sample, ImageInput, Params, Partition};
use vlchat::tensor::Graph;
use vlchat::text::render_chat;
use vlchat::train::*;
use vlchat::{Error, ModelBundle, Tensor};

fn small_corpus(dir: &Path, seed: u64) -> Vec<InstructionRecord> {
    let sizes = CorpusSizes {
        conversation: 2,
        description: 4,
        multiple_choice: 0,
        free_response: 3,
        text_only: 1,
        guardrail: 2,
    };
    let corpus = generate_synthetic_corpus(seed, &sizes);
    corpus.write(dir).unwrap();
    corpus.records
}

fn quick_plan(stage: u8) -> TrainPlan {
    let base = if stage == 1 { TrainPlan::toy_stage1() } else { TrainPlan::toy_stage2() };
    TrainPlan {
        batch_size: 2,
        accumulation: 2,
        epochs: 1,
        ..base
    }
}

#[test]
fn reference_presets() {
    let s1 = TrainPlan::stage1();
    assert_eq!(s1.trainable, vec![Partition::Projector]);
    assert_eq!((s1.batch_size, s1.accumulation, s1.epochs), (128, 1, 1));
    assert_eq!((s1.peak_lr, s1.warmup_ratio, s1.weight_decay, s1.clip_norm), (1e-3, 0.03, 0.0, 1.0));
    assert_eq!((s1.beta1, s1.beta2, s1.eps), (0.9, 0.999, 1e-8));
    let s2 = TrainPlan::stage2();
    assert_eq!(s2.trainable, vec![Partition::Projector, Partition::Lm]);
    assert_eq!((s2.batch_size, s2.accumulation, s2.samples_per_update()), (64, 2, 128));
    assert_eq!(s2.peak_lr, 2e-5);
    assert!(s2.clone().with_encoder(true).trainable.contains(&Partition::Encoder));
    assert!(!s2.with_encoder(false).trainable.contains(&Partition::Encoder));
    for name in ["stage1", "stage2", "toy_stage1", "toy_stage2"] {
        TrainPlan::preset(name).unwrap().validate().unwrap();
    }
    assert!(TrainPlan::preset("stage3").is_err());
    let bad = TrainPlan {
        trainable: vec![],
        ..TrainPlan::stage1()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn schedule_matches_closed_form() {
    let plan = TrainPlan::stage1();
    let total = 100;
    // ceil(100 * 0.03) = 3 warmup updates
    assert_eq!(plan.warmup_updates(total), 3);
    assert_eq!(plan.lr_at(0, total).unwrap(), 0.0);
    assert!((plan.lr_at(1, total).unwrap() - 1e-3 / 3.0).abs() < 1e-18);
    assert_eq!(plan.lr_at(3, total).unwrap(), 1e-3);
    for k in 3..total {
        let want = 1e-3 * 0.5 * (1.0 + (PI * (k - 3) as f64 / 97.0).cos());
        assert!((plan.lr_at(k, total).unwrap() - want).abs() < 1e-15, "step {k}");
    }
    let lrs: Vec<f64> = (3..total).map(|k| plan.lr_at(k, total).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(plan.lr_at(total, total).unwrap(), 0.0);
    assert!(plan.lr_at(0, 0).is_err());
    // effective batch rounds the epoch up
    assert_eq!(TrainPlan::stage2().updates_per_epoch(300), 3);
}

#[test]
fn clipping_scales_to_the_limit() {
    let mut g: Grads = BTreeMap::new();
    g.insert("a".into(), vec![6.0, 0.0]);
    g.insert("b".into(), vec![0.0, 8.0]);
    assert_eq!(grad_norm(&g), 10.0);
    let before = clip_grad_norm(&mut g, 1.0);
    assert_eq!(before, 10.0);
    assert_eq!(g["a"], vec![0.6f32, 0.0]);
    assert_eq!(g["b"], vec![0.0, 0.8f32]);
    assert!((grad_norm(&g) - 1.0).abs() < 1e-6);
    let mut small = g.clone();
    clip_grad_norm(&mut small, 5.0);
    assert_eq!(small, g);
}

#[test]
fn adamw_update_rule() {
    let plan = TrainPlan::stage1();
    let mut w: vlchat::model::Weights<f32> = BTreeMap::new();
    w.insert("projector.x".into(), Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let start = w.clone();

    // zero gradient, no decay: nothing moves
    let mut opt = AdamW::default();
    let zero: Grads = [("projector.x".to_string(), vec![0.0; 3])].into();
    opt.update(&mut w, &zero, &plan, 1e-3).unwrap();
    assert!(w["projector.x"].bit_eq(&start["projector.x"]));

    // first bias-corrected step moves each weight by lr * g / (|g| + eps)
    let mut opt = AdamW::default();
    let g: Grads = [("projector.x".to_string(), vec![0.2, -3.0, 0.0])].into();
    opt.update(&mut w, &g, &plan, 1e-2).unwrap();
    let got = w["projector.x"].data();
    for (i, (&p0, &gi)) in [0.5f64, -1.0, 2.0].iter().zip(&[0.2f64, -3.0, 0.0]).enumerate() {
        let want = p0 - 1e-2 * gi / (gi.abs() + 1e-8);
        assert!((got[i] as f64 - want).abs() < 1e-6, "{i}: {} vs {want}", got[i]);
    }
    assert_eq!(opt.step, 1);

    // decoupled decay shrinks weights with no gradient
    let decay = TrainPlan {
        weight_decay: 0.1,
        ..TrainPlan::stage1()
    };
    let mut w2 = start.clone();
    AdamW::default().update(&mut w2, &zero, &decay, 0.5).unwrap();
    for (a, b) in w2["projector.x"].data().iter().zip(start["projector.x"].data()) {
        assert!((a - b * (1.0 - 0.05)).abs() < 1e-7);
    }
    let unknown: Grads = [("lm.nope".to_string(), vec![0.0])].into();
    assert!(matches!(AdamW::default().update(&mut w2, &unknown, &plan, 0.1), Err(Error::Training(_))));
}

#[test]
fn uniform_logits_give_log_vocab_and_ignore_prompt_targets() {
    let mut bundle = common::toy_bundle::<f32>(3);
    let head = bundle.weights.get_mut("lm.head").unwrap();
    head.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let rec = InstructionRecord {
        id: "t".into(),
        category: Category::TextOnly,
        images: vec![],
        turns: vec![Turn::new("How many sides does a square have?", "Four sides.")],
        source: "test".into(),
    };
    let sample = render_chat(&bundle.vocab, &rec.chat_turns(), 512, 8).unwrap();
    let ex = Example {
        id: rec.id.clone(),
        sample,
        images: vec![],
    };
    let loss = instruction_loss(&bundle, &[&ex]).unwrap();
    let want = (bundle.config.vocab_size as f64).ln();
    assert!((loss - want).abs() < 1e-5, "{loss} vs {want}");

    // with a real model, targets outside the answer never reach the loss
    let bundle = common::toy_bundle::<f32>(4);
    let mut g = Graph::new();
    let p = Params::bind(&mut g, &bundle.weights, &[]);
    let (logits, asm) = forward_sample(&mut g, &p, &bundle.config, &ex.sample, &[]).unwrap();
    let (targets, mask) = asm.shifted_targets();
    let base = g.masked_cross_entropy(logits, &targets, &mask).unwrap();
    let base = g.value(base).item();
    for i in (0..targets.len()).filter(|&i| !mask[i]) {
        let mut t = targets.clone();
        t[i] = (t[i] + 17) % bundle.config.vocab_size;
        let l = g.masked_cross_entropy(logits, &t, &mask).unwrap();
        assert_eq!(g.value(l).item().to_bits(), base.to_bits(), "position {i}");
    }
}

#[test]
fn stage1_moves_only_the_projector() {
    let dir = tempfile::tempdir().unwrap();
    let records = small_corpus(dir.path(), 1);
    let mut bundle = common::toy_bundle::<f32>(5);
    let plan = quick_plan(1);
    let ex = prepare_examples(&bundle, &select_for_stage(&records, 1), dir.path(), &plan).unwrap();
    assert!(ex.iter().all(|e| e.images.iter().all(|i| matches!(i, ImageInput::Features(_)))));
    let before: Vec<[u8; 32]> = Partition::ALL.iter().map(|&p| bundle.partition_hash(p)).collect();
    let mut opt = AdamW::default();
    for step in 0..3 {
        let batch: Vec<&Example> = ex.iter().skip(step).take(2).collect();
        let m = train_step(&mut bundle, &batch, &mut opt, &plan, 1e-3).unwrap();
        assert!(m.loss.is_finite() && m.grad_norm > 0.0);
    }
    assert_eq!(bundle.partition_hash(Partition::Encoder), before[0]);
    assert_ne!(bundle.partition_hash(Partition::Projector), before[1]);
    assert_eq!(bundle.partition_hash(Partition::Lm), before[2]);
}

#[test]
fn batch_order_does_not_change_the_update() {
    let dir = tempfile::tempdir().unwrap();
    let records = small_corpus(dir.path(), 2);
    let plan = quick_plan(2);
    let base = common::toy_bundle::<f32>(6);
    let ex = prepare_examples(&base, &records[..4], dir.path(), &plan).unwrap();
    let run = |order: &[usize]| {
        let mut b = base.clone();
        let batch: Vec<&Example> = order.iter().map(|&i| &ex[i]).collect();
        let m = train_step(&mut b, &batch, &mut AdamW::default(), &plan, 1e-3).unwrap();
        (b, m)
    };
    let (a, ma) = run(&[0, 1, 2, 3]);
    let (b, mb) = run(&[3, 1, 0, 2]);
    assert_eq!(ma.loss.to_bits(), mb.loss.to_bits());
    for (name, t) in &a.weights {
        assert!(t.bit_eq(&b.weights[name]), "{name}");
    }
}

#[test]
fn non_finite_loss_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let records = small_corpus(dir.path(), 3);
    let plan = quick_plan(2);
    let mut bundle = common::toy_bundle::<f32>(7);
    let ex = prepare_examples(&bundle, &records[..2], dir.path(), &plan).unwrap();
    bundle.weights.get_mut("lm.ln_f.g").unwrap().data_mut()[0] = f32::NAN;
    let batch: Vec<&Example> = ex.iter().collect();
    let err = train_step(&mut bundle, &batch, &mut AdamW::default(), &plan, 1e-3).unwrap_err();
    assert!(matches!(err, Error::Training(_)), "{err}");
}

#[test]
fn overlong_records_skip_or_fail() {
    let dir = tempfile::tempdir().unwrap();
    let records = small_corpus(dir.path(), 4);
    let mut bundle = common::toy_bundle::<f32>(8);
    bundle.config.ctx_limit = 40;
    let plan = quick_plan(2);
    let kept = prepare_examples(&bundle, &records, dir.path(), &plan).unwrap();
    assert!(kept.len() < records.len());
    let strict = TrainPlan {
        overflow: Overflow::Error,
        ..plan
    };
    assert!(matches!(prepare_examples(&bundle, &records, dir.path(), &strict), Err(Error::Dataset(_))));
}

#[test]
fn stage_selection() {
    let dir = tempfile::tempdir().unwrap();
    let records = small_corpus(dir.path(), 5);
    let s1 = select_for_stage(&records, 1);
    assert_eq!(s1.len(), 4);
    assert!(s1.iter().all(|r| r.category == Category::Description));
    assert_eq!(select_for_stage(&records, 2).len(), records.len());
}

fn read_log(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join(LOSS_FILE)).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn stage_run_logs_and_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let records = small_corpus(dir.path(), 6);
    let plan = TrainPlan {
        batch_size: 2,
        accumulation: 1,
        epochs: 2,
        checkpoint_every: 2,
        ..TrainPlan::toy_stage2()
    };
    let base = common::toy_bundle::<f32>(9);
    let ex = prepare_examples(&base, &records[..6], dir.path(), &plan).unwrap();
    assert!(matches!(
        run_stage(&mut base.clone(), &[], &plan, &RunOptions::default()),
        Err(Error::Training(_))
    ));

    let full_dir = dir.path().join("full");
    let mut full = base.clone();
    let report = run_stage(
        &mut full,
        &ex,
        &plan,
        &RunOptions {
            out_dir: full_dir.clone(),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(report.total_updates, 6);
    assert_eq!(report.history.len(), 6);
    let log = read_log(&full_dir);
    assert_eq!(log[0], "step,loss,lr");
    assert_eq!(log.len(), 7);
    let loaded = ModelBundle::<f32>::load(&report.checkpoint).unwrap();
    for (n, t) in &full.weights {
        assert!(t.bit_eq(&loaded.weights[n]));
    }

    // interrupted after 4 updates, then resumed from the saved state
    let part_dir = dir.path().join("part");
    let opts = RunOptions {
        out_dir: part_dir.clone(),
        resume: false,
        stop_after: Some(4),
    };
    let mut part = base.clone();
    let first = run_stage(&mut part, &ex, &plan, &opts).unwrap();
    assert_eq!(first.completed, 4);
    let mut resumed = common::toy_bundle::<f32>(99);
    let second = run_stage(
        &mut resumed,
        &ex,
        &plan,
        &RunOptions {
            resume: true,
            stop_after: None,
            ..opts
        },
    )
    .unwrap();
    assert_eq!(second.history.first().map(|h| h.0), Some(4));
    for (n, t) in &full.weights {
        assert!(t.bit_eq(&resumed.weights[n]), "{n}");
    }
    assert_eq!(read_log(&part_dir), log);
}
