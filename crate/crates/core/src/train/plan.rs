use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Partition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
}

/// What to do with a record whose expanded sequence exceeds the context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overflow {
    Skip,
    Error,
}

/// Optimization recipe for one training stage.
///
/// `batch_size` samples form a micro-batch; `accumulation` micro-batches
/// form one optimizer update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage: u8,
    pub trainable: Vec<Partition>,
    pub batch_size: usize,
    pub accumulation: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Save a resumable checkpoint every this many updates (0 = only at the end).
    pub checkpoint_every: usize,
    pub overflow: Overflow,
}

impl TrainPlan {
    /// Projector-only caption pretraining.
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            trainable: vec![Partition::Projector],
            batch_size: 128,
            accumulation: 1,
            peak_lr: 1e-3,
            warmup_ratio: 0.03,
            schedule: Schedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            epochs: 1,
            seed: 0,
            checkpoint_every: 0,
            overflow: Overflow::Skip,
        }
    }

    /// End-to-end instruction finetuning of projector and LM.
    pub fn stage2() -> Self {
        Self {
            stage: 2,
            trainable: vec![Partition::Projector, Partition::Lm],
            batch_size: 64,
            accumulation: 2,
            peak_lr: 2e-5,
            ..Self::stage1()
        }
    }

    /// Desk-scale stage 1: same schedule shape, smaller batches, more passes.
    pub fn toy_stage1() -> Self {
        Self {
            batch_size: 8,
            epochs: 3,
            ..Self::stage1()
        }
    }

    /// Desk-scale stage 2. A randomly initialized toy LM needs a far larger
    /// step size than finetuning a pretrained one.
    pub fn toy_stage2() -> Self {
        Self {
            batch_size: 8,
            accumulation: 2,
            peak_lr: 1e-3,
            epochs: 5,
            ..Self::stage2()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "stage1" => Ok(Self::stage1()),
            "stage2" => Ok(Self::stage2()),
            "toy_stage1" => Ok(Self::toy_stage1()),
            "toy_stage2" => Ok(Self::toy_stage2()),
            other => Err(Error::Config(format!("unknown training preset {other:?}"))),
        }
    }

    /// Also train the vision encoder (off by default in both stages).
    pub fn with_encoder(mut self, on: bool) -> Self {
        self.trainable.retain(|&p| p != Partition::Encoder);
        if on {
            self.trainable.push(Partition::Encoder);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training plan: {m}")));
        if !matches!(self.stage, 1 | 2) {
            return bad("stage must be 1 or 2");
        }
        if self.trainable.is_empty() {
            return bad("nothing to train");
        }
        if self.batch_size == 0 || self.accumulation == 0 || self.epochs == 0 {
            return bad("batch size, accumulation and epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup ratio must lie in [0, 1]");
        }
        if !(self.peak_lr > 0.0 && self.clip_norm > 0.0 && self.eps > 0.0) {
            return bad("learning rate, clip norm and eps must be positive");
        }
        Ok(())
    }

    pub fn samples_per_update(&self) -> usize {
        self.batch_size * self.accumulation
    }

    pub fn updates_per_epoch(&self, records: usize) -> usize {
        records.div_ceil(self.samples_per_update())
    }

    pub fn total_updates(&self, records: usize) -> usize {
        self.epochs * self.updates_per_epoch(records)
    }

    pub fn warmup_updates(&self, total: usize) -> usize {
        (total as f64 * self.warmup_ratio).ceil() as usize
    }

    /// Learning rate of update `step` out of `total`: linear from 0 to the
    /// peak over the warmup updates, then half-cosine down to 0 at `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> Result<f64> {
        if total == 0 {
            return Err(Error::Training("learning-rate schedule over zero steps".into()));
        }
        let warm = self.warmup_updates(total);
        if step >= total {
            return Ok(0.0);
        }
        if step < warm {
            return Ok(self.peak_lr * step as f64 / warm as f64);
        }
        let progress = (step - warm) as f64 / (total - warm) as f64;
        Ok(self.peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}
