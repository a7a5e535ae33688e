//! Training of the fusion tensors on top of the frozen base model.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GridVqaSample, Vocab};
use crate::error::{Error, Result};
use crate::fusion::{FusionGrads, FusionParams};
use crate::model::{answer_loss, argmax, backward, Model, SampleInput, Trace};
use crate::prompt::{build_prompt, MultiscalePrompt, PromptSpec, SyntheticEncoder};
use crate::tensor::{Scalar, Tensor};

/// Peak learning rate of the cosine schedule.
pub const BASE_LR: Scalar = 9e-3;

/// `lr0 · ½(1 + cos(π·t/T))`
pub fn cosine_lr(lr0: Scalar, step: usize, total: usize) -> Scalar {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as Scalar / total as Scalar;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball momentum.
    Sgd { momentum: Scalar },
    Adam { beta1: Scalar, beta2: Scalar, eps: Scalar },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: Scalar,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            lr: BASE_LR,
            optimizer: OptimizerKind::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        Ok(())
    }
}

struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, params: &FusionParams) -> Self {
        let zeros = || params.tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Optimizer {
            kind,
            first: zeros(),
            second: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut FusionParams, grads: &FusionGrads, lr: Scalar) {
        self.t += 1;
        for (i, ((_, p), (_, g))) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
            let p = p.data_mut();
            let g = g.data();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let v = self.first[i].data_mut();
                    for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Frozen encoder plus prompt construction, shared by training and
/// evaluation.
#[derive(Debug, Clone)]
pub struct VisionPipeline {
    pub encoder: SyntheticEncoder,
    pub spec: PromptSpec,
}

/// Encoder output for one image, ready for the model.
#[derive(Debug, Clone)]
pub struct EncodedImage {
    pub prompt: MultiscalePrompt,
    pub cls: Tensor,
}

impl VisionPipeline {
    pub fn new(colors: usize, d_vis: usize, spec: PromptSpec, seed: u64) -> Result<Self> {
        Ok(VisionPipeline {
            encoder: SyntheticEncoder::new(colors, d_vis, seed)?,
            spec,
        })
    }

    pub fn encode(&self, image: &[u8]) -> Result<EncodedImage> {
        let out = self.encoder.encode_indices(image)?;
        Ok(EncodedImage {
            prompt: build_prompt(&out, &self.spec)?,
            cls: out.cls,
        })
    }
}

/// Runs one sample through the model.
pub fn forward_sample(
    model: &Model,
    vision: &VisionPipeline,
    vocab: &Vocab,
    sample: &GridVqaSample,
    fused: bool,
) -> Result<(EncodedImage, Trace)> {
    let img = vision.encode(&sample.image)?;
    let tokens = sample.question(vocab);
    let input = SampleInput {
        tokens: &tokens,
        visual: &img.prompt.features,
        cls: &img.cls,
    };
    let trace = if fused {
        model.forward(&input)?
    } else {
        model.forward_baseline(&input)?
    };
    Ok((img, trace))
}

pub fn predict(trace: &Trace, sample: &GridVqaSample) -> usize {
    argmax(trace.logits.row(sample.answer_position()))
}

/// Greedy accuracy over `samples`.
pub fn evaluate(model: &Model, vision: &VisionPipeline, vocab: &Vocab, samples: &[GridVqaSample]) -> Result<Scalar> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in samples {
        let (_, trace) = forward_sample(model, vision, vocab, s, true)?;
        hits += (predict(&trace, s) == vocab.color(s.answer)) as usize;
    }
    Ok(hits as Scalar / samples.len() as Scalar)
}

/// Mean loss and summed gradients of one batch.
pub fn batch_gradient(
    model: &Model,
    vision: &VisionPipeline,
    vocab: &Vocab,
    batch: &[&GridVqaSample],
) -> Result<(Scalar, FusionGrads)> {
    let mut grads = FusionGrads::zeros_like(&model.fusion);
    let mut loss = 0.0;
    for s in batch {
        let (_, trace) = forward_sample(model, vision, vocab, s, true)?;
        let (l, d_logits) = answer_loss(&trace.logits, &[(s.answer_position(), vocab.color(s.answer))])?;
        loss += l;
        grads.add_assign(&backward(&model.base, &model.fusion, &trace, &d_logits)?)?;
    }
    let inv = 1.0 / batch.len().max(1) as Scalar;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub losses: Vec<Scalar>,
    pub final_lr: Scalar,
}

impl TrainMetrics {
    /// Mean loss over the first and last tenth of the run.
    pub fn loss_ends(&self) -> (Scalar, Scalar) {
        let n = self.losses.len();
        let w = (n / 10).max(1).min(n);
        let mean = |s: &[Scalar]| s.iter().sum::<Scalar>() / s.len().max(1) as Scalar;
        (mean(&self.losses[..w]), mean(&self.losses[n - w..]))
    }
}

/// Trains `model.fusion` in place. The base weights are only read.
///
/// Batches are drawn by reshuffling the training set every epoch with a
/// generator seeded from `seed`.
pub fn train(
    model: &mut Model,
    vision: &VisionPipeline,
    vocab: &Vocab,
    samples: &[GridVqaSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainMetrics> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut opt = Optimizer::new(cfg.optimizer, &model.fusion);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut lr = cfg.lr;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_gradient(model, vision, vocab, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        lr = cosine_lr(cfg.lr, step, cfg.steps);
        opt.step(&mut model.fusion, &grads, lr);
        if step % 100 == 0 {
            log::debug!("step {step} loss {loss:.4} lr {lr:.2e}");
        }
    }
    Ok(TrainMetrics { losses, final_lr: lr })
}
