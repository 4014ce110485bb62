//! AdamW training with warmup and a cosine tail, conditioning dropout and
//! validation scoring.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bitcodec::{encode_map, Encoding};
use crate::diffusion::{loss_and_grad, noisy_batch, sample, Denoiser, SamplerConfig};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::metrics::{ari, hungarian_iou};
use crate::nn::{UNet, IMAGE_CHANNELS};
use crate::palette::Palette;
use crate::rng;
use crate::schedule::{LossWeighting, NoiseSchedule, MIN_TRAIN_T};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_iters: u64,
    pub decay_tail_iters: u64,
    pub weight_decay: f64,
    pub cond_drop_prob: f64,
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 16,
            lr_peak: 1e-4,
            warmup_iters: 1000,
            decay_tail_iters: 5000,
            weight_decay: 1e-4,
            cond_drop_prob: 0.05,
            eval_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidArgument(msg));
        if self.iterations == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad(format!("iterations, batch_size and eval_every must be positive: {self:?}"));
        }
        if self.warmup_iters >= self.iterations {
            return bad(format!("warmup_iters {} must be below iterations {}", self.warmup_iters, self.iterations));
        }
        if self.warmup_iters + self.decay_tail_iters > self.iterations {
            return bad(format!(
                "warmup {} plus decay tail {} exceed {} iterations",
                self.warmup_iters, self.decay_tail_iters, self.iterations
            ));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return bad(format!("cond_drop_prob {} outside [0, 1]", self.cond_drop_prob));
        }
        if !(self.lr_peak.is_finite() && self.lr_peak >= 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("lr_peak {} and weight_decay {} must be finite and >= 0", self.lr_peak, self.weight_decay));
        }
        Ok(())
    }
}

/// Learning rate at `iter`: linear warmup from 0, constant, then a half
/// cosine reaching 0 at the last iteration.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    if iter < cfg.warmup_iters {
        return cfg.lr_peak * iter as f64 / cfg.warmup_iters as f64;
    }
    let tail_start = cfg.iterations - cfg.decay_tail_iters;
    if cfg.decay_tail_iters == 0 || iter < tail_start {
        return cfg.lr_peak;
    }
    if cfg.decay_tail_iters == 1 {
        return 0.0;
    }
    let progress = ((iter - tail_start) as f64 / (cfg.decay_tail_iters - 1) as f64).min(1.0);
    0.5 * cfg.lr_peak * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamW {
    pub fn new(len: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - libm::pow(b1, self.step as f64);
        let c2 = 1.0 - libm::pow(b2, self.step as f64);
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        let (lr_f, decay) = (lr as f32, (lr * weight_decay) as f32);
        let (c1, c2, eps) = (c1 as f32, c2 as f32, self.eps as f32);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1f * *m + (1.0 - b1f) * g;
            *v = b2f * *v + (1.0 - b2f) * g * g;
            let update = (*m / c1) / (libm::sqrtf(*v / c2) + eps);
            *p = *p - decay * *p - lr_f * update;
        }
        Ok(())
    }
}

/// Image and target encoding of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor<f32>,
    pub target: Tensor<f32>,
}

impl Example {
    /// Remaps the entity map through the palette and encodes it.
    pub fn new(image: Tensor<f32>, entities: &LabelMap, palette: &Palette, encoding: &Encoding) -> Result<Self> {
        let classes = palette.remap(entities)?;
        let target = encode_map(&classes, encoding)?;
        image.ensure_shape([1, IMAGE_CHANNELS, entities.height(), entities.width()])?;
        Ok(Self { image, target })
    }
}

/// Per-example draws for one iteration, keyed by `(seed, iter, index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub t: f64,
    pub eps: Vec<f32>,
    pub drop_image: bool,
}

pub fn draw(seed: u64, iter: u64, index: usize, len: usize, cond_drop_prob: f64) -> Draw {
    let mut r = rng::keyed(seed, iter, index as u64);
    let t = MIN_TRAIN_T + (1.0 - MIN_TRAIN_T) * r.random::<f64>();
    let drop_image = r.random::<f64>() < cond_drop_prob;
    let mut eps = vec![0.0; len];
    rng::fill_normal(&mut r, &mut eps);
    Draw { t, eps, drop_image }
}

/// Dataset indices of the batch at `iter`, drawn with replacement.
pub fn batch_indices(seed: u64, iter: u64, batch: usize, dataset_len: usize) -> Vec<usize> {
    let mut r = rng::keyed(seed, iter, u64::MAX);
    (0..batch).map(|_| r.random_range(0..dataset_len)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    pub dropped: usize,
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub sched: NoiseSchedule,
    pub weighting: LossWeighting,
    pub net: &'a mut UNet<f32>,
    pub opt: &'a mut AdamW,
}

impl Trainer<'_> {
    /// One optimizer update on `batch` at iteration `iter`.
    pub fn step(&mut self, batch: &[&Example], iter: u64) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let len = batch[0].target.item_len();
        let mut images = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut eps = Vec::with_capacity(batch.len());
        let mut t = Vec::with_capacity(batch.len());
        let mut dropped = 0;
        for (i, ex) in batch.iter().enumerate() {
            let d = draw(self.cfg.seed, iter, i, len, self.cfg.cond_drop_prob);
            images.push(if d.drop_image {
                dropped += 1;
                Tensor::zeros(ex.image.shape())
            } else {
                ex.image.clone()
            });
            targets.push(ex.target.clone());
            eps.push(Tensor::from_vec(ex.target.shape(), d.eps)?);
            t.push(d.t);
        }
        let (image, x0, eps) = (Tensor::stack(&images)?, Tensor::stack(&targets)?, Tensor::stack(&eps)?);
        let x_t = noisy_batch(&x0, &eps, &t, &self.sched)?;
        let (pred, trace) = self.net.forward_train(&x_t, &image, &t)?;
        if pred.has_non_finite() {
            return Err(Error::Numeric(format!("non-finite network output at iteration {iter}")));
        }
        let kind = self.net.prediction_type();
        let (loss, dy) = loss_and_grad(&pred, &x0, &x_t, &eps, &t, kind, &self.sched, &self.weighting)?;
        self.net.zero_grad();
        self.net.backward(&trace, &dy);
        if self.net.grads().iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at iteration {iter}")));
        }
        let lr = lr_at(iter, &self.cfg);
        let (params, grads) = self.net.params_and_grads();
        self.opt.update(params, grads, lr, self.cfg.weight_decay)?;
        Ok(StepStats { loss, lr, dropped })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalScores {
    pub ari: Vec<f64>,
    pub iou: Vec<f64>,
}

impl EvalScores {
    pub fn mean_ari(&self) -> f64 {
        mean(&self.ari)
    }

    pub fn mean_iou(&self) -> f64 {
        mean(&self.iou)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Samples one segmentation per image, `chunk` images at a time, and scores
/// it against the entity maps. Sample ids are the item positions.
pub fn evaluate<T: Real, D: Denoiser<T> + ?Sized>(
    net: &D,
    images: &[Tensor<T>],
    entities: &[LabelMap],
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    encoding: &Encoding,
    chunk: usize,
) -> Result<EvalScores> {
    if images.len() != entities.len() {
        return Err(Error::InvalidArgument(format!("{} images for {} entity maps", images.len(), entities.len())));
    }
    let mut scores = EvalScores { ari: Vec::new(), iou: Vec::new() };
    for (start, block) in (0..images.len()).step_by(chunk.max(1)).map(|s| (s, &images[s..(s + chunk.max(1)).min(images.len())])) {
        let batch = Tensor::stack(block)?;
        let ids: Vec<u64> = (start..start + block.len()).map(|i| i as u64).collect();
        let out = sample(net, &batch, &ids, sampler, sched, encoding)?;
        for (k, pred) in out.labels.iter().enumerate() {
            let gt = &entities[start + k];
            scores.ari.push(ari(gt, pred)?);
            scores.iou.push(hungarian_iou(gt, pred)?.mean_iou);
        }
    }
    Ok(scores)
}
