//! Outer-loop training: learning-rate schedule, AdamW and the training loop
//! over either objective.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{FlopCounter, Tensor};
use crate::config::KvMap;
use crate::data::PackedSequence;
use crate::error::{Error, Result};
use crate::model::{Model, ParamSet};
use crate::ttt::{loss_and_grad, Objective, TttConfig};

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 20.0;

/// Derives an independent seed for a named sub-stream of `root`.
pub fn split_seed(root: u64, stream: &str) -> u64 {
    // FNV-1a over the stream name, mixed with the root by splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRecipe {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub min_lr: f64,
    pub batch_tokens: usize,
    pub total_tokens: usize,
    pub seed: u64,
    pub objective: Objective,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Recompute inner-step activations during the backward sweep.
    pub checkpoint: bool,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            warmup_fraction: 0.1,
            min_lr: 1e-5,
            batch_tokens: 1024,
            total_tokens: 1024 * 100,
            seed: 0,
            objective: Objective::Naive,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            checkpoint: true,
        }
    }
}

const RECIPE_KEYS: [&str; 13] = [
    "peak_lr",
    "warmup_fraction",
    "min_lr",
    "batch_tokens",
    "total_tokens",
    "seed",
    "objective",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "clip_norm",
    "checkpoint",
];

impl TrainRecipe {
    pub fn steps(&self) -> usize {
        self.total_tokens
            .checked_div(self.batch_tokens)
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        if !self.total_tokens.is_multiple_of(self.batch_tokens) {
            return Err(Error::Config(format!(
                "total_tokens {} is not a multiple of batch_tokens {}",
                self.total_tokens, self.batch_tokens
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.peak_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::Config(format!(
                "need 0 <= min_lr <= peak_lr, 0 < peak_lr; got {} / {}",
                self.min_lr, self.peak_lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.clip_norm <= 0.0 || self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return Err(Error::Config(
                "clip_norm and adam_eps must be positive, weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Fine-tuning recipe: same optimizer, restarted schedule, and 5% of
    /// this recipe's token budget rounded down to whole batches of
    /// `batch_tokens`.
    pub fn finetune(&self, batch_tokens: usize) -> Self {
        let budget = self.total_tokens / 20;
        Self {
            batch_tokens,
            total_tokens: budget - budget % batch_tokens.max(1),
            ..self.clone()
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("peak_lr", self.peak_lr);
        kv.set("warmup_fraction", self.warmup_fraction);
        kv.set("min_lr", self.min_lr);
        kv.set("batch_tokens", self.batch_tokens);
        kv.set("total_tokens", self.total_tokens);
        kv.set("seed", self.seed);
        kv.set("objective", self.objective);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("weight_decay", self.weight_decay);
        kv.set("clip_norm", self.clip_norm);
        kv.set("checkpoint", self.checkpoint);
        kv
    }

    pub fn from_kv(kv: &KvMap, base: &TrainRecipe) -> Result<Self> {
        kv.reject_unknown(&RECIPE_KEYS)?;
        let mut r = base.clone();
        kv.read_into("peak_lr", &mut r.peak_lr)?;
        kv.read_into("warmup_fraction", &mut r.warmup_fraction)?;
        kv.read_into("min_lr", &mut r.min_lr)?;
        kv.read_into("batch_tokens", &mut r.batch_tokens)?;
        kv.read_into("total_tokens", &mut r.total_tokens)?;
        kv.read_into("seed", &mut r.seed)?;
        kv.read_into("objective", &mut r.objective)?;
        kv.read_into("beta1", &mut r.beta1)?;
        kv.read_into("beta2", &mut r.beta2)?;
        kv.read_into("adam_eps", &mut r.adam_eps)?;
        kv.read_into("weight_decay", &mut r.weight_decay)?;
        kv.read_into("clip_norm", &mut r.clip_norm)?;
        kv.read_into("checkpoint", &mut r.checkpoint)?;
        Ok(r)
    }
}

/// Linear warmup from 0 over the first `warmup_fraction` of steps, then
/// cosine decay from `peak_lr` to `min_lr`.
pub fn lr_at(step: usize, recipe: &TrainRecipe) -> Result<f64> {
    let steps = recipe.steps();
    if step >= steps {
        return Err(Error::Index(format!(
            "step {step} outside schedule of {steps} steps"
        )));
    }
    let warm = recipe.warmup_fraction * steps as f64;
    let s = step as f64;
    if s < warm {
        return Ok(recipe.peak_lr * s / warm);
    }
    let progress = (s - warm) / (steps as f64 - warm);
    let cos = (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0;
    Ok(recipe.min_lr + (recipe.peak_lr - recipe.min_lr) * cos)
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// AdamW with decoupled weight decay applied to matrices only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || {
            (0..params.len())
                .map(|i| vec![0.0; params.tensor(i).len()])
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn for_recipe(params: &ParamSet, r: &TrainRecipe) -> Self {
        Self::new(params, r.beta1, r.beta2, r.adam_eps, r.weight_decay)
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let mut p = params.tensor(i).clone();
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {}",
                    g.shape(),
                    params.name(i)
                )));
            }
            let decay = if p.shape().len() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w *= 1.0 - lr * decay;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            params.set(i, p)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub tokens: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub curve: Vec<CurvePoint>,
    pub flops: FlopCounter,
}

/// Mean loss and gradient over `batch`, accumulated in sequence order.
pub fn batch_gradient(
    model: &Model,
    params: &ParamSet,
    batch: &[&PackedSequence],
    cfg: &TttConfig,
    objective: Objective,
    checkpoint: bool,
) -> Result<(f64, Vec<Tensor>, FlopCounter)> {
    let parts = batch
        .par_iter()
        .map(|s| loss_and_grad(model, params, &s.tokens, cfg, objective, checkpoint))
        .collect::<Result<Vec<_>>>()?;
    let n = parts.len() as f64;
    let mut grads: Vec<Tensor> = (0..params.len())
        .map(|i| Tensor::zeros(params.tensor(i).shape()))
        .collect();
    let mut loss = 0.0;
    let mut flops = FlopCounter::default();
    for p in &parts {
        loss += p.loss;
        flops.merge(&p.flops);
        for (acc, g) in grads.iter_mut().zip(&p.grads) {
            acc.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b);
        }
    }
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok((loss / n, grads, flops))
}

/// Trains `params` on `train` with `recipe`, drawing `batch_tokens / T`
/// sequences per step from a seeded shuffle that is redrawn every epoch.
/// `log` sees every curve point as it is produced.
pub fn optimize(
    model: &Model,
    mut params: ParamSet,
    cfg: &TttConfig,
    recipe: &TrainRecipe,
    train: &[PackedSequence],
    mut log: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    recipe.validate()?;
    model.check_params(&params)?;
    if recipe.objective == Objective::E2e {
        cfg.validate(model)?;
    }
    if recipe.steps() == 0 {
        return Ok(TrainOutcome {
            params,
            curve: Vec::new(),
            flops: FlopCounter::default(),
        });
    }
    let seq_len = train
        .first()
        .map(|s| s.tokens.len() - 1)
        .ok_or_else(|| Error::Data("no training sequences".into()))?;
    if train.iter().any(|s| s.tokens.len() != seq_len + 1) {
        return Err(Error::Data(
            "training sequences have unequal lengths".into(),
        ));
    }
    if !recipe.batch_tokens.is_multiple_of(seq_len) {
        return Err(Error::Config(format!(
            "batch_tokens {} is not a multiple of T={seq_len}",
            recipe.batch_tokens
        )));
    }
    let per_step = recipe.batch_tokens / seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(recipe.seed, "data-order"));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut opt = AdamW::for_recipe(&params, recipe);
    let mut curve = Vec::with_capacity(recipe.steps());
    let mut flops = FlopCounter::default();
    for step in 0..recipe.steps() {
        let mut batch = Vec::with_capacity(per_step);
        while batch.len() < per_step {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let (loss, mut grads, f) = batch_gradient(
            model,
            &params,
            &batch,
            cfg,
            recipe.objective,
            recipe.checkpoint,
        )?;
        flops.merge(&f);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        clip_global_norm(&mut grads, recipe.clip_norm);
        let lr = lr_at(step, recipe)?;
        opt.step(&mut params, &grads, lr)?;
        let point = CurvePoint {
            step,
            tokens: (step + 1) * recipe.batch_tokens,
            lr,
            loss,
        };
        log(&point);
        curve.push(point);
    }
    Ok(TrainOutcome {
        params,
        curve,
        flops,
    })
}

/// Trains from the seeded initialization.
pub fn train_run(
    model: &Model,
    cfg: &TttConfig,
    recipe: &TrainRecipe,
    train: &[PackedSequence],
    log: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    let params = model.init(split_seed(recipe.seed, "init"));
    optimize(model, params, cfg, recipe, train, log)
}

/// Continues training from `params` with a fresh optimizer and schedule,
/// typically at a new context length.
pub fn finetune_run(
    model: &Model,
    params: &ParamSet,
    cfg: &TttConfig,
    recipe: &TrainRecipe,
    train: &[PackedSequence],
    log: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    optimize(model, params.clone(), cfg, recipe, train, log)
}

#[cfg(test)]
mod tests;
