//! Episodic cross-environment training.
//!
//! Every step draws a batch of environments with replacement, resamples a
//! context/target split for each, and takes one Adam step on the mean episode
//! loss. Episode gradients are computed in parallel but summed in batch order,
//! so results do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::dataset::{split_episode, split_episode_with, Episode, MeasurementSet};
use crate::error::{invalid, Error, Result};
use crate::model::{episode_loss, episode_loss_and_grad, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_episodes: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Cosine decay after warmup down to this fraction of `learning_rate`
    /// at the last step; `1` keeps the rate constant.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub context_min: usize,
    pub context_max: usize,
    /// Targets per episode, sampled from the complement of the context.
    pub max_targets: usize,
    /// Steps between checkpoint callbacks; `0` disables them.
    pub checkpoint_every: usize,
    /// Steps between validation passes; `0` disables them.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_episodes: 4,
            learning_rate: 3e-4,
            warmup_steps: 500,
            final_lr_fraction: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            context_min: 4,
            context_max: 256,
            max_targets: 32,
            checkpoint_every: 0,
            validate_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_episodes == 0 || self.max_targets == 0 {
            return Err(invalid("steps, batch_episodes and max_targets must be positive"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(invalid("learning rate must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(invalid("final_lr_fraction must lie in [0, 1]"));
        }
        if self.context_min == 0 || self.context_min > self.context_max {
            return Err(invalid(format!("bad context range [{}, {}]", self.context_min, self.context_max)));
        }
        Ok(())
    }

    /// Linear warmup to `learning_rate`, then cosine decay towards
    /// `final_lr_fraction * learning_rate`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps + 1).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let f = self.final_lr_fraction;
        self.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// First- and second-moment estimates for every parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.tensors.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
                v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Sum of per-episode gradients in episode order, plus the mean loss.
pub fn batch_loss_and_grad(params: &ModelParams, episodes: &[Episode]) -> Result<(f64, Vec<Tensor>)> {
    let per_episode: Vec<Result<(f64, Vec<Tensor>)>> = episodes.par_iter().map(|ep| episode_loss_and_grad(params, ep)).collect();
    let mut total = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for r in per_episode {
        let (l, g) = r?;
        total += l;
        match &mut sum {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            None => sum = Some(g),
        }
    }
    let sum = sum.ok_or_else(|| invalid("empty batch"))?;
    Ok((total / episodes.len() as f64, sum))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
}

/// Fixed-split validation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationConfig {
    pub context_size: usize,
    pub max_targets: usize,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig { context_size: 100, max_targets: 32, seed: 7 }
    }
}

/// The episodes [`validate`] scores, one per held-out environment.
pub fn validation_episodes(held_out: &[MeasurementSet], config: &ValidationConfig) -> Result<Vec<Episode>> {
    held_out
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let ctx = config.context_size.min(set.len().saturating_sub(1)).max(1);
            split_episode(set, config.seed.wrapping_add(i as u64), ctx, Some(config.max_targets))
        })
        .collect()
}

/// Mean episode loss over held-out environments with seed-fixed splits.
pub fn validate(params: &ModelParams, held_out: &[MeasurementSet], config: &ValidationConfig) -> Result<f64> {
    if held_out.is_empty() {
        return Err(invalid("validation needs at least one held-out environment"));
    }
    let episodes = validation_episodes(held_out, config)?;
    let losses: Vec<Result<f64>> = episodes.par_iter().map(|ep| episode_loss(params, ep)).collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / episodes.len() as f64)
}

/// Draws the episodes of one training step.
pub fn sample_batch<R: Rng + ?Sized>(rng: &mut R, envs: &[MeasurementSet], config: &TrainConfig) -> Result<Vec<Episode>> {
    (0..config.batch_episodes)
        .map(|_| {
            let set = &envs[rng.gen_range(0..envs.len())];
            if set.len() < 2 {
                return Err(invalid(format!("environment {} has fewer than 2 measurements", set.env_id)));
            }
            let hi = config.context_max.min(set.len() - 1);
            let lo = config.context_min.min(hi);
            let m = rng.gen_range(lo..=hi);
            split_episode_with(set, rng, m, Some(config.max_targets))
        })
        .collect()
}

/// Hooks called during [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _row: &TraceRow) {}
    fn on_checkpoint(&mut self, _step: usize, _params: &ModelParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub fn train(
    mut params: ModelParams,
    envs: &[MeasurementSet],
    held_out: &[MeasurementSet],
    config: &TrainConfig,
    validation: &ValidationConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if envs.is_empty() {
        return Err(invalid("training needs at least one environment"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&params);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sample_batch(&mut rng, envs, config)?;
        let (loss, mut grads) = batch_loss_and_grad(&params, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            observer.on_checkpoint(step, &params)?;
            return Err(Error::NonFiniteLoss { step });
        }
        let inv = 1.0 / batch.len() as f64;
        let norm = global_norm(&grads) * inv;
        let clip = if config.grad_clip > 0.0 && norm > config.grad_clip { config.grad_clip / norm } else { 1.0 };
        grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|x| *x *= inv * clip));
        adam.step(&mut params, &grads, config.learning_rate_at(step), config);

        let last = step + 1 == config.steps;
        let val_loss = if !held_out.is_empty() && ((config.validate_every > 0 && (step + 1) % config.validate_every == 0) || last) {
            Some(validate(&params, held_out, validation)?)
        } else {
            None
        };
        let row = TraceRow { step, train_loss: loss, val_loss };
        observer.on_step(&row);
        trace.push(row);
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            observer.on_checkpoint(step + 1, &params)?;
        }
    }
    Ok(TrainOutcome { params, trace })
}

/// Loss trace as CSV with columns `step,train_loss,val_loss`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,train_loss,val_loss\n");
    for r in trace {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.step, r.train_loss, val));
    }
    out
}
