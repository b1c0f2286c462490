//! SGD with momentum over the segmentation cross-entropy.

use std::time::Instant;

use cstf_core::codec::{self, ModelConfig};
use cstf_core::{Bound, ParamSet, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{OptimizerConfig, RunConfig};
use crate::data::SyntheticScene;
use crate::error::{HarnessError, Result};

/// Heavy-ball SGD state: `v ← μ·v + g`, `θ ← θ − η·v`.
pub struct Sgd<T> {
    learning_rate: T,
    momentum: T,
    clip_norm: Option<f64>,
    velocity: Vec<(String, Vec<T>)>,
}

impl<T: Real> Sgd<T> {
    pub fn new(opt: &OptimizerConfig) -> Self {
        Self {
            learning_rate: T::lit(opt.learning_rate),
            momentum: T::lit(opt.momentum),
            clip_norm: opt.clip_norm,
            velocity: Vec::new(),
        }
    }

    /// One update from the gradients of `loss`; returns the loss value.
    pub fn step(&mut self, params: &mut ParamSet<T>, loss_fn: impl FnOnce(&mut Tape<T>, &Bound) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let loss = loss_fn(&mut tape, &bound)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Ok(value);
        }
        tape.backward(loss)?;
        if self.learning_rate == T::zero() {
            return Ok(value);
        }
        let grads = bound.grads(&tape);
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
            .sum::<f64>()
            .sqrt();
        let factor = match self.clip_norm {
            Some(c) if norm > c => T::lit(c / norm),
            _ => T::one(),
        };
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(k, t)| (k.clone(), vec![T::zero(); t.numel()])).collect();
        }
        for ((name, p), (vname, v)) in params.iter_mut().zip(self.velocity.iter_mut()) {
            debug_assert_eq!(name, vname);
            let Some(g) = grads.get(name) else { continue };
            for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + factor * gi;
                *pi -= self.learning_rate * *vi;
            }
        }
        Ok(value)
    }
}

/// A scene prepared for one element type: image tensor plus per-pixel class targets.
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub targets: Vec<usize>,
}

pub fn prepare<T: Real>(scenes: &[SyntheticScene]) -> Vec<Sample<T>> {
    scenes.iter().map(|s| Sample { image: s.image_as(), targets: s.mask() }).collect()
}

fn batch_loss<T: Real>(tape: &mut Tape<T>, bound: &Bound, model: &ModelConfig, batch: &[&Sample<T>]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for s in batch {
        let x = tape.constant(s.image.clone());
        let out = codec::model_forward(tape, x, bound, model)?;
        let ce = tape.cross_entropy(out.logits, &s.targets)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.ok_or_else(|| HarnessError::Contract("empty batch".into()))?;
    Ok(tape.scale(total, T::lit(1.0 / batch.len() as f64)))
}

/// Mean cross-entropy over `samples` without gradient bookkeeping.
pub fn dataset_loss<T: Real>(params: &ParamSet<T>, model: &ModelConfig, samples: &[Sample<T>]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let loss = batch_loss(&mut tape, &bound, model, &[s])?;
        total += tape.value(loss).data()[0].as_f64();
    }
    Ok(total / samples.len() as f64)
}

/// Per-pixel class probabilities `K×H×W` for one image.
pub fn predict<T: Real>(params: &ParamSet<T>, model: &ModelConfig, image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(image.clone());
    let out = codec::model_forward(&mut tape, x, &bound, model)?;
    Ok(tape.value(out.probs).clone())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ParamSet<T>,
    /// Minibatch loss of every step taken.
    pub losses: Vec<f64>,
    /// Full training-set loss after the last step.
    pub final_loss: f64,
    pub seconds: f64,
}

impl<T> TrainOutcome<T> {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }
}

/// Trains a freshly initialized model on `scenes`.
///
/// Steps visit the scenes in a seeded shuffled order, `batch_size` at a time.
/// With a target loss set, training stops once the running mean over the last
/// pass falls below it and a full evaluation confirms.
pub fn train<T: Real>(cfg: &RunConfig, scenes: &[SyntheticScene]) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(HarnessError::Contract("no training scenes".into()));
    }
    let params = cfg.model.init_params::<T>(cfg.seed)?;
    train_from(params, cfg.seed, &cfg.model, &cfg.optimizer, scenes)
}

pub fn train_from<T: Real>(
    mut params: ParamSet<T>,
    seed: u64,
    model: &ModelConfig,
    opt: &OptimizerConfig,
    scenes: &[SyntheticScene],
) -> Result<TrainOutcome<T>> {
    let start = Instant::now();
    let samples = prepare::<T>(scenes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5a_e9);
    let mut order: Vec<usize> = Vec::new();
    let mut sgd = Sgd::new(opt);
    let window = samples.len().div_ceil(opt.batch_size);
    let mut losses = Vec::with_capacity(opt.steps);
    let mut confirmed = None;
    for step in 0..opt.steps {
        let batch: Vec<&Sample<T>> = (0..opt.batch_size.min(samples.len()))
            .map(|_| {
                if order.is_empty() {
                    order = (0..samples.len()).collect();
                    order.shuffle(&mut rng);
                }
                &samples[order.pop().expect("refilled")]
            })
            .collect();
        let loss = sgd.step(&mut params, |tape, bound| batch_loss(tape, bound, model, &batch))?;
        if !loss.is_finite() {
            return Err(HarnessError::Diverged { step, loss });
        }
        log::trace!("step {step} loss {loss:.6}");
        losses.push(loss);
        if let Some(target) = opt.target_loss {
            if losses.len() >= window {
                let recent = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
                if recent < target {
                    let full = dataset_loss(&params, model, &samples)?;
                    if full < target {
                        confirmed = Some(full);
                        break;
                    }
                }
            }
        }
    }
    let final_loss = match confirmed {
        Some(l) => l,
        None => dataset_loss(&params, model, &samples)?,
    };
    Ok(TrainOutcome { params, losses, final_loss, seconds: start.elapsed().as_secs_f64() })
}
