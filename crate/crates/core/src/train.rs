//! Minibatch training with Adam, inverse-square-root warmup and global-norm
//! gradient clipping.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, Tape, Tensor};
use crate::config::{AttentionContext, OptimizerConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::features::spec_augment;
use crate::model::Transducer;

/// One training utterance with prepared (normalized) features.
#[derive(Clone, Debug)]
pub struct Example {
    pub features: Tensor,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Learning rate for 1-based step `s`: linear warmup to `peak` over
/// `warmup` steps, then `peak·sqrt(warmup/s)`.
pub fn learning_rate(cfg: &OptimizerConfig, s: usize) -> f64 {
    let s = s.max(1) as f64;
    let w = cfg.warmup_steps.max(1) as f64;
    cfg.peak_lr * (s / w).min((w / s).sqrt())
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimizerConfig,
    step: usize,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update and returns the learning rate used.
    pub fn update(&mut self, model: &mut Transducer, grads: &BTreeMap<String, Vec<f64>>) -> Result<f64> {
        self.step += 1;
        let lr = learning_rate(&self.cfg, self.step);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, g) in grads {
            let p = model
                .params
                .get_mut(name)
                .ok_or_else(|| Error::contract("adam", format!("gradient for unknown parameter {name}")))?;
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut mo.m).zip(&mut mo.v) {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let delta = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = (*w as f64 - delta) as f32;
            }
        }
        Ok(lr)
    }
}

pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Owns the model, optimizer and random stream for a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Transducer,
    pub cfg: TrainConfig,
    optimizer: Adam,
    rng: ChaCha8Rng,
    contexts: Vec<AttentionContext>,
}

impl Trainer {
    pub fn new(model: Transducer, cfg: TrainConfig) -> Result<Self> {
        let contexts = model.trained_contexts()?;
        Ok(Self {
            optimizer: Adam::new(cfg.optimizer.clone()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00),
            model,
            cfg,
            contexts,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.optimizer.steps_taken()
    }

    /// Mean loss and its gradient over `batch`, without updating.
    /// Examples run in parallel on the current rayon pool; randomness is
    /// drawn up front and gradients are summed in batch order, so the result
    /// does not depend on the thread count.
    pub fn batch_gradients(&mut self, batch: &[Example]) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty training batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let inputs: Vec<(Tensor, u64)> = batch
            .iter()
            .map(|ex| {
                let feats = match &self.cfg.augment {
                    Some(policy) => spec_augment(&ex.features, policy, &mut self.rng),
                    None => ex.features.clone(),
                };
                (feats, self.rng.gen())
            })
            .collect();
        let (model, contexts) = (&self.model, &self.contexts);
        let per_example: Vec<Result<(f64, BTreeMap<String, Vec<f64>>)>> = inputs
            .into_par_iter()
            .zip(batch.par_iter())
            .map(|((feats, seed), ex)| {
                let tape = Tape::training(seed);
                let binder = Binder::new(&tape, &model.params);
                let loss = model.loss_graph(&binder, tape.constant(feats), &ex.tokens, contexts)?;
                let value = loss.value().item();
                if !value.is_finite() {
                    return Err(Error::NonFinite { op: "train_step" });
                }
                tape.backward(loss.scale(scale)?)?;
                Ok((value, binder.grads()))
            })
            .collect();
        let mut total = 0.0;
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for item in per_example {
            let (value, g) = item?;
            total += value * scale;
            for (name, g) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        Ok((total, grads))
    }

    /// Forward, backward, clip and update. A non-finite loss or gradient
    /// aborts the step and leaves the parameters untouched.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<StepMetrics> {
        let (loss, mut grads) = self.batch_gradients(batch)?;
        let grad_norm = clip_global_norm(&mut grads, self.cfg.optimizer.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "train_step" });
        }
        let lr = self.optimizer.update(&mut self.model, &grads)?;
        Ok(StepMetrics {
            step: self.optimizer.steps_taken(),
            loss,
            grad_norm,
            lr,
        })
    }

    /// Draws a batch of `batch_size` examples uniformly from `data`.
    pub fn sample_batch<'a>(&mut self, data: &'a [Example]) -> Vec<&'a Example> {
        (0..self.cfg.batch_size.min(data.len().max(1)))
            .map(|_| &data[self.rng.gen_range(0..data.len())])
            .collect()
    }

    /// Runs `cfg.steps` steps over random batches, reporting each step.
    pub fn fit(&mut self, data: &[Example], mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        if data.is_empty() {
            return Err(Error::Input("no training data".into()));
        }
        let mut trace = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let batch: Vec<Example> = self.sample_batch(data).into_iter().cloned().collect();
            let m = self.train_step(&batch)?;
            on_step(&m);
            trace.push(m);
        }
        Ok(trace)
    }
}
