//! Adam training for the noise predictor.
//!
//! Each step draws graphs from the dataset with replacement, renoises them
//! at a uniformly random diffusion step, and averages exact gradients over
//! the batch. The learning rate decays by a fixed factor on an epoch
//! schedule. All randomness comes from one counter-based generator seeded
//! from the config, so a run can be stopped, checkpointed, and resumed with
//! bitwise-identical results.

use super::DenoiserModel;
use crate::diffusion::{forward_noise, DiffusionSchedule};
use crate::graph::TroGraph;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// How often a renoise draw is retried when the noisy pose set lands inside
/// the singular band of the rotation log.
const RENOISE_ATTEMPTS: usize = 8;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight on the position columns of the noise loss.
    pub gamma_p: f64,
    /// Weight on the rotation columns of the noise loss.
    pub gamma_r: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// Multiplier applied to the learning rate every `lr_decay_epochs`.
    pub lr_decay: f64,
    pub lr_decay_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma_p: 1.0,
            gamma_r: 1.0,
            epochs: 40,
            batch: 4,
            lr: 1e-3,
            lr_decay: 0.8,
            lr_decay_epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_p < 0.0 || self.gamma_r < 0.0 || self.gamma_p + self.gamma_r == 0.0 {
            return Err(Error::invalid(
                "loss weights must be non-negative and not both zero",
            ));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_epochs == 0 {
            return Err(Error::invalid(
                "decay factor must lie in (0, 1] and the decay interval must be positive",
            ));
        }
        Ok(())
    }
}

/// Everything needed to continue an interrupted run exactly where it
/// stopped: the optimizer moments, the completed-step count, and the word
/// position of the training random stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub rng_word_pos: u128,
}

/// Result of a training call: per-step losses and learning rates, a
/// divergence flag, and the state a later call can resume from.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub loss_trace: Vec<f64>,
    pub lr_trace: Vec<f64>,
    /// True when the run aborted on a non-finite loss or gradient. The
    /// traces up to the abort are preserved.
    pub diverged: bool,
    pub state: TrainState,
}

/// Trains `model` in place. With `resume` the run continues from a state
/// captured by an earlier call with the same config, dataset, and schedule;
/// the concatenated traces match an uninterrupted run bit for bit.
pub fn train(
    model: &mut DenoiserModel,
    dataset: &[TroGraph],
    schedule: &DiffusionSchedule,
    config: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training needs at least one graph"));
    }
    let cfg = model.config().clone();
    for (i, g) in dataset.iter().enumerate() {
        if g.link_nodes.slot_count() != cfg.l_pad || g.object_nodes.patch_count() != cfg.p {
            return Err(Error::invalid(format!(
                "dataset graph {i} has {} link slots and {} patches, model wants {} and {}",
                g.link_nodes.slot_count(),
                g.object_nodes.patch_count(),
                cfg.l_pad,
                cfg.p
            )));
        }
    }
    if schedule.t_count() > cfg.t_max {
        return Err(Error::invalid(format!(
            "schedule runs to step {} but the model only embeds up to {}",
            schedule.t_count(),
            cfg.t_max
        )));
    }

    let steps_per_epoch = dataset.len().div_ceil(config.batch) as u64;
    let total_steps = config.epochs as u64 * steps_per_epoch;
    let n_params = model.param_count();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (start_step, mut m, mut v) = match resume {
        Some(state) => {
            if state.adam_m.len() != n_params || state.adam_v.len() != n_params {
                return Err(Error::invalid(format!(
                    "resume state holds {} optimizer entries, model has {n_params} parameters",
                    state.adam_m.len()
                )));
            }
            if state.step > total_steps {
                return Err(Error::invalid(format!(
                    "resume state is at step {}, beyond the {total_steps} configured",
                    state.step
                )));
            }
            rng.set_word_pos(state.rng_word_pos);
            (state.step, state.adam_m, state.adam_v)
        }
        None => (0, vec![0.0; n_params], vec![0.0; n_params]),
    };

    let mut loss_trace = Vec::new();
    let mut lr_trace = Vec::new();
    let mut diverged = false;
    let mut step = start_step;

    'steps: while step < total_steps {
        let epoch = (step / steps_per_epoch) as usize;
        let lr = config.lr * config.lr_decay.powi((epoch / config.lr_decay_epochs) as i32);

        let mut grad_sum = vec![0.0; n_params];
        let mut loss_sum = 0.0;
        for _ in 0..config.batch {
            let idx = rng.gen_range(0..dataset.len());
            let t = rng.gen_range(1..=schedule.t_count());
            let clean = &dataset[idx];
            let (noisy, eps) = renoise_with_retry(clean, t, schedule, &mut rng)?;
            match model.backward(&noisy, t, &eps, config.gamma_p, config.gamma_r) {
                Ok((loss, grad)) => {
                    loss_sum += loss;
                    for (acc, g) in grad_sum.iter_mut().zip(&grad) {
                        *acc += g;
                    }
                }
                Err(Error::Numerical(_)) => {
                    diverged = true;
                    break 'steps;
                }
                Err(e) => return Err(e),
            }
        }

        let batch_loss = loss_sum / config.batch as f64;
        loss_trace.push(batch_loss);
        lr_trace.push(lr);
        if !batch_loss.is_finite() {
            diverged = true;
            break;
        }

        let scale = 1.0 / config.batch as f64;
        let t_adam = (step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t_adam);
        let bc2 = 1.0 - ADAM_BETA2.powi(t_adam);
        let params = model.params_mut();
        for i in 0..n_params {
            let g = grad_sum[i] * scale;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        step += 1;
    }

    Ok(TrainOutcome {
        loss_trace,
        lr_trace,
        diverged,
        state: TrainState { step, adam_m: m, adam_v: v, rng_word_pos: rng.get_word_pos() },
    })
}

/// Draws a noisy copy of `clean` at step `t`, retrying with fresh noise
/// when the noised poses land inside the singular band of the rotation log.
fn renoise_with_retry(
    clean: &TroGraph,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(TroGraph, Vec<[f64; 6]>)> {
    let mut last = None;
    for _ in 0..RENOISE_ATTEMPTS {
        let (rows, eps) =
            forward_noise(&clean.link_nodes.poses, &clean.link_nodes.mask, t, schedule, rng)?;
        match clean.with_poses(&rows) {
            Ok(g) => return Ok((g, eps)),
            Err(e @ Error::NearSingularity(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Numerical("renoise retry loop fell through".into())))
}
