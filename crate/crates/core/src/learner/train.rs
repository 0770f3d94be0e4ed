use alloc::vec::Vec;

use super::MetaLearner;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};
use crate::tasks::{next_seed, Episode, TaskSampler};
use crate::tensor::Tensor;

/// Outer-loop settings. The outer optimizer is plain gradient descent on the
/// meta-batch mean of per-task query losses.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaTrainConfig {
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub outer_lr: f64,
    pub meta_batch: usize,
    pub seed: u64,
    /// Held-out episodes scored after every epoch (0 disables).
    pub eval_episodes: usize,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            tasks_per_epoch: 32,
            outer_lr: 1e-3,
            meta_batch: 4,
            seed: 0,
            eval_episodes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's tasks of the summed query loss.
    pub mean_loss: f64,
    pub held_out_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingCurve {
    /// Trailing moving average of the epoch losses.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self.epochs.iter().map(|e| e.mean_loss).collect();
        losses
            .windows(window.max(1))
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect()
    }
}

const DIVERGENCE_LOSS: f64 = 1e6;

/// Query loss after differentiable adaptation, and its gradient w.r.t. θ.
pub fn task_gradient<L: MetaLearner + ?Sized>(learner: &L, episode: &Episode) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let theta = learner.theta().to_vars(&mut g, true);
    let support = g.constant(episode.train.inputs.clone());
    let query = g.constant(episode.test.inputs.clone());
    let loss = learner.adapted_loss(
        &mut g,
        &theta,
        support,
        &episode.train.labels,
        query,
        &episode.test.labels,
        true,
    )?;
    let value = g.value(loss).item()?;
    let grads = g.grad_values(loss, &theta)?;
    Ok((value, grads))
}

/// Mean query accuracy over episodes drawn with the given seeds.
pub fn evaluate_episodes<L: MetaLearner + ?Sized>(
    learner: &L,
    sampler: &dyn TaskSampler,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seed in seeds {
        let ep = sampler.episode(seed)?;
        total += learner.evaluate(&ep.train, &ep.test)?.accuracy;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(total / count as f64)
}

/// Seeds of the held-out episodes scored after each epoch of a run with
/// training seed `seed`.
pub fn held_out_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| derive_seed(seed ^ 0xE7A1, i)).collect()
}

/// Episodic meta-training of θ, deterministic for a given config.
pub fn meta_train<L: MetaLearner + ?Sized>(
    learner: &mut L,
    sampler: &dyn TaskSampler,
    config: &MetaTrainConfig,
    held_out: Option<&dyn TaskSampler>,
) -> Result<TrainingCurve> {
    if sampler.shape().way != learner.num_classes() {
        return Err(Error::InvalidArgument(alloc::format!(
            "sampler yields {}-way episodes, learner is {}-way",
            sampler.shape().way,
            learner.num_classes()
        )));
    }
    if config.meta_batch == 0 {
        return Err(Error::InvalidArgument("meta_batch must be positive".into()));
    }
    let mut rng = rng::rng(config.seed);
    let eval_seeds = held_out_seeds(config.seed, config.eval_episodes);
    let mut curve = TrainingCurve::default();

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut remaining = config.tasks_per_epoch;
        while remaining > 0 {
            let batch = remaining.min(config.meta_batch);
            remaining -= batch;
            let mut acc: Option<Vec<Tensor>> = None;
            for _ in 0..batch {
                let episode = sampler.episode(next_seed(&mut rng))?;
                let (loss, grads) = task_gradient(&*learner, &episode)?;
                if !(loss <= DIVERGENCE_LOSS) {
                    return Err(Error::Divergence { epoch, loss });
                }
                loss_sum += loss;
                acc = Some(match acc {
                    None => grads,
                    Some(prev) => prev
                        .iter()
                        .zip(&grads)
                        .map(|(a, b)| {
                            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                            Tensor::new(a.shape().to_vec(), data)
                        })
                        .collect::<Result<_>>()?,
                });
            }
            if let Some(sum) = acc {
                let scale = -config.outer_lr / batch as f64;
                let theta = learner.theta().axpy(scale, &sum)?;
                learner.set_theta(theta)?;
            }
        }
        let held_out_accuracy = match held_out {
            Some(s) if !eval_seeds.is_empty() => {
                Some(evaluate_episodes(&*learner, s, eval_seeds.iter().copied())?)
            }
            _ => None,
        };
        curve.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / config.tasks_per_epoch.max(1) as f64,
            held_out_accuracy,
        });
    }
    Ok(curve)
}
