use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;

use super::pgd::{finish, PgdRun};
use super::{reference_loss_value, AttackBudget, AttackGoal, AttackOutcome};
use crate::error::Result;
use crate::learner::{MamlLearner, MetaLearner};
use crate::model::{accuracy, init_params, ClassifierSpec, Metrics};
use crate::rng;
use crate::tasks::Episode;

/// Uniform noise in `[−ε, ε]` on `k` randomly chosen pool samples, clipped
/// to `[0, 1]`.
pub fn random_baseline<L: MetaLearner + ?Sized>(
    learner: &L,
    episode: &Episode,
    goal: &AttackGoal,
    budget: &AttackBudget,
    seed: u64,
) -> Result<AttackOutcome> {
    goal.validate(episode.shape.way)?;
    let pool = goal.pool(&episode.train);
    budget.validate(pool.len())?;
    let mut rng = rng::rng(seed);
    let mut selected: Vec<usize> = index::sample(&mut rng, pool.len(), budget.k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    selected.sort_unstable();

    let mut inputs = episode.train.inputs.clone();
    let eps = budget.epsilon;
    for &r in &selected {
        for v in inputs.row_mut(r) {
            let noise: f64 = rng.random_range(-eps..=eps);
            *v = (*v + noise).clamp(0.0, 1.0);
        }
    }
    let clean_loss = reference_loss_value(learner, &episode.train.inputs, &episode.train, goal)?;
    let loss = reference_loss_value(learner, &inputs, &episode.train, goal)?;
    let run = PgdRun {
        inputs,
        loss_trace: alloc::vec![clean_loss, loss],
        best_loss: loss,
    };
    finish(learner, episode, selected, run, clean_loss, Vec::new())
}

/// Fine-tunes a freshly initialized classifier (no meta-learned start) on the
/// support set and reports its test metrics.
pub fn random_finetune_baseline(
    episode: &Episode,
    spec: &ClassifierSpec,
    inner_lr: f64,
    finetune_steps: usize,
    seed: u64,
) -> Result<Metrics> {
    let learner = MamlLearner::new(spec.clone(), init_params(spec, seed), inner_lr, finetune_steps)?;
    let phi = learner.finetune_values(learner.theta(), &episode.train.inputs, &episode.train.labels)?;
    accuracy(spec, &phi, &episode.test)
}
