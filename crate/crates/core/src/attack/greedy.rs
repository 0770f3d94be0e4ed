use alloc::vec::Vec;

use super::pgd::{finish, pgd_run, PgdRun};
use super::{reference_loss_value, AttackBudget, AttackGoal, AttackOutcome};
use crate::error::{Error, Result};
use crate::learner::MetaLearner;
use crate::tasks::Episode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GreedyOptions {
    /// Start each stage's PGD from the previous stage's perturbation instead
    /// of from the clean samples.
    pub warm_start: bool,
}

/// Evaluates independent candidate jobs `0..jobs`. Implementations may run
/// them concurrently but must return results in job order.
pub trait CandidateMap {
    fn map(&self, jobs: usize, f: &(dyn Fn(usize) -> Result<PgdRun> + Sync)) -> Vec<Result<PgdRun>>;
}

/// Evaluates candidates one after another.
#[derive(Clone, Copy, Debug, Default)]
pub struct Serial;

impl CandidateMap for Serial {
    fn map(&self, jobs: usize, f: &(dyn Fn(usize) -> Result<PgdRun> + Sync)) -> Vec<Result<PgdRun>> {
        (0..jobs).map(f).collect()
    }
}

/// Greedy growth of the perturbed set, one outcome per stage.
///
/// Stage `i` tries every remaining pool sample `x`, attacks `S_{i-1} ∪ {x}`
/// with PGD and keeps the `x` with the largest reference loss (lowest index
/// on ties). Stage `i` of a run with budget `k` is identical to the final
/// stage of a run with budget `i`.
pub fn greedy_stages<L: MetaLearner + Sync + ?Sized>(
    learner: &L,
    episode: &Episode,
    goal: &AttackGoal,
    budget: &AttackBudget,
    options: GreedyOptions,
    map: &dyn CandidateMap,
) -> Result<Vec<AttackOutcome>> {
    goal.validate(episode.shape.way)?;
    let pool = goal.pool(&episode.train);
    budget.validate(pool.len())?;
    if budget.k == 0 {
        return Err(Error::InvalidArgument("greedy selection needs k >= 1".into()));
    }
    let clean_loss = reference_loss_value(learner, &episode.train.inputs, &episode.train, goal)?;

    let mut selected: Vec<usize> = Vec::new();
    let mut previous: Option<PgdRun> = None;
    let mut stage_losses = Vec::with_capacity(budget.k);
    let mut outcomes = Vec::with_capacity(budget.k);
    for stage in 1..=budget.k {
        let candidates: Vec<usize> = pool.iter().copied().filter(|c| !selected.contains(c)).collect();
        let stage_budget = AttackBudget { k: stage, ..*budget };
        let start = if options.warm_start {
            previous.as_ref().map(|p| &p.inputs)
        } else {
            None
        };
        let eval = |j: usize| {
            let mut set = selected.clone();
            set.push(candidates[j]);
            pgd_run(learner, episode, &set, goal, &stage_budget, start)
        };
        let runs = map.map(candidates.len(), &eval);

        let mut best: Option<(usize, PgdRun)> = None;
        for (j, run) in runs.into_iter().enumerate() {
            let run = run?;
            if best.as_ref().map_or(true, |(_, b)| run.best_loss > b.best_loss) {
                best = Some((j, run));
            }
        }
        let (j, run) = best.expect("pool has at least k candidates");
        selected.push(candidates[j]);
        stage_losses.push(run.best_loss);
        outcomes.push(finish(
            learner,
            episode,
            selected.clone(),
            run.clone(),
            clean_loss,
            stage_losses.clone(),
        )?);
        previous = Some(run);
    }
    Ok(outcomes)
}

/// Greedy perturbation-set search; `|selected| = k` in the result.
pub fn greedy_select<L: MetaLearner + Sync + ?Sized>(
    learner: &L,
    episode: &Episode,
    goal: &AttackGoal,
    budget: &AttackBudget,
    options: GreedyOptions,
    map: &dyn CandidateMap,
) -> Result<AttackOutcome> {
    let mut stages = greedy_stages(learner, episode, goal, budget, options, map)?;
    Ok(stages.pop().expect("k >= 1 stages"))
}
