use alloc::vec::Vec;

use super::{outcome_metrics, reference_loss, AttackBudget, AttackGoal, AttackOutcome};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::learner::MetaLearner;
use crate::tasks::Episode;
use crate::tensor::Tensor;

/// Raw result of one PGD run, before metrics are computed.
#[derive(Clone, Debug, PartialEq)]
pub struct PgdRun {
    /// Best poisoned support inputs found.
    pub inputs: Tensor,
    pub loss_trace: Vec<f64>,
    pub best_loss: f64,
}

/// Signed-gradient ascent on the reference loss over the `selected` rows.
///
/// Each iteration rebuilds the poisoned set from the current iterates,
/// adapts, takes one `step_size * sign(∇)` step on every selected sample and
/// projects back onto the ε-ball around its clean value intersected with
/// `[0, 1]`. `start` may supply initial iterates (warm start); by default
/// PGD starts from the clean samples. The iterate with the highest
/// reference loss is returned, so the result is never worse than the start.
pub fn pgd_run<L: MetaLearner + ?Sized>(
    learner: &L,
    episode: &Episode,
    selected: &[usize],
    goal: &AttackGoal,
    budget: &AttackBudget,
    start: Option<&Tensor>,
) -> Result<PgdRun> {
    let clean = &episode.train;
    let pool = goal.pool(clean);
    for (i, s) in selected.iter().enumerate() {
        if !pool.contains(s) || selected[..i].contains(s) {
            return Err(Error::InvalidArgument(alloc::format!(
                "sample {s} is not a distinct member of the perturbable pool"
            )));
        }
    }
    budget.validate(pool.len())?;
    if selected.len() > budget.k {
        return Err(Error::BudgetExceedsPool {
            k: selected.len(),
            pool: budget.k,
        });
    }

    let mut current = match start {
        Some(s) => {
            super::check_constraints(s, &clean.inputs, selected, budget)?;
            s.clone()
        }
        None => clean.inputs.clone(),
    };
    let iterations = if selected.is_empty() { 0 } else { budget.steps };
    let mut trace = Vec::with_capacity(iterations + 1);
    let mut best: Option<(f64, Tensor)> = None;

    for it in 0..=iterations {
        let mut g = Graph::new();
        let theta = learner.theta().to_vars(&mut g, false);
        let x = g.leaf(current.clone(), true);
        let loss = reference_loss(learner, &mut g, &theta, x, clean, goal)?;
        let value = g.value(loss).item()?;
        trace.push(value);
        if best.as_ref().map_or(true, |(b, _)| value > *b) {
            best = Some((value, current.clone()));
        }
        if it == iterations {
            break;
        }
        let grad = g.grad_values(loss, &[x])?.remove(0);
        for &r in selected {
            let cols = current.shape()[1];
            let (lo, hi) = (r * cols, (r + 1) * cols);
            let clean_row = &clean.inputs.data()[lo..hi];
            let grad_row = &grad.data()[lo..hi];
            for ((v, &c), &gv) in current.data_mut()[lo..hi].iter_mut().zip(clean_row).zip(grad_row) {
                let step = if gv > 0.0 {
                    budget.step_size
                } else if gv < 0.0 {
                    -budget.step_size
                } else {
                    0.0
                };
                *v = (*v + step)
                    .clamp(c - budget.epsilon, c + budget.epsilon)
                    .clamp(0.0, 1.0);
            }
        }
    }
    let (best_loss, inputs) = best.expect("at least one iterate is evaluated");
    Ok(PgdRun {
        inputs,
        loss_trace: trace,
        best_loss,
    })
}

/// PGD from the clean samples on a fixed selected set, with metrics.
pub fn pgd_on_selected<L: MetaLearner + ?Sized>(
    learner: &L,
    episode: &Episode,
    selected: &[usize],
    goal: &AttackGoal,
    budget: &AttackBudget,
) -> Result<AttackOutcome> {
    goal.validate(episode.shape.way)?;
    let run = pgd_run(learner, episode, selected, goal, budget, None)?;
    let clean_loss = run.loss_trace[0];
    finish(learner, episode, selected.to_vec(), run, clean_loss, Vec::new())
}

pub(crate) fn finish<L: MetaLearner + ?Sized>(
    learner: &L,
    episode: &Episode,
    selected: Vec<usize>,
    run: PgdRun,
    clean_loss: f64,
    stage_losses: Vec<f64>,
) -> Result<AttackOutcome> {
    let d_adv = episode.train.with_inputs(run.inputs)?;
    let (clean, attacked) = outcome_metrics(learner, episode, &d_adv)?;
    Ok(AttackOutcome {
        d_adv,
        selected,
        clean_loss,
        best_loss: run.best_loss,
        loss_trace: run.loss_trace,
        stage_losses,
        clean,
        attacked,
    })
}
