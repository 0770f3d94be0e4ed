//! Poisoning the support set of a few-shot task.
//!
//! The attacker may replace at most `k` support samples by versions within
//! an ℓ∞ ball of radius ε (and inside `[0, 1]`) so that the model the
//! meta-learner adapts from the poisoned set does badly. Because test
//! samples are unknown, the attack maximizes a surrogate: the summed loss of
//! the adapted model on the *clean* support samples (only those of the target
//! class for targeted goals).

mod baseline;
mod greedy;
mod pgd;

pub use baseline::{random_baseline, random_finetune_baseline};
pub use greedy::{greedy_select, greedy_stages, CandidateMap, GreedyOptions, Serial};
pub use pgd::{pgd_on_selected, pgd_run, PgdRun};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::learner::MetaLearner;
use crate::model::{cross_entropy_sum, LabeledBatch, Metrics};
use crate::rng;
use crate::tasks::Episode;
use crate::tensor::Tensor;

/// Which support samples a targeted attacker may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    /// Samples of the target class itself.
    Direct,
    /// Samples of a different class.
    Influence { attack_class: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackGoal {
    /// Degrade overall accuracy; every support sample is perturbable.
    Untargeted,
    /// Degrade recall of one class.
    Targeted { target: usize, access: Access },
}

impl AttackGoal {
    pub fn direct(target: usize) -> Self {
        AttackGoal::Targeted {
            target,
            access: Access::Direct,
        }
    }

    pub fn influence(target: usize, attack_class: usize) -> Self {
        AttackGoal::Targeted {
            target,
            access: Access::Influence { attack_class },
        }
    }

    pub fn validate(&self, way: usize) -> Result<()> {
        match *self {
            AttackGoal::Untargeted => Ok(()),
            AttackGoal::Targeted { target, access } => {
                if target >= way {
                    return Err(Error::InvalidArgument(format!("target class {target} of {way}")));
                }
                match access {
                    Access::Direct => Ok(()),
                    Access::Influence { attack_class } if attack_class == target => Err(
                        Error::InvalidArgument("influence attack needs attack class != target".into()),
                    ),
                    Access::Influence { attack_class } if attack_class >= way => Err(
                        Error::InvalidArgument(format!("attack class {attack_class} of {way}")),
                    ),
                    Access::Influence { .. } => Ok(()),
                }
            }
        }
    }

    pub fn target(&self) -> Option<usize> {
        match *self {
            AttackGoal::Untargeted => None,
            AttackGoal::Targeted { target, .. } => Some(target),
        }
    }

    /// Class whose samples may be perturbed; `None` means any class.
    pub fn attack_class(&self) -> Option<usize> {
        match *self {
            AttackGoal::Untargeted => None,
            AttackGoal::Targeted {
                target,
                access: Access::Direct,
            } => Some(target),
            AttackGoal::Targeted {
                access: Access::Influence { attack_class },
                ..
            } => Some(attack_class),
        }
    }

    /// Indices of perturbable support samples, ascending.
    pub fn pool(&self, train: &LabeledBatch) -> Vec<usize> {
        match self.attack_class() {
            None => (0..train.len()).collect(),
            Some(c) => train.indices_of(c),
        }
    }
}

/// Perturbation budget and PGD constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackBudget {
    /// Maximum number of perturbed samples.
    pub k: usize,
    /// ℓ∞ radius around each clean sample.
    pub epsilon: f64,
    pub step_size: f64,
    /// PGD iterations.
    pub steps: usize,
}

impl AttackBudget {
    pub fn validate(&self, pool: usize) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.step_size >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon {} / step size {} must be non-negative",
                self.epsilon, self.step_size
            )));
        }
        if self.k > pool {
            return Err(Error::BudgetExceedsPool { k: self.k, pool });
        }
        Ok(())
    }
}

/// How the perturbed set is chosen before PGD runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Greedy,
    /// `k` pool samples drawn uniformly with this seed.
    RandomSubset { seed: u64 },
    /// The whole pool (`k` is ignored).
    AllPool,
}

/// Clean-train and test metrics of one adapted model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub test: Metrics,
    pub train: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    /// Support set with the selected samples replaced.
    pub d_adv: LabeledBatch,
    pub selected: Vec<usize>,
    /// Reference loss at every evaluated iterate; entry 0 is the clean set.
    pub loss_trace: Vec<f64>,
    pub clean_loss: f64,
    pub best_loss: f64,
    /// For greedy runs, the best loss reached at each stage.
    pub stage_losses: Vec<f64>,
    pub clean: EvalMetrics,
    pub attacked: EvalMetrics,
}

impl AttackOutcome {
    /// Checks the threat-model constraints against the clean support set:
    /// untouched samples are bitwise equal, perturbed ones stay within the
    /// ε-ball and `[0, 1]`, and at most `k` samples were selected.
    pub fn check_constraints(&self, clean: &LabeledBatch, budget: &AttackBudget) -> Result<()> {
        check_constraints(&self.d_adv.inputs, &clean.inputs, &self.selected, budget)
    }
}

pub(crate) fn check_constraints(
    adv: &Tensor,
    clean: &Tensor,
    selected: &[usize],
    budget: &AttackBudget,
) -> Result<()> {
    if selected.len() > budget.k {
        return Err(Error::BudgetExceedsPool {
            k: selected.len(),
            pool: budget.k,
        });
    }
    if adv.shape() != clean.shape() {
        return Err(Error::ShapeMismatch {
            op: "check_constraints",
            lhs: adv.shape().to_vec(),
            rhs: clean.shape().to_vec(),
        });
    }
    let rows = adv.shape()[0];
    for r in 0..rows {
        let (a, c) = (adv.row(r), clean.row(r));
        if selected.contains(&r) {
            let ok = a
                .iter()
                .zip(c)
                .all(|(x, y)| (x - y).abs() <= budget.epsilon + 1e-12 && (0.0..=1.0).contains(x));
            if !ok {
                return Err(Error::InvalidArgument(format!("sample {r} violates the ε-ball or [0,1]")));
            }
        } else if a.iter().zip(c).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(Error::InvalidArgument(format!("unselected sample {r} was modified")));
        }
    }
    Ok(())
}

/// Surrogate objective: adapt on `d_adv` (differentiably) and return the
/// summed loss on the clean support samples, restricted to the target class
/// for targeted goals.
pub fn reference_loss<L: MetaLearner + ?Sized>(
    learner: &L,
    g: &mut Graph,
    theta: &[Var],
    d_adv: Var,
    clean_train: &LabeledBatch,
    goal: &AttackGoal,
) -> Result<Var> {
    let model = learner.adapt(g, theta, d_adv, &clean_train.labels, true)?;
    let (inputs, labels) = match goal.target() {
        None => (clean_train.inputs.clone(), clean_train.labels.clone()),
        Some(t) => {
            let rows = clean_train.indices_of(t);
            if rows.is_empty() {
                return Err(Error::EmptyTarget(t));
            }
            (clean_train.inputs.select_rows(&rows), vec![t; rows.len()])
        }
    };
    let x = g.constant(inputs);
    let logits = learner.predict(g, theta, &model, x)?;
    cross_entropy_sum(g, logits, &labels)
}

/// Value of [`reference_loss`] for poisoned inputs `d_adv`.
pub fn reference_loss_value<L: MetaLearner + ?Sized>(
    learner: &L,
    d_adv: &Tensor,
    clean_train: &LabeledBatch,
    goal: &AttackGoal,
) -> Result<f64> {
    let mut g = Graph::new();
    let theta = learner.theta().to_vars(&mut g, false);
    let x = g.constant(d_adv.clone());
    let loss = reference_loss(learner, &mut g, &theta, x, clean_train, goal)?;
    g.value(loss).item()
}

/// Metrics of the models adapted from the clean and the poisoned support set.
pub fn outcome_metrics<L: MetaLearner + ?Sized>(
    learner: &L,
    episode: &Episode,
    d_adv: &LabeledBatch,
) -> Result<(EvalMetrics, EvalMetrics)> {
    let score = |support: &LabeledBatch| -> Result<EvalMetrics> {
        Ok(EvalMetrics {
            test: learner.evaluate(support, &episode.test)?,
            train: learner.evaluate(support, &episode.train)?,
        })
    };
    Ok((score(&episode.train)?, score(d_adv)?))
}

/// Runs the attack with the chosen selection strategy.
pub fn run_attack<L: MetaLearner + Sync + ?Sized>(
    learner: &L,
    episode: &Episode,
    goal: &AttackGoal,
    budget: &AttackBudget,
    selection: Selection,
) -> Result<AttackOutcome> {
    goal.validate(episode.shape.way)?;
    let pool = goal.pool(&episode.train);
    match selection {
        Selection::Greedy => {
            if budget.k == 0 {
                return pgd_on_selected(learner, episode, &[], goal, budget);
            }
            greedy_select(learner, episode, goal, budget, GreedyOptions::default(), &Serial)
        }
        Selection::RandomSubset { seed } => {
            budget.validate(pool.len())?;
            let mut rng = rng::rng(seed);
            let mut chosen: Vec<usize> = index::sample(&mut rng, pool.len(), budget.k)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            chosen.sort_unstable();
            pgd_on_selected(learner, episode, &chosen, goal, budget)
        }
        Selection::AllPool => {
            let b = AttackBudget {
                k: pool.len(),
                ..*budget
            };
            pgd_on_selected(learner, episode, &pool, goal, &b)
        }
    }
}
