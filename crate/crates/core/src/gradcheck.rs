//! Central finite-difference checks of every differentiable op and of the
//! gradient of the attack objective through unrolled MAML adaptation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::attack::{reference_loss, reference_loss_value, AttackGoal};
use crate::autodiff::{Graph, OpKind, Var};
use crate::error::Result;
use crate::learner::{MamlLearner, MetaLearner};
use crate::model::{ClassifierSpec, LabeledBatch};
use crate::rng::{self, derive_seed, Rng};
use crate::tensor::Tensor;

/// Finite-difference step used by every check.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance of the single-op checks.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance of the checks through unrolled adaptation.
pub const BILEVEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// The op under test, for single-op checks.
    pub op: Option<OpKind>,
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`, or the plain difference when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function at `x`.
pub fn numeric_gradient(x: &Tensor, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(out)
}

type Build = fn(&mut Graph, &[Var], &OpCase) -> Result<Var>;

/// One seeded instance of an op: inputs, extra arguments and the op itself.
struct OpCase {
    inputs: Vec<Tensor>,
    indices: Vec<usize>,
    shape: Vec<usize>,
    scalar: f64,
    axis: usize,
    build: Build,
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let data = (0..shape.iter().product()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Values bounded away from zero, with random signs.
fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn dims(rng: &mut Rng) -> [usize; 2] {
    [rng.random_range(1..=4), rng.random_range(1..=4)]
}

fn op_case(kind: OpKind, rng: &mut Rng, case: usize) -> OpCase {
    let s = dims(rng);
    let mut c = OpCase {
        inputs: Vec::new(),
        indices: Vec::new(),
        shape: Vec::new(),
        scalar: 0.0,
        axis: 0,
        build: |g, v, _| g.add(v[0], v[1]),
    };
    match kind {
        OpKind::MatMul => {
            let n = rng.random_range(1..=4);
            c.inputs = vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &[s[1], n], -1.0, 1.0)];
            c.build = |g, v, _| g.matmul(v[0], v[1]);
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            c.inputs = vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)];
            c.build = match kind {
                OpKind::Add => |g, v, _| g.add(v[0], v[1]),
                OpKind::Sub => |g, v, _| g.sub(v[0], v[1]),
                _ => |g, v, _| g.mul(v[0], v[1]),
            };
        }
        OpKind::Div => {
            c.inputs = vec![uniform(rng, &s, -1.0, 1.0), away_from_zero(rng, &s, 0.5, 2.0)];
            c.build = |g, v, _| g.div(v[0], v[1]);
        }
        OpKind::ScalarMul => {
            c.inputs = vec![uniform(rng, &s, -1.0, 1.0)];
            c.scalar = rng.random_range(-3.0..3.0);
            c.build = |g, v, c| g.scalar_mul(v[0], c.scalar);
        }
        OpKind::Relu => {
            // far enough from the kink that the difference quotient never straddles it
            c.inputs = vec![away_from_zero(rng, &s, 0.1, 1.0)];
            c.build = |g, v, _| g.relu(v[0]);
        }
        OpKind::Exp => {
            c.inputs = vec![uniform(rng, &s, -2.0, 2.0)];
            c.build = |g, v, _| g.exp(v[0]);
        }
        OpKind::LogSoftmax => {
            let (shape, axis) = match case % 3 {
                0 => (vec![s[0] + 1], 0),
                1 => (s.to_vec(), 1),
                _ => (s.to_vec(), 0),
            };
            c.inputs = vec![uniform(rng, &shape, -3.0, 3.0)];
            c.axis = axis;
            c.build = |g, v, c| g.log_softmax(v[0], c.axis);
        }
        OpKind::Sum => {
            c.inputs = vec![uniform(rng, &s, -1.0, 1.0)];
            c.build = |g, v, _| g.sum(v[0]);
        }
        OpKind::Mean => {
            c.inputs = vec![uniform(rng, &s, -1.0, 1.0)];
            c.build = |g, v, _| g.mean(v[0]);
        }
        OpKind::SumTo => {
            c.shape = match case % 4 {
                0 => vec![1, s[1]],
                1 => vec![s[0], 1],
                2 => vec![1, 1],
                _ => vec![],
            };
            c.inputs = vec![uniform(rng, &s, -1.0, 1.0)];
            c.build = |g, v, c| g.sum_to(v[0], &c.shape);
        }
        OpKind::Expand => {
            let small = match case % 4 {
                0 => vec![1, s[1]],
                1 => vec![s[0], 1],
                2 => vec![1, 1],
                _ => vec![],
            };
            c.shape = s.to_vec();
            c.inputs = vec![uniform(rng, &small, -1.0, 1.0)];
            c.build = |g, v, c| g.expand(v[0], &c.shape);
        }
        OpKind::Reshape => {
            c.shape = if case % 2 == 0 { vec![s[1], s[0]] } else { vec![s[0] * s[1]] };
            c.inputs = vec![uniform(rng, &s, -1.0, 1.0)];
            c.build = |g, v, c| g.reshape(v[0], &c.shape);
        }
        OpKind::Transpose => {
            c.inputs = vec![uniform(rng, &s, -1.0, 1.0)];
            c.build = |g, v, _| g.transpose(v[0]);
        }
        OpKind::GatherRows => {
            let picks = rng.random_range(1..=6);
            c.indices = (0..picks).map(|_| rng.random_range(0..s[0])).collect();
            c.inputs = vec![uniform(rng, &s, -1.0, 1.0)];
            c.build = |g, v, c| g.gather_rows(v[0], &c.indices);
        }
        OpKind::ScatterRows => {
            let rows = rng.random_range(1..=4);
            c.indices = (0..s[0]).map(|_| rng.random_range(0..rows)).collect();
            c.shape = vec![rows];
            c.inputs = vec![uniform(rng, &s, -1.0, 1.0)];
            c.build = |g, v, c| g.scatter_rows(v[0], &c.indices, c.shape[0]);
        }
        OpKind::Square => {
            c.inputs = vec![uniform(rng, &s, -2.0, 2.0)];
            c.build = |g, v, _| g.square(v[0]);
        }
        OpKind::Sqrt => {
            c.inputs = vec![uniform(rng, &s, 0.5, 2.0)];
            c.build = |g, v, _| g.sqrt(v[0]);
        }
    }
    c
}

/// Worst relative error over all inputs of one op instance. The op's output
/// is contracted with a random cotangent so every output entry matters.
fn check_case(c: &OpCase, rng: &mut Rng, fault: Option<OpKind>) -> Result<f64> {
    let mut g = Graph::new();
    g.inject_fault(fault);
    let vars: Vec<Var> = c.inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = (c.build)(&mut g, &vars, c)?;
    let cotangent = uniform(rng, g.shape(out), -1.0, 1.0);
    let analytic = g.vjp_values(out, &cotangent, &vars)?;

    let contract = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (c.build)(&mut g, &vars, c)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(cotangent.data())
            .map(|(a, b)| a * b)
            .sum())
    };
    let mut worst: f64 = 0.0;
    for (i, x) in c.inputs.iter().enumerate() {
        let numeric = numeric_gradient(x, |probe| {
            let mut inputs = c.inputs.clone();
            inputs[i] = probe.clone();
            contract(&inputs)
        })?;
        worst = worst.max(relative_error(analytic[i].data(), &numeric));
    }
    Ok(worst)
}

/// Checks one op on `cases` seeded random instances.
pub fn check_op(kind: OpKind, cases: usize, seed: u64, fault: Option<OpKind>) -> Result<CheckReport> {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = rng::rng(derive_seed(seed, (kind as u64) << 32 | case as u64));
        let c = op_case(kind, &mut rng, case);
        worst = worst.max(check_case(&c, &mut rng, fault)?);
    }
    Ok(CheckReport {
        name: String::from(kind.name()),
        op: Some(kind),
        cases,
        max_rel_error: worst,
        tolerance: OP_TOLERANCE,
    })
}

/// A tiny 3-way 2-shot MAML victim and a support set in `[0.2, 0.8]`.
pub fn tiny_maml_case(seed: u64, finetune_steps: usize) -> Result<(MamlLearner, LabeledBatch)> {
    let spec = ClassifierSpec::new(4, vec![6], 3)?;
    let learner = MamlLearner::init(spec, seed, 0.1, finetune_steps)?;
    let mut rng = rng::rng(derive_seed(seed, 1));
    let inputs = uniform(&mut rng, &[6, 4], 0.2, 0.8);
    let batch = LabeledBatch::new(inputs, vec![0, 0, 1, 1, 2, 2], 3)?;
    Ok((learner, batch))
}

/// Gradient of the attack objective with respect to the poisoned support
/// inputs, through `finetune_steps` unrolled inner updates.
pub fn check_bilevel(
    finetune_steps: usize,
    cases: usize,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<CheckReport> {
    let goal = AttackGoal::Untargeted;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (learner, clean) = tiny_maml_case(derive_seed(seed, case as u64), finetune_steps)?;
        let mut g = Graph::new();
        g.inject_fault(fault);
        let theta = learner.theta().to_vars(&mut g, false);
        let x = g.leaf(clean.inputs.clone(), true);
        let loss = reference_loss(&learner, &mut g, &theta, x, &clean, &goal)?;
        let analytic = g.grad_values(loss, &[x])?.remove(0);
        let numeric = numeric_gradient(&clean.inputs, |probe| {
            reference_loss_value(&learner, probe, &clean, &goal)
        })?;
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(CheckReport {
        name: format!("attack gradient through {finetune_steps}-step adaptation"),
        op: None,
        cases,
        max_rel_error: worst,
        tolerance: BILEVEL_TOLERANCE,
    })
}

/// Every op check (20 cases each) followed by the 1-, 2- and 5-step
/// bilevel checks.
pub fn run_all(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for kind in OpKind::ALL {
        reports.push(check_op(kind, 20, seed, fault)?);
    }
    for steps in [1, 2, 5] {
        reports.push(check_bilevel(steps, 4, seed, fault)?);
    }
    Ok(reports)
}
