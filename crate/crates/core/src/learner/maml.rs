use alloc::vec::Vec;

use super::{wrong_model, Adapted, MetaLearner};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{batch_loss, forward, init_params, ClassifierSpec, ParamSet};
use crate::tensor::Tensor;

/// Optimization-based learner: φ is θ after `finetune_steps` full-batch
/// gradient steps on the summed support loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MamlLearner {
    pub spec: ClassifierSpec,
    theta: ParamSet,
    pub inner_lr: f64,
    /// Total number of gradient updates; 1 means φ = θ − α∇L(θ).
    pub finetune_steps: usize,
}

impl MamlLearner {
    pub fn new(spec: ClassifierSpec, theta: ParamSet, inner_lr: f64, finetune_steps: usize) -> Result<Self> {
        spec.validate()?;
        if !(inner_lr >= 0.0) || !inner_lr.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!("inner_lr {inner_lr}")));
        }
        if !theta.same_layout(&init_params(&spec, 0)) {
            return Err(Error::InvalidArgument("theta does not match the classifier spec".into()));
        }
        Ok(Self {
            spec,
            theta,
            inner_lr,
            finetune_steps,
        })
    }

    pub fn init(spec: ClassifierSpec, seed: u64, inner_lr: f64, finetune_steps: usize) -> Result<Self> {
        let theta = init_params(&spec, seed);
        Self::new(spec, theta, inner_lr, finetune_steps)
    }

    /// Same meta-parameters, different number of fine-tuning steps.
    pub fn with_steps(&self, finetune_steps: usize) -> Self {
        Self {
            finetune_steps,
            ..self.clone()
        }
    }

    /// Inner loop on plain values; the returned parameters are detached.
    pub fn finetune_values(&self, start: &ParamSet, support: &Tensor, labels: &[usize]) -> Result<ParamSet> {
        let mut values: Vec<Tensor> = start.tensors().cloned().collect();
        for _ in 0..self.finetune_steps {
            let mut g = Graph::new();
            let phi: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let x = g.constant(support.clone());
            let loss = batch_loss(&mut g, &self.spec, &phi, x, labels)?;
            let grads = g.grad_values(loss, &phi)?;
            values = values
                .iter()
                .zip(&grads)
                .map(|(p, gr)| {
                    let data = p
                        .data()
                        .iter()
                        .zip(gr.data())
                        .map(|(a, b)| a - b * self.inner_lr)
                        .collect();
                    Tensor::new(p.shape().to_vec(), data)
                        .map_err(|_| Error::NonFinite { op: "maml_adapt" })
                })
                .collect::<Result<_>>()?;
        }
        start.with_tensors(values)
    }
}

impl MetaLearner for MamlLearner {
    fn theta(&self) -> &ParamSet {
        &self.theta
    }

    fn set_theta(&mut self, theta: ParamSet) -> Result<()> {
        if !theta.same_layout(&self.theta) {
            return Err(Error::InvalidArgument("theta layout changed".into()));
        }
        self.theta = theta;
        Ok(())
    }

    fn num_classes(&self) -> usize {
        self.spec.output_dim
    }

    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn adapt(
        &self,
        g: &mut Graph,
        theta: &[Var],
        support: Var,
        labels: &[usize],
        differentiable: bool,
    ) -> Result<Adapted> {
        if !differentiable {
            let start = self.theta.from_vars(g, theta)?;
            let support = g.value(support).clone();
            let phi = self.finetune_values(&start, &support, labels)?;
            return Ok(Adapted::Params(phi.to_vars(g, false)));
        }
        // The inner gradients are taken with respect to φ_j, so φ_0 must be
        // a differentiable node even when θ itself is held fixed.
        let mut phi: Vec<Var> = theta
            .iter()
            .map(|&v| {
                if g.requires_grad(v) {
                    v
                } else {
                    let t = g.value(v).clone();
                    g.leaf(t, true)
                }
            })
            .collect();
        for _ in 0..self.finetune_steps {
            let loss = batch_loss(g, &self.spec, &phi, support, labels)?;
            let grads = g.grad(loss, &phi, true)?;
            phi = phi
                .iter()
                .zip(&grads)
                .map(|(&p, &gr)| {
                    let step = g.scalar_mul(gr, self.inner_lr)?;
                    g.sub(p, step)
                })
                .collect::<Result<_>>()?;
        }
        Ok(Adapted::Params(phi))
    }

    fn predict(&self, g: &mut Graph, _theta: &[Var], model: &Adapted, inputs: Var) -> Result<Var> {
        match model {
            Adapted::Params(phi) => forward(g, &self.spec, phi, inputs),
            _ => Err(wrong_model()),
        }
    }
}
