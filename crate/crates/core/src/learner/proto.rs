use super::{wrong_model, Adapted, MetaLearner};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{forward, init_params, ClassifierSpec, ParamSet};
use crate::tensor::Tensor;

/// Metric-based learner: class prototypes are mean support embeddings and
/// logits are negative squared Euclidean distances to them.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoLearner {
    /// Embedding network; `output_dim` is the embedding width.
    pub embed_spec: ClassifierSpec,
    theta: ParamSet,
    pub way: usize,
}

impl ProtoLearner {
    pub fn new(embed_spec: ClassifierSpec, theta: ParamSet, way: usize) -> Result<Self> {
        embed_spec.validate()?;
        if way < 2 {
            return Err(Error::InvalidArgument(alloc::format!("way {way}")));
        }
        if !theta.same_layout(&init_params(&embed_spec, 0)) {
            return Err(Error::InvalidArgument("theta does not match the embedding spec".into()));
        }
        Ok(Self {
            embed_spec,
            theta,
            way,
        })
    }

    pub fn init(embed_spec: ClassifierSpec, way: usize, seed: u64) -> Result<Self> {
        let theta = init_params(&embed_spec, seed);
        Self::new(embed_spec, theta, way)
    }

    /// `(N, n)` matrix whose row `c` averages the support rows of class `c`.
    fn averaging_matrix(&self, labels: &[usize]) -> Result<Tensor> {
        let mut counts = alloc::vec![0usize; self.way];
        for &l in labels {
            if l >= self.way {
                return Err(Error::InvalidArgument(alloc::format!("label {l} out of {}", self.way)));
            }
            counts[l] += 1;
        }
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingClass(missing));
        }
        let mut m = Tensor::zeros(&[self.way, labels.len()]);
        let data = m.data_mut();
        for (i, &l) in labels.iter().enumerate() {
            data[l * labels.len() + i] = 1.0 / counts[l] as f64;
        }
        Ok(m)
    }
}

/// `−‖a_i − b_j‖²` for every row pair, `(n, m)`.
pub(crate) fn neg_sq_distances(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (n, m) = (g.shape(a)[0], g.shape(b)[0]);
    let a2 = g.square(a)?;
    let a2 = g.sum_to(a2, &[n, 1])?;
    let a2 = g.expand(a2, &[n, m])?;
    let b2 = g.square(b)?;
    let b2 = g.sum_to(b2, &[m, 1])?;
    let b2 = g.reshape(b2, &[1, m])?;
    let b2 = g.expand(b2, &[n, m])?;
    let bt = g.transpose(b)?;
    let ab = g.matmul(a, bt)?;
    let ab2 = g.scalar_mul(ab, 2.0)?;
    let s = g.add(a2, b2)?;
    let d = g.sub(s, ab2)?;
    g.neg(d)
}

impl MetaLearner for ProtoLearner {
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
        self.way
    }

    fn input_dim(&self) -> usize {
        self.embed_spec.input_dim
    }

    fn adapt(
        &self,
        g: &mut Graph,
        theta: &[Var],
        support: Var,
        labels: &[usize],
        _differentiable: bool,
    ) -> Result<Adapted> {
        let avg = self.averaging_matrix(labels)?;
        let emb = forward(g, &self.embed_spec, theta, support)?;
        let avg = g.constant(avg);
        Ok(Adapted::Prototypes(g.matmul(avg, emb)?))
    }

    fn predict(&self, g: &mut Graph, theta: &[Var], model: &Adapted, inputs: Var) -> Result<Var> {
        let Adapted::Prototypes(centers) = model else {
            return Err(wrong_model());
        };
        let emb = forward(g, &self.embed_spec, theta, inputs)?;
        neg_sq_distances(g, emb, *centers)
    }
}
