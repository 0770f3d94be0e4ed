//! Victim meta-learners: each maps a support set `D` and meta-parameters θ
//! to an adapted classifier, `φ = f_θ(D)`.
//!
//! All variants sit behind [`MetaLearner`], so attack code never needs to
//! know which one it is poisoning.

mod maml;
mod proto;
mod seq;
mod train;

pub use maml::MamlLearner;
pub use proto::ProtoLearner;
pub use seq::{SeqConfig, SeqLearner};
pub use train::{evaluate_episodes, held_out_seeds, meta_train, task_gradient, EpochRecord, MetaTrainConfig, TrainingCurve};

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::model::{cross_entropy_sum, metrics_from_logits, LabeledBatch, Metrics, ParamSet};

/// The product of adaptation.
#[derive(Clone, Debug)]
pub enum Adapted {
    /// Fine-tuned classifier parameters φ.
    Params(Vec<Var>),
    /// One embedding-space prototype per class, `(N, d_e)`.
    Prototypes(Var),
    /// Attention keys and values of the support tokens, plus the support
    /// mean embedding that queries are centered on.
    Context { keys: Var, values: Var, center: Var },
}

pub trait MetaLearner {
    fn theta(&self) -> &ParamSet;

    fn set_theta(&mut self, theta: ParamSet) -> Result<()>;

    /// N, the number of classes per episode.
    fn num_classes(&self) -> usize;

    fn input_dim(&self) -> usize;

    /// Builds the adapted model from the support set on `g`.
    ///
    /// `theta` are graph nodes holding [`MetaLearner::theta`]. With
    /// `differentiable = true` the result is differentiable with respect to
    /// `support` and `theta`; otherwise only its value is guaranteed.
    fn adapt(
        &self,
        g: &mut Graph,
        theta: &[Var],
        support: Var,
        labels: &[usize],
        differentiable: bool,
    ) -> Result<Adapted>;

    /// Logits `(n, N)` of the adapted model on `inputs`.
    fn predict(&self, g: &mut Graph, theta: &[Var], model: &Adapted, inputs: Var) -> Result<Var>;

    /// Summed loss on `query` of the model adapted to `support`.
    fn adapted_loss(
        &self,
        g: &mut Graph,
        theta: &[Var],
        support: Var,
        support_labels: &[usize],
        query: Var,
        query_labels: &[usize],
        differentiable: bool,
    ) -> Result<Var> {
        let model = self.adapt(g, theta, support, support_labels, differentiable)?;
        let logits = self.predict(g, theta, &model, query)?;
        cross_entropy_sum(g, logits, query_labels)
    }

    /// Adapts on `support` and scores the result on `query`.
    fn evaluate(&self, support: &LabeledBatch, query: &LabeledBatch) -> Result<Metrics> {
        let mut g = Graph::new();
        let theta = self.theta().to_vars(&mut g, false);
        let s = g.constant(support.inputs.clone());
        let model = self.adapt(&mut g, &theta, s, &support.labels, false)?;
        let q = g.constant(query.inputs.clone());
        let logits = self.predict(&mut g, &theta, &model, q)?;
        metrics_from_logits(g.value(logits), &query.labels, query.num_classes)
    }
}

/// Any of the three victim variants.
#[derive(Clone, Debug, PartialEq)]
pub enum Learner {
    Maml(MamlLearner),
    Proto(ProtoLearner),
    Seq(SeqLearner),
}

impl Learner {
    pub fn variant(&self) -> &'static str {
        match self {
            Learner::Maml(_) => "maml",
            Learner::Proto(_) => "proto",
            Learner::Seq(_) => "seq",
        }
    }
}

macro_rules! delegate {
    ($self:ident, $l:ident => $e:expr) => {
        match $self {
            Learner::Maml($l) => $e,
            Learner::Proto($l) => $e,
            Learner::Seq($l) => $e,
        }
    };
}

impl MetaLearner for Learner {
    fn theta(&self) -> &ParamSet {
        delegate!(self, l => l.theta())
    }

    fn set_theta(&mut self, theta: ParamSet) -> Result<()> {
        delegate!(self, l => l.set_theta(theta))
    }

    fn num_classes(&self) -> usize {
        delegate!(self, l => l.num_classes())
    }

    fn input_dim(&self) -> usize {
        delegate!(self, l => l.input_dim())
    }

    fn adapt(
        &self,
        g: &mut Graph,
        theta: &[Var],
        support: Var,
        labels: &[usize],
        differentiable: bool,
    ) -> Result<Adapted> {
        delegate!(self, l => l.adapt(g, theta, support, labels, differentiable))
    }

    fn predict(&self, g: &mut Graph, theta: &[Var], model: &Adapted, inputs: Var) -> Result<Var> {
        delegate!(self, l => l.predict(g, theta, model, inputs))
    }
}

pub(crate) fn wrong_model() -> crate::Error {
    crate::Error::InvalidArgument("adapted model comes from a different learner variant".into())
}
