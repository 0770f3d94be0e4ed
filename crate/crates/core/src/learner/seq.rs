use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{wrong_model, Adapted, MetaLearner};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{linear, one_hot, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

/// Shape of the attention sequence learner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqConfig {
    pub input_dim: usize,
    pub way: usize,
    pub hidden: usize,
    /// Support size plus one query slot.
    pub context_len: usize,
    /// Add sinusoidal position codes to the support tokens.
    pub positional: bool,
}

impl SeqConfig {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.way < 2 || self.hidden == 0 || self.context_len < 2 {
            return Err(Error::InvalidArgument(format!("invalid sequence config {self:?}")));
        }
        Ok(())
    }

    fn layout(&self) -> [(&'static str, Vec<usize>); 11] {
        let (d, n, h) = (self.input_dim, self.way, self.hidden);
        [
            ("embed_x", alloc::vec![d, h]),
            ("embed_y", alloc::vec![n, h]),
            ("embed_b", alloc::vec![h]),
            ("query", alloc::vec![h, h]),
            ("key", alloc::vec![h, h]),
            ("value", alloc::vec![h, h]),
            ("mix_w", alloc::vec![h, h]),
            ("mix_b", alloc::vec![h]),
            ("out_w", alloc::vec![h, n]),
            ("out_b", alloc::vec![n]),
            // learned attention temperature
            ("scale", alloc::vec![]),
        ]
    }
}

// parameter indices
const EMBED_X: usize = 0;
const EMBED_Y: usize = 1;
const EMBED_B: usize = 2;
const QUERY: usize = 3;
const KEY: usize = 4;
const VALUE: usize = 5;
const MIX_W: usize = 6;
const MIX_B: usize = 7;
const OUT_W: usize = 8;
const OUT_B: usize = 9;
const SCALE: usize = 10;

/// Model-based learner: a single-head attention model reads the support
/// set as a token sequence `(x_i, onehot(y_i))` and predicts the label of
/// a final query token whose label slot is zero. The support set plays the
/// role of the adapted model's parameters.
///
/// Input embeddings are centered on the support mean. Keys see only the
/// centered input part of a token, values see the whole token.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLearner {
    pub config: SeqConfig,
    theta: ParamSet,
}

impl SeqLearner {
    pub fn init(config: SeqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng(seed);
        let entries = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = match (name, shape.as_slice()) {
                    ("scale", _) => Tensor::scalar(1.0),
                    (_, [fan_in, fan_out]) => {
                        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                        let data = (0..fan_in * fan_out)
                            .map(|_| rng.random_range(-bound..=bound))
                            .collect();
                        Tensor::new(shape.clone(), data)?
                    }
                    _ => Tensor::zeros(&shape),
                };
                Ok((String::from(name), t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            theta: ParamSet::new(entries),
        })
    }

    pub fn new(config: SeqConfig, theta: ParamSet) -> Result<Self> {
        config.validate()?;
        let ok = theta.len() == 11
            && theta
                .iter()
                .zip(config.layout())
                .all(|((n, t), (ln, ls))| n == ln && t.shape() == ls.as_slice());
        if !ok {
            return Err(Error::InvalidArgument("theta does not match the sequence config".into()));
        }
        Ok(Self { config, theta })
    }

    fn positional(&self, rows: usize) -> Tensor {
        let h = self.config.hidden;
        let mut t = Tensor::zeros(&[rows, h]);
        for pos in 0..rows {
            for (j, v) in t.row_mut(pos).iter_mut().enumerate() {
                let rate = libm::pow(10_000.0, -((j / 2 * 2) as f64) / h as f64);
                let angle = pos as f64 * rate;
                *v = 0.1 * if j % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) };
            }
        }
        t
    }

    /// Embeds query tokens (label slot left empty).
    fn embed_query(&self, g: &mut Graph, theta: &[Var], inputs: Var) -> Result<Var> {
        linear(g, inputs, theta[EMBED_X], theta[EMBED_B])
    }
}

impl MetaLearner for SeqLearner {
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
        self.config.way
    }

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn adapt(
        &self,
        g: &mut Graph,
        theta: &[Var],
        support: Var,
        labels: &[usize],
        _differentiable: bool,
    ) -> Result<Adapted> {
        let n = g.shape(support)[0];
        if n + 1 != self.config.context_len || labels.len() != n {
            return Err(Error::ContextLength {
                expected: self.config.context_len - 1,
                got: n,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.way) {
            return Err(Error::InvalidArgument(format!("label {bad} out of {}", self.config.way)));
        }
        let hx = self.embed_query(g, theta, support)?;
        let h = self.config.hidden;
        let total = g.sum_to(hx, &[1, h])?;
        let center = g.scalar_mul(total, 1.0 / n as f64)?;
        let spread = g.expand(center, &[n, h])?;
        let hx = g.sub(hx, spread)?;
        let y = g.constant(one_hot(labels, self.config.way));
        let hy = g.matmul(y, theta[EMBED_Y])?;
        let mut tokens = g.add(hx, hy)?;
        if self.config.positional {
            let p = g.constant(self.positional(n));
            tokens = g.add(tokens, p)?;
        }
        Ok(Adapted::Context {
            keys: g.matmul(hx, theta[KEY])?,
            values: g.matmul(tokens, theta[VALUE])?,
            center,
        })
    }

    fn predict(&self, g: &mut Graph, theta: &[Var], model: &Adapted, inputs: Var) -> Result<Var> {
        let Adapted::Context { keys, values, center } = *model else {
            return Err(wrong_model());
        };
        let h = self.config.hidden;
        let hq = self.embed_query(g, theta, inputs)?;
        let rows = g.shape(hq)[0];
        let spread = g.expand(center, &[rows, h])?;
        let hq = g.sub(hq, spread)?;
        let q = g.matmul(hq, theta[QUERY])?;
        let kt = g.transpose(keys)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scalar_mul(scores, 1.0 / libm::sqrt(h as f64))?;
        let scale = g.expand(theta[SCALE], &[rows, g.shape(scores)[1]])?;
        let scores = g.mul(scores, scale)?;
        let logw = g.log_softmax(scores, 1)?;
        let weights = g.exp(logw)?;
        let read = g.matmul(weights, values)?;
        let mixed = linear(g, read, theta[MIX_W], theta[MIX_B])?;
        let z = g.add(mixed, hq)?;
        let z = g.relu(z)?;
        linear(g, z, theta[OUT_W], theta[OUT_B])
    }
}
