//! MLP classifiers `F(x; φ)`, their parameter containers and the loss.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::argmax_rows;
use crate::rng;
use crate::tensor::Tensor;

/// Fully connected ReLU network shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl ClassifierSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            output_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "output_dim must be at least 2, got {}",
                self.output_dim
            )));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each linear layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// True when both sets have the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// A set with this layout and values taken from `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.numel() {
            return Err(Error::BadBuffer {
                shape: vec![self.numel()],
                len: flat.len(),
            });
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let n = t.numel();
            let value = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?;
            entries.push((name.clone(), value));
            offset += n;
        }
        Ok(ParamSet { entries })
    }

    /// Replaces values with tensors of identical shapes, in order.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<ParamSet> {
        if tensors.len() != self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        let mut entries = Vec::with_capacity(tensors.len());
        for ((name, old), new) in self.entries.iter().zip(tensors) {
            if old.shape() != new.shape() {
                return Err(Error::ShapeMismatch {
                    op: "with_tensors",
                    lhs: old.shape().to_vec(),
                    rhs: new.shape().to_vec(),
                });
            }
            entries.push((name.clone(), new));
        }
        Ok(ParamSet { entries })
    }

    /// Places every tensor on `g` as a leaf.
    pub fn to_vars(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.tensors().map(|t| g.leaf(t.clone(), requires_grad)).collect()
    }

    /// Reads the current values of `vars` back into a set with this layout.
    pub fn from_vars(&self, g: &Graph, vars: &[Var]) -> Result<ParamSet> {
        self.with_tensors(vars.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// `self + scale * delta`, entry by entry.
    pub fn axpy(&self, scale: f64, delta: &[Tensor]) -> Result<ParamSet> {
        let tensors = self
            .tensors()
            .zip(delta)
            .map(|(t, d)| {
                let data = t.data().iter().zip(d.data()).map(|(a, b)| a + scale * b).collect();
                Tensor::new(t.shape().to_vec(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_tensors(tensors)
    }
}

/// Glorot-uniform weights (`bound = sqrt(6 / (fan_in + fan_out))`), zero biases.
///
/// Layer `i` contributes `layer{i}.weight` of shape `(fan_in, fan_out)` and
/// `layer{i}.bias` of shape `(fan_out)`.
pub fn init_params(spec: &ClassifierSpec, seed: u64) -> ParamSet {
    let mut rng = rng::rng(seed);
    let mut entries = Vec::new();
    for (i, (fan_in, fan_out)) in spec.layers().into_iter().enumerate() {
        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        entries.push((format!("layer{i}.weight"), Tensor::from_parts(vec![fan_in, fan_out], w)));
        entries.push((format!("layer{i}.bias"), Tensor::zeros(&[fan_out])));
    }
    ParamSet::new(entries)
}

/// `h @ w + b` with `b` broadcast over rows.
pub fn linear(g: &mut Graph, h: Var, w: Var, b: Var) -> Result<Var> {
    let hw = g.matmul(h, w)?;
    let rows = g.shape(hw)[0];
    let width = g.shape(b)[0];
    let b = g.reshape(b, &[1, width])?;
    let b = g.expand(b, &[rows, width])?;
    g.add(hw, b)
}

/// Logits of the MLP; `params` are the graph nodes of a [`ParamSet`] built
/// by [`init_params`] for `spec`.
pub fn forward(g: &mut Graph, spec: &ClassifierSpec, params: &[Var], inputs: Var) -> Result<Var> {
    let layers = spec.layers();
    if params.len() != 2 * layers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameter tensors for {} layers",
            params.len(),
            layers.len()
        )));
    }
    match g.shape(inputs) {
        [_, d] if *d == spec.input_dim => {}
        s => {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: s.to_vec(),
                rhs: vec![spec.input_dim],
            })
        }
    }
    let mut h = inputs;
    for (i, pair) in params.chunks(2).enumerate() {
        h = linear(g, h, pair[0], pair[1])?;
        if i + 1 < layers.len() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.row_mut(i)[l] = 1.0;
    }
    t
}

/// `Σ_i −log softmax(logits_i)[labels_i]`.
pub fn cross_entropy_sum(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = g.value(logits).dims2()?;
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    if rows != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_sum",
            lhs: vec![rows],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of {classes} classes")));
    }
    let logp = g.log_softmax(logits, 1)?;
    let mask = g.constant(one_hot(labels, classes));
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    g.neg(total)
}

/// Summed cross-entropy of `F(inputs; params)`.
pub fn batch_loss(
    g: &mut Graph,
    spec: &ClassifierSpec,
    params: &[Var],
    inputs: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = forward(g, spec, params, inputs)?;
    cross_entropy_sum(g, logits, labels)
}

/// Inputs of shape `(n, d)` with values in `[0, 1]` and labels in `[0, N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _) = inputs.dims2()?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if n != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "batch",
                lhs: vec![n],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Indices of samples labelled `class`, ascending.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Same labels, different inputs.
    pub fn with_inputs(&self, inputs: Tensor) -> Result<Self> {
        if inputs.shape() != self.inputs.shape() {
            return Err(Error::ShapeMismatch {
                op: "with_inputs",
                lhs: self.inputs.shape().to_vec(),
                rhs: inputs.shape().to_vec(),
            });
        }
        Ok(Self {
            inputs,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        })
    }
}

/// Accuracy and per-class recall. A class without samples has no recall.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: Vec<Option<f64>>,
}

pub fn metrics_from_logits(logits: &Tensor, labels: &[usize], num_classes: usize) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let pred = argmax_rows(logits)?;
    if pred.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: vec![pred.len()],
            rhs: vec![labels.len()],
        });
    }
    let mut hits = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&p, &l) in pred.iter().zip(labels) {
        counts[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(Metrics {
        accuracy: correct as f64 / labels.len() as f64,
        recall: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
    })
}

/// Metrics of `F(·; params)` on `batch`.
pub fn accuracy(spec: &ClassifierSpec, params: &ParamSet, batch: &LabeledBatch) -> Result<Metrics> {
    let mut g = Graph::new();
    let p = params.to_vars(&mut g, false);
    let x = g.constant(batch.inputs.clone());
    let logits = forward(&mut g, spec, &p, x)?;
    metrics_from_logits(g.value(logits), &batch.labels, batch.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ClassifierSpec {
        ClassifierSpec::new(4, vec![6], 3).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let s = spec();
        assert_eq!(init_params(&s, 7), init_params(&s, 7));
        assert_ne!(init_params(&s, 7), init_params(&s, 8));
        let p = init_params(&s, 7);
        assert!(p.get("layer1.bias").unwrap().data().iter().all(|&b| b == 0.0));
        let bound = libm::sqrt(6.0 / 10.0);
        assert!(p.get("layer0.weight").unwrap().data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn linear_classifier_has_two_tensors() {
        let s = ClassifierSpec::new(4, vec![], 3).unwrap();
        let p = init_params(&s, 1);
        assert_eq!(p.len(), 2);
        assert_eq!(p.get("layer0.weight").unwrap().shape(), &[4, 3]);
    }

    #[test]
    fn spec_validation() {
        assert!(ClassifierSpec::new(4, vec![], 1).is_err());
        assert!(ClassifierSpec::new(0, vec![], 2).is_err());
        assert!(ClassifierSpec::new(4, vec![0], 2).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let p = init_params(&spec(), 3);
        assert_eq!(p.unflatten(&p.flatten()).unwrap(), p);
        assert!(p.unflatten(&[0.0]).is_err());
    }

    #[test]
    fn zero_net_gives_uniform_logits() {
        let s = spec();
        let p = init_params(&s, 3);
        let zero = p.unflatten(&vec![0.0; p.numel()]).unwrap();
        let mut g = Graph::new();
        let vars = zero.to_vars(&mut g, false);
        let x = g.constant(Tensor::full(&[2, 4], 0.5));
        let logits = forward(&mut g, &s, &vars, x).unwrap();
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_input_selects_weight_row() {
        let s = ClassifierSpec::new(3, vec![], 2).unwrap();
        let w = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let mut g = Graph::new();
        let vars = [g.constant(w), g.constant(b)];
        let x = g.constant(one_hot(&[1], 3));
        let logits = forward(&mut g, &s, &vars, x).unwrap();
        assert_eq!(g.value(logits).data(), &[3.5, 3.5]);
    }

    #[test]
    fn uniform_logits_loss() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[25, 5]));
        let labels: Vec<usize> = (0..25).map(|i| i % 5).collect();
        let loss = cross_entropy_sum(&mut g, logits, &labels).unwrap();
        let expect = 25.0 * libm::log(5.0);
        assert!((g.value(loss).item().unwrap() - expect).abs() < 1e-12);
        assert!((expect - 40.236).abs() < 1e-3);
    }

    #[test]
    fn loss_shrinks_as_margin_grows() {
        let mut last = f64::INFINITY;
        for margin in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut g = Graph::new();
            let logits = g.constant(Tensor::from_rows(&[[margin, 0.0, 0.0], [0.0, margin, 0.0]]).unwrap());
            let l = cross_entropy_sum(&mut g, logits, &[0, 1]).unwrap();
            let l = g.value(l).item().unwrap();
            assert!(l > 0.0 && l < last);
            last = l;
        }
    }

    #[test]
    fn metrics() {
        let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let perfect = one_hot(&labels, 5);
        let m = metrics_from_logits(&perfect, &labels, 5).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.recall.iter().all(|r| *r == Some(1.0)));

        let all_zero = one_hot(&[0; 10], 5);
        let m = metrics_from_logits(&all_zero, &labels, 5).unwrap();
        assert!((m.accuracy - 0.2).abs() < 1e-15);
        assert_eq!(m.recall[0], Some(1.0));
        assert!(m.recall[1..].iter().all(|r| *r == Some(0.0)));

        // class 2 absent: recall undefined, not zero
        let m = metrics_from_logits(&one_hot(&[0, 1], 3), &[0, 1], 3).unwrap();
        assert_eq!(m.recall[2], None);

        // ties go to the lowest index: row [1,1,0] predicts 0, row [0,2,2] predicts 1
        let tied = Tensor::from_rows(&[[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]).unwrap();
        let m = metrics_from_logits(&tied, &[0, 2], 3).unwrap();
        assert_eq!(m.recall, vec![Some(1.0), None, Some(0.0)]);
        assert!(metrics_from_logits(&tied, &[], 3).is_err());
    }

    #[test]
    fn batch_validation() {
        assert!(LabeledBatch::new(Tensor::zeros(&[0, 2]), vec![], 2).is_err());
        assert!(LabeledBatch::new(Tensor::zeros(&[1, 2]), vec![2], 2).is_err());
        assert!(LabeledBatch::new(Tensor::zeros(&[2, 2]), vec![0], 2).is_err());
    }
}
