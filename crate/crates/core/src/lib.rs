//! Numerical core for poisoning attacks on few-shot meta-learners.
//!
//! * [`autodiff`]: dense tensors with reverse-mode AD, including
//!   gradients of gradients.
//! * [`model`]: MLP classifiers, parameter sets and the summed
//!   cross-entropy loss.
//! * [`learner`]: MAML, prototype and attention-sequence meta-learners
//!   behind one adapt/predict interface, plus episodic meta-training.
//! * [`attack`]: the threat model, signed-gradient PGD on a chosen sample
//!   set, greedy set selection, and the random baselines.
//! * [`tasks`]: N-way K-shot episode generation.
//! * [`gradcheck`]: finite-difference checks of all of the above.
//!
//! The crate is `no_std` and only needs `alloc`.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attack;
pub mod autodiff;
pub mod gradcheck;
mod error;
pub mod learner;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tasks;
mod tensor;

pub use autodiff::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
