//! Non-differentiable helpers used by the attack step and by metrics.
//! They act on plain [`Tensor`]s, never on graph nodes.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Elementwise sign with `sign(0) = 0`.
pub fn sign(x: &Tensor) -> Tensor {
    x.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Nearest point of the ℓ∞ ball of radius `epsilon` around `center`.
pub fn clip_to_ball(x: &Tensor, center: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "negative epsilon {epsilon}"
        )));
    }
    if x.shape() != center.shape() {
        return Err(Error::ShapeMismatch {
            op: "clip_to_ball",
            lhs: x.shape().to_vec(),
            rhs: center.shape().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(center.data())
        .map(|(&v, &c)| v.clamp(c - epsilon, c + epsilon))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub fn clip_to_range(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if !(lo <= hi) {
        return Err(Error::InvalidArgument(alloc::format!(
            "empty range [{lo}, {hi}]"
        )));
    }
    Ok(x.map(|v| v.clamp(lo, hi)))
}

/// Column index of each row's maximum; ties go to the lowest index.
pub fn argmax_rows(x: &Tensor) -> Result<Vec<usize>> {
    let (rows, cols) = x.dims2()?;
    if cols == 0 {
        return Err(Error::InvalidArgument("argmax over zero columns".into()));
    }
    Ok((0..rows)
        .map(|r| {
            let row = x.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
