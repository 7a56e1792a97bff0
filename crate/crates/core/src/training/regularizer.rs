//! Equal-output constraint on the classification layer.
//!
//! For a batch `x_1..x_N` entering the classification layer `W: [n_emb, C]`,
//! every column is held at the common L1 norm `tau = N / (C * ||sum_i x_i||_1)`,
//! so no class can dominate the summed outputs of the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum RegularizerMode {
    /// Rescale columns onto the constraint after every optimizer step.
    Projection,
    /// The forward pass already uses weights on the constraint for the
    /// current batch, `W^c = tau(x) V^c / ||V^c||_1`, with gradients flowing
    /// through `tau` into the network; the optimizer updates the free `V`.
    /// After the step the stored weights are projected as in `Projection`.
    Reparameterized,
    /// Add `weight * sum_c (||W^c||_1 - tau)^2` to the loss instead.
    Penalty { weight: f64 },
}

/// Where the batch statistic `||sum_i x_i||_1 / N` comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum TauSource {
    CurrentBatch,
    /// Exponential moving average over batches.
    RunningAverage { momentum: f64 },
}

/// Result of one projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionOutcome {
    /// `None` when the batch sum was zero and the step was skipped.
    pub tau: Option<f64>,
    /// Columns that were all-zero and could not be rescaled.
    pub zero_columns: Vec<usize>,
}

impl ProjectionOutcome {
    pub fn incidents(&self) -> usize {
        usize::from(self.tau.is_none()) + self.zero_columns.len()
    }
}

/// `||sum_i x_i||_1` of a batch of equal-length vectors.
pub fn batch_sum_l1(batch: &[Vec<f64>]) -> f64 {
    let d = batch.first().map_or(0, Vec::len);
    (0..d).map(|j| batch.iter().map(|x| x[j]).sum::<f64>().abs()).sum()
}

/// `N / (C * ||sum_i x_i||_1)`, or `None` if the sum vanishes.
pub fn equi_output_tau(batch: &[Vec<f64>], classes: usize) -> Option<f64> {
    let s = batch_sum_l1(batch);
    (s > 0.0 && s.is_finite()).then(|| batch.len() as f64 / (classes as f64 * s))
}

pub fn column_l1_norms(w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols)
        .map(|c| (0..rows).map(|r| w.data()[r * cols + c].abs()).sum())
        .collect()
}

fn check_shape(w: &Tensor) -> Result<()> {
    if w.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: w.shape().to_vec(),
            reason: "classification weights must be [n_emb, classes]".into(),
        });
    }
    Ok(())
}

/// Rescales each column of `w` to L1 norm `tau`.
pub fn project_columns(w: &mut Tensor, tau: f64) -> Result<Vec<usize>> {
    check_shape(w)?;
    let cols = w.shape()[1];
    let norms = column_l1_norms(w);
    let mut zero = Vec::new();
    for (c, &n) in norms.iter().enumerate() {
        if n == 0.0 {
            log::warn!("classification column {c} is zero; left unscaled");
            zero.push(c);
            continue;
        }
        let s = tau / n;
        for v in w.data_mut().iter_mut().skip(c).step_by(cols) {
            *v *= s;
        }
    }
    Ok(zero)
}

/// Projects `w` onto the equal-output constraint for `batch`.
pub fn equi_output_projection(w: &mut Tensor, batch: &[Vec<f64>]) -> Result<ProjectionOutcome> {
    check_shape(w)?;
    if batch.iter().any(|x| x.len() != w.shape()[0]) {
        return Err(Error::invalid("batch vectors must match the classification layer input"));
    }
    let Some(tau) = equi_output_tau(batch, w.shape()[1]) else {
        log::warn!("batch input sums to zero; projection skipped");
        return Ok(ProjectionOutcome {
            tau: None,
            zero_columns: Vec::new(),
        });
    };
    let zero_columns = project_columns(w, tau)?;
    Ok(ProjectionOutcome {
        tau: Some(tau),
        zero_columns,
    })
}

/// Gradient with respect to the shadow `v` of `w = tau * v^c / ||v^c||_1`
/// (column-wise), given the gradient with respect to `w`.
pub fn shadow_gradient(v: &Tensor, grad_w: &[f64], tau: f64) -> Vec<f64> {
    let cols = v.shape()[1];
    let rows = v.shape()[0];
    let norms = column_l1_norms(v);
    let mut out = vec![0.0; grad_w.len()];
    for c in 0..cols {
        let s = norms[c];
        if s == 0.0 {
            continue;
        }
        let dot: f64 = (0..rows).map(|r| grad_w[r * cols + c] * v.data()[r * cols + c]).sum();
        for r in 0..rows {
            let i = r * cols + c;
            out[i] = tau / s * (grad_w[i] - v.data()[i].signum() * dot / s);
        }
    }
    out
}

/// Value and gradient of `weight * sum_c (||W^c||_1 - tau)^2`, with `tau`
/// held constant.
pub fn equi_output_penalty(w: &Tensor, tau: f64, weight: f64) -> (f64, Vec<f64>) {
    let cols = w.shape()[1];
    let norms = column_l1_norms(w);
    let value = weight * norms.iter().map(|n| (n - tau).powi(2)).sum::<f64>();
    let grad = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = i % cols;
            2.0 * weight * (norms[c] - tau) * v.signum() * f64::from(u8::from(*v != 0.0))
        })
        .collect();
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        // N = 40 inputs whose sum has L1 norm 10: tau = 40 / (4 * 10) = 1.
        let mut batch = vec![vec![0.0, 0.0]; 40];
        batch[0] = vec![6.0, -4.0];
        assert_eq!(equi_output_tau(&batch, 4), Some(1.0));

        let mut w = Tensor::matrix(2, 4, vec![0.5, 2.0, 1.0, -3.0, -0.5, -2.0, 0.0, 1.0]).unwrap();
        let out = equi_output_projection(&mut w, &batch).unwrap();
        assert_eq!(out.tau, Some(1.0));
        assert_eq!(w.data()[0], 0.5);
        assert_eq!(w.data()[4], -0.5);
        assert_eq!((w.data()[1], w.data()[5]), (0.5, -0.5));
    }

    #[test]
    fn zero_sum_skips_and_zero_column_is_left() {
        let batch = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        let mut w = Tensor::matrix(2, 2, vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let before = w.clone();
        let out = equi_output_projection(&mut w, &batch).unwrap();
        assert_eq!(out.tau, None);
        assert_eq!(out.incidents(), 1);
        assert_eq!(w, before);

        let batch = vec![vec![1.0, 1.0]];
        let out = equi_output_projection(&mut w, &batch).unwrap();
        assert_eq!(out.zero_columns, vec![1]);
        assert_eq!(column_l1_norms(&w)[0], out.tau.unwrap());
        assert_eq!(w.data()[1], 0.0);
    }

    proptest! {
        #[test]
        fn projection_fixes_norms_and_directions(
            wdata in proptest::collection::vec(-2.0f64..2.0, 24),
            xs in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 6), 1..12),
        ) {
            let mut w = Tensor::matrix(6, 4, wdata).unwrap();
            let before = w.clone();
            let before_norms = column_l1_norms(&before);
            prop_assume!(before_norms.iter().all(|&n| n > 1e-6));
            let out = equi_output_projection(&mut w, &xs).unwrap();
            prop_assume!(out.tau.is_some());
            let tau = out.tau.unwrap();
            for (c, n) in column_l1_norms(&w).iter().enumerate() {
                prop_assert!((n - tau).abs() <= 1e-12 * tau.max(1.0));
                for r in 0..6 {
                    let a = before.data()[r * 4 + c] / before_norms[c];
                    let b = w.data()[r * 4 + c] / n;
                    prop_assert!((a - b).abs() < 1e-12);
                    // sign pattern preserved
                    prop_assert!(before.data()[r * 4 + c].signum() == w.data()[r * 4 + c].signum());
                }
            }
        }

        #[test]
        fn equal_norm_columns_scale_logits_uniformly(
            dirs in proptest::collection::vec(-1.0f64..1.0, 12),
            x in proptest::collection::vec(-1.0f64..1.0, 3),
            batch in proptest::collection::vec(proptest::collection::vec(0.1f64..2.0, 3), 1..8),
        ) {
            // Build columns with a shared L1 norm of 1.7.
            let mut w = Tensor::matrix(3, 4, dirs).unwrap();
            let norms = column_l1_norms(&w);
            prop_assume!(norms.iter().all(|&n| n > 1e-3));
            project_columns(&mut w, 1.7).unwrap();
            let logits = |w: &Tensor| -> Vec<f64> {
                (0..4).map(|c| (0..3).map(|r| x[r] * w.data()[r * 4 + c]).sum()).collect()
            };
            let before = logits(&w);
            let tau = equi_output_projection(&mut w, &batch).unwrap().tau.unwrap();
            let after = logits(&w);
            let k = tau / 1.7;
            for (a, b) in before.iter().zip(&after) {
                prop_assert!((a * k - b).abs() < 1e-10);
            }
            prop_assert_eq!(crate::model::argmax(&before), crate::model::argmax(&after));
        }
    }

    #[test]
    fn shadow_gradient_matches_finite_differences() {
        let v = Tensor::matrix(3, 2, vec![0.3, -0.2, -0.7, 0.4, 0.1, 0.9]).unwrap();
        let a = [0.5, -1.0, 2.0, 0.25, -0.75, 1.5];
        let f = |v: &Tensor| -> f64 {
            let mut w = v.clone();
            project_columns(&mut w, 0.8).unwrap();
            w.data().iter().zip(&a).map(|(x, y)| x * y).sum()
        };
        let g = shadow_gradient(&v, &a, 0.8);
        for i in 0..6 {
            let mut p = v.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = v.clone();
            m.data_mut()[i] -= 1e-6;
            assert!(((f(&p) - f(&m)) / 2e-6 - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let w = Tensor::matrix(3, 2, vec![0.3, -0.2, -0.7, 0.4, 0.1, 0.9]).unwrap();
        let (_, g) = equi_output_penalty(&w, 0.5, 2.0);
        for i in 0..6 {
            let mut p = w.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = w.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (equi_output_penalty(&p, 0.5, 2.0).0 - equi_output_penalty(&m, 0.5, 2.0).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }
}
