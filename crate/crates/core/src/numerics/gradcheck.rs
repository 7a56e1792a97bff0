use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale; otherwise
/// round-off in the central difference dominates the relative error.
const MAGNITUDE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    /// Coordinates whose error exceeded the tolerance.
    pub failures: Vec<(usize, usize, f64)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares tape gradients of a scalar function against central differences
/// `(f(x+e) - f(x-e)) / 2e` for every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        failures: Vec::new(),
        checked: 0,
        tolerance: tol,
    };
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_error(a.data()[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            if err > tol {
                report.failures.push((i, j, err));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_gradient() {
        let r = grad_check(
            |t, v| Ok(t.sum(v[0])),
            &[Tensor::vector(vec![0.3, -1.0, 2.0])],
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(r.passed());
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        assert_eq!(tape.backward(s).unwrap().wrt(v).data(), &[2.0, 4.0]);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn flags_a_wrong_gradient() {
        // At the leaky-rectifier kink the tape reports the left slope while the
        // central difference averages both sides.
        let r = grad_check(
            |t, v| {
                let a = t.leaky_relu(v[0], 0.01);
                Ok(t.sum(a))
            },
            &[Tensor::vector(vec![0.0, 1.0])],
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.worst, (0, 0));
    }
}
