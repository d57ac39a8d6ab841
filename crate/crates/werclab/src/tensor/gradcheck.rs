//! Central finite-difference verification of tape gradients.
//!
//! The numeric side never touches the backward pass: it re-runs the
//! forward closure at perturbed inputs, so it stays an independent
//! oracle for whatever the tape computes.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error with a floor so that near-zero pairs compare cleanly.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Checks d(loss)/dx against central differences at the given coordinates
/// (all of them when `coords` is `None`).
///
/// `f` must rebuild the scalar loss from a fresh leaf on the given tape;
/// it runs 1 + 2*|coords| times.
pub fn grad_check<Builder>(
    f: &mut Builder,
    x: &Tensor<f64>,
    coords: Option<&[usize]>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    Builder: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x, true);
    let loss = f(&mut tape, leaf)?;
    if !tape.all_values_finite() {
        return Err(Error::NonFinite { context: "grad_check forward".into() });
    }
    tape.backward(loss)?;
    let analytic: Vec<f64> = tape
        .grad(leaf)
        .ok_or(Error::NonFinite { context: "grad_check: leaf has no grad".into() })?
        .to_vec();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { context: "grad_check backward".into() });
    }

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };

    let mut eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf_from(x.shape().to_vec(), data, false)?;
        let l = f(&mut t, v)?;
        let out = t.data(l)[0];
        if !out.is_finite() {
            return Err(Error::NonFinite { context: "grad_check numeric eval".into() });
        }
        Ok(out)
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, coords_checked: coords.len(), tol };
    for &i in coords {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let e = rel_err(analytic[i], numeric);
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((i, analytic[i], numeric));
        }
    }
    Ok(report)
}
