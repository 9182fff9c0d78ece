//! Central finite-difference verification of tape gradients.

use super::{Precision, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    pub precision: Precision,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-4,
            precision: Precision::Double,
            max_entries_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat entry, analytic, numeric)` at the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub entries_checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks the gradients of the scalar built by `f` with respect to `params`,
/// using `eps` and double precision.
pub fn finite_diff_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    GradCheck {
        eps,
        ..GradCheck::default()
    }
    .run(params, f)
}

impl GradCheck {
    pub fn run<F>(&self, params: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        assert!(self.eps > 0.0, "eps must be positive");
        let eval = |ps: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::with_precision(self.precision);
            let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
            let loss = f(&mut tape, &vars)?;
            Ok(tape.value(loss).item())
        };

        let mut tape = Tape::with_precision(self.precision);
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let first = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let second = eval(params)?;
        if first.to_bits() != second.to_bits() {
            return Err(Error::NonDeterministic { first, second });
        }

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            entries_checked: 0,
        };
        let mut work = params.to_vec();
        for (pi, var) in vars.iter().enumerate() {
            let analytic = grads.wrt(*var).values().to_vec();
            let n = analytic.len();
            let stride = match self.max_entries_per_param {
                Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
                _ => 1,
            };
            for e in (0..n).step_by(stride) {
                let orig = work[pi].values()[e];
                work[pi].values_mut()[e] = orig + self.eps;
                let plus = eval(&work)?;
                work[pi].values_mut()[e] = orig - self.eps;
                let minus = eval(&work)?;
                work[pi].values_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let err = relative_error(analytic[e], numeric);
                report.entries_checked += 1;
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((pi, e, analytic[e], numeric));
                }
            }
        }
        Ok(report)
    }
}
