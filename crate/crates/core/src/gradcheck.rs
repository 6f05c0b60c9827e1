//! Central finite-difference gradient checks in 64-bit precision.

use alloc::vec::Vec;
use core::fmt;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Lower bound of the relative-error denominator, so entries whose true
    /// gradient is ~0 are compared in absolute terms.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_per_input: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstElement {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<WorstElement>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max rel err {:.3e} over {} elements (tol {:.1e})",
            self.max_rel_err, self.checked, self.tol
        )?;
        if let Some(w) = self.worst {
            write!(
                f,
                "; worst: input {} element {} analytic {:.9e} numeric {:.9e}",
                w.input, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

fn eval<Fun>(f: &Fun, inputs: &[Tensor<f64>]) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the tape gradient of the scalar function `f` with respect to
/// every input against central differences.
pub fn grad_check<Fun>(
    f: Fun,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
        tol: opts.tol,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, v) in vars.iter().enumerate() {
        let n = inputs[ii].numel();
        let zeros = Tensor::zeros(inputs[ii].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros);
        let stride = match opts.max_per_input {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = inputs[ii].data()[idx];
            probe[ii].data_mut()[idx] = orig + opts.eps;
            let plus = eval(&f, &probe)?;
            probe[ii].data_mut()[idx] = orig - opts.eps;
            let minus = eval(&f, &probe)?;
            probe[ii].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(WorstElement {
                    input: ii,
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
