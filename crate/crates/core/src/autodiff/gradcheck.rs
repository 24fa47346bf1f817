//! Central finite-difference gradient checking.
//!
//! The numeric side re-runs the forward closure on perturbed copies of the
//! inputs and never touches any backward rule, so it is an independent
//! oracle for [`Tape::backward`].

use crate::error::Result;

use super::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for [`max_relative_error`]; keeps entries whose true
/// gradient is (numerically) zero from dividing by zero.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub max_rel_error: f64,
}

/// Checks a scalar function of leaf tensors.
pub struct GradCheck<F> {
    f: F,
    step: f64,
}

impl<F> GradCheck<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    pub fn new(f: F) -> Self {
        Self { f, step: DEFAULT_STEP }
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    fn eval(&self, inputs: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (self.f)(&mut tape, &vars)?;
        Ok(tape.value(out).values()[0])
    }

    pub fn run(&self, inputs: &[Tensor]) -> Result<GradCheckReport> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let out = (self.f)(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();

        let mut numeric = Vec::with_capacity(inputs.len());
        let mut work: Vec<Tensor> = inputs.to_vec();
        for which in 0..inputs.len() {
            let mut g = vec![0.0; inputs[which].numel()];
            for (i, gi) in g.iter_mut().enumerate() {
                let orig = work[which].values()[i];
                work[which].values_mut()[i] = orig + self.step;
                let up = self.eval(&work)?;
                work[which].values_mut()[i] = orig - self.step;
                let down = self.eval(&work)?;
                work[which].values_mut()[i] = orig;
                *gi = (up - down) / (2.0 * self.step);
            }
            numeric.push(g);
        }

        let max_rel_error = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| max_relative_error(a, n))
            .fold(0.0, f64::max);
        Ok(GradCheckReport {
            analytic,
            numeric,
            max_rel_error,
        })
    }
}

/// Checks the gradient of a scalar loss w.r.t. the listed parameters.
///
/// `f` builds the loss on a fresh tape from the current store values.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut scratch = store.clone();
    scratch.zero_grad();
    grads.accumulate_into(&mut scratch);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let p = scratch.get(id);
            p.grad().map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let out = f(&mut t, s)?;
        Ok(t.value(out).values()[0])
    };
    let mut work = store.clone();
    let mut numeric = Vec::with_capacity(ids.len());
    for &id in ids {
        let mut g = vec![0.0; store.get(id).numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work.get(id).values()[i];
            work.get_mut(id).values_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).values_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).values_mut()[i] = orig;
            *gi = (up - down) / (2.0 * step);
        }
        numeric.push(g);
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
    })
}
