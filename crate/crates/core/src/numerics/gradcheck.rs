use super::{Tape, Tensor, Var};
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor: errors are `|a - n| / max(|a|, |n|, abs_floor)`.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss)?.data()[0];
    let grads = tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

fn value_at<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant_ref(t)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss)?.data()[0])
}

/// Compares [`Tape::backward`] against central finite differences for
/// every element of every input of the scalar function `f`.
///
/// Only errors raised by `f` itself are returned as `Err`; gradient
/// disagreements are reported in the [`GradCheckReport`].
pub fn grad_check<F>(f: F, point: &[Tensor], config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = evaluate(&f, point)?;
    let mut inputs = point.to_vec();
    let mut params = Vec::with_capacity(point.len());
    for p in 0..inputs.len() {
        let mut check = ParamCheck {
            index: p,
            max_rel_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..inputs[p].len() {
            let original = inputs[p].data()[e];
            inputs[p].data_mut()[e] = original + config.step;
            let plus = value_at(&f, &inputs)?;
            inputs[p].data_mut()[e] = original - config.step;
            let minus = value_at(&f, &inputs)?;
            inputs[p].data_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[p].data()[e];
            let denom = a.abs().max(numeric.abs()).max(config.abs_floor);
            let err = (a - numeric).abs() / denom;
            if err > check.max_rel_error || e == 0 {
                check = ParamCheck {
                    index: p,
                    max_rel_error: err.max(check.max_rel_error),
                    worst_element: e,
                    analytic: a,
                    numeric,
                };
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        params,
        tolerance: config.tolerance,
    })
}
