//! Finite-difference verification of tape gradients.
//!
//! The check perturbs each input coordinate by a central difference and
//! compares against the analytic gradient from `backward`. It is built for
//! f64; f32 round-off swamps the step size long before the comparison says
//! anything useful.

use crate::error::Result;
use crate::tape::{Graph, Var};
use crate::tensor::{rel_err, Scalar, Tensor};

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Coordinate count compared.
    pub checked: usize,
    /// Step used for the central difference.
    pub step: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare analytic and numeric gradients of a scalar-valued function.
///
/// `build` constructs the forward computation from the given inputs and
/// returns the scalar output; it is re-run once per perturbation, so it must
/// be deterministic given its inputs. Inputs become gradient-requiring
/// parameters.
pub fn grad_check<T, F>(inputs: &[Tensor<T>], step: f64, mut build: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![T::zero(); g.value(v).len()]))
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.len() {
            let base = input.values()[ci].to_f64();
            let plus = eval_perturbed(inputs, ti, ci, base + step, &mut build)?;
            let minus = eval_perturbed(inputs, ti, ci, base - step, &mut build)?;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = rel_err(analytic[ti][ci].to_f64(), numeric);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked, step })
}

fn eval_perturbed<T, F>(
    inputs: &[Tensor<T>],
    ti: usize,
    ci: usize,
    value: f64,
    build: &mut F,
) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if i == ti {
                let mut v = t.values().to_vec();
                v[ci] = T::from_f64(value);
                g.param(Tensor::from_raw(t.shape().to_vec(), v))
            } else {
                g.param(t.clone())
            }
        })
        .collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).item().to_f64())
}
