//! Finite-difference validation of the reverse pass.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative-error floor in the denominator. Gradients that are exactly zero
/// (shift-invariant parameters, masked slots) come back from central
/// differences as rounding noise near `1e-10`, so the floor sits well above it.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of a scalar function against central
/// differences. Returns `max_i |analytic_i - numeric_i| / max(|analytic_i|,
/// |numeric_i|, REL_FLOOR)`.
pub fn gradient_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("gradient_check eps must be > 0, got {eps}")));
    }
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(t);
        let y = f(&mut g, x)?;
        let v = g.value(y);
        if v.numel() != 1 {
            return Err(Error::Dimension {
                op: "gradient_check",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = v.item();
        if !out.is_finite() {
            return Err(Error::Numerical(format!("non-finite function value {out}")));
        }
        Ok(out)
    };

    let mut g = Graph::new();
    let x = g.input(input.clone());
    let y = f(&mut g, x)?;
    if g.value(y).numel() != 1 {
        return Err(Error::Dimension {
            op: "gradient_check",
            lhs: g.value(y).shape().to_vec(),
            rhs: vec![],
        });
    }
    let analytic = g.backward(y)?.get_or_zeros(x, input.numel());
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite analytic gradient".to_string()));
    }

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// [`gradient_check`] with respect to one parameter of `store`; `f` receives a
/// graph that already has every parameter bound.
pub fn gradient_check_param<F>(
    f: F,
    store: &ParamStore<f64>,
    id: ParamId,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    gradient_check(
        |g, x| {
            g.bind_with_override(store, id, x);
            f(g)
        },
        store.get(id),
        eps,
    )
}
