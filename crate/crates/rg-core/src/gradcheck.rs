//! Central-difference verification of tape gradients.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::param::ParamGroup;
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};

/// Relative error between an analytic and a numeric gradient element, with
/// denominator max(|analytic|, |numeric|, 1e-8).
pub fn relative_error(analytic: Real, numeric: Real) -> f64 {
    let a = analytic as f64;
    let n = numeric as f64;
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares analytic gradients against central finite differences
/// (f(θ+ε) − f(θ−ε)) / 2ε for every element of every trainable parameter.
/// Returns the maximum relative error.
///
/// `build` must record the same deterministic computation on every call and
/// return a scalar loss node.
pub fn finite_diff_check<G, F>(group: &mut G, epsilon: f64, mut build: F) -> Result<f64>
where
    G: ParamGroup,
    F: FnMut(&mut Tape, &G) -> Result<VarId>,
{
    if !(epsilon > 0.0) {
        return Err(CoreError::InvalidArgument(
            "finite_diff_check requires epsilon > 0".into(),
        ));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let loss = build(&mut tape, group)?;
    let loss_value = scalar_loss(&tape, loss)?;
    if !loss_value.is_finite() {
        return Err(CoreError::NonFinite("finite_diff_check loss".into()));
    }
    let grads = tape.backward(loss)?;
    let mut analytic: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, id) in tape.bindings() {
        if let Some(g) = grads.get(id) {
            analytic.insert(name.to_string(), g.clone());
        }
    }

    // Element-wise numeric pass over trainable parameters.
    let mut names: Vec<(String, usize)> = Vec::new();
    group.for_each(&mut |name, p| {
        if p.trainable {
            names.push((name.to_string(), p.value.numel()));
        }
    });

    let mut max_err = 0.0f64;
    for (name, numel) in names {
        let analytic_grad = analytic.get(&name).cloned();
        for i in 0..numel {
            let plus = eval_with_offset(group, &name, i, epsilon as Real, &mut build)?;
            let minus = eval_with_offset(group, &name, i, -(epsilon as Real), &mut build)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "finite_diff_check loss while perturbing `{name}`"
                )));
            }
            let numeric = ((plus - minus) as f64) / (2.0 * epsilon);
            let a = analytic_grad.as_ref().map_or(0.0, |g| g.data()[i]);
            max_err = max_err.max(relative_error(a, numeric as Real));
        }
    }
    Ok(max_err)
}

fn scalar_loss(tape: &Tape, loss: VarId) -> Result<Real> {
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(CoreError::InvalidArgument(format!(
            "finite_diff_check expects a scalar loss, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

fn eval_with_offset<G, F>(
    group: &mut G,
    name: &str,
    index: usize,
    delta: Real,
    build: &mut F,
) -> Result<Real>
where
    G: ParamGroup,
    F: FnMut(&mut Tape, &G) -> Result<VarId>,
{
    group.for_each_mut(&mut |n, p| {
        if n == name {
            p.value.data_mut()[index] += delta;
        }
    });
    let mut tape = Tape::new();
    let result = build(&mut tape, group).map(|loss| scalar_loss(&tape, loss));
    group.for_each_mut(&mut |n, p| {
        if n == name {
            p.value.data_mut()[index] -= delta;
        }
    });
    result?
}
