//! Central finite-difference oracle.
//!
//! Every differentiable module in the crate is validated against this check:
//! it never touches the tape's backward rules when computing the numeric
//! side, so the two routes stay independent.

use crate::error::{Error, Result};
use crate::params::{ParamNodes, ParamTree};
use crate::tape::{NodeId, Tape};

/// Compares analytic gradients of a scalar function against central finite
/// differences and returns the worst relative error
/// `|analytic - central| / (|central| + 1e-12)` over all coordinates.
///
/// `build` must construct the loss from the supplied parameter nodes using
/// tape primitives only, and must be deterministic; both properties are
/// checked (a double evaluation must agree bitwise, and anything outside the
/// primitive vocabulary is unbuildable — see [`Tape::apply_named`]).
pub fn finite_difference_check<F>(build: F, params: &ParamTree, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamNodes) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }

    let eval = |p: &ParamTree| -> Result<f64> {
        let mut tape = Tape::new();
        let nodes = p.load_onto(&mut tape, false);
        let loss = build(&mut tape, &nodes)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(Error::LossNotScalar(v.shape().to_vec()));
        }
        let value = v.scalar_value();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_check target".to_string(),
            });
        }
        Ok(value)
    };

    let base = eval(params)?;
    if eval(params)?.to_bits() != base.to_bits() {
        return Err(Error::InvalidArgument(
            "function is not deterministic; finite differences are meaningless".to_string(),
        ));
    }

    // Analytic side.
    let mut tape = Tape::new();
    let nodes = params.load_onto(&mut tape, true);
    let loss = build(&mut tape, &nodes)?;
    let grads = tape.backward(loss)?;
    let analytic = nodes.grads_by_name(&grads)?;

    // Numeric side: one working copy, perturbed coordinate by coordinate and
    // restored exactly.
    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let count = params.get(name)?.numel();
        let ga = analytic
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no analytic grad for `{name}`")))?
            .clone();
        for i in 0..count {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;

            let central = (plus - minus) / (2.0 * step);
            let rel = (ga.data()[i] - central).abs() / (central.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
