//! Gradient verification against central finite differences.

use crate::error::{Error, Result};
use crate::tensor::params::{BoundParams, ParamStore};
use crate::tensor::tape::{NodeId, Tape};

/// Relative-error floor: differences below this magnitude are compared
/// absolutely, which keeps finite-difference noise on near-zero gradients
/// from registering as spurious failures.
const DENOM_FLOOR: f64 = 1e-3;

#[derive(Debug)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error over its elements)`.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compare the analytic gradient of `build`'s scalar output against central
/// finite differences with step `h`, for every parameter in `store`.
///
/// `build` must be deterministic (dropout disabled); this is verified by
/// evaluating the graph twice and demanding bitwise-equal losses.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, tol: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<NodeId>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = build(&mut tape, &bound)?;
        tape.value(loss).as_scalar()
    };

    let base = eval(store)?;
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "non-deterministic function under gradient check: {base} vs {again}"
        )));
    }

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar output, got {:?}",
            tape.value(loss).shape()
        )));
    }
    let grads = tape.backward(loss)?;

    let mut per_param = Vec::with_capacity(store.len());
    let mut overall: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let analytic = grads.get(bound.node(id)).cloned();
        let numel = store.get(id).numel();
        let mut worst: f64 = 0.0;
        for e in 0..numel {
            let orig = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[e] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[e]);
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        overall = overall.max(worst);
        per_param.push((name, worst));
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
        tol,
    })
}
