use crate::error::{Error, Result};
use crate::ndgrad::{LeafMap, NodeId, ParamSet, Tape, Tensor};

/// Compare a tape gradient against central finite differences.
///
/// `build` must construct the scalar loss from scratch each call: it is
/// invoked once at the center point for the analytic gradient and twice
/// per parameter entry for the difference quotient, so anything it
/// solves internally (a transport plan, say) is re-solved at every
/// perturbed point. Returns the max over all parameter entries of
/// `|analytic - central| / max(1, |central|)`.
pub fn grad_check<F>(params: &ParamSet, eps: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &LeafMap) -> Result<NodeId>,
{
    if eps <= 0.0 || eps > 1e-2 {
        return Err(Error::Param(format!(
            "grad_check step must be in (0, 1e-2], got {eps}"
        )));
    }

    let mut tape = Tape::new();
    let leaves = params.leaves(&mut tape)?;
    let loss = build(&mut tape, &leaves)?;
    let analytic = tape.backward(loss)?;

    let eval = |p: &ParamSet, build: &mut F| -> Result<f64> {
        let mut t = Tape::new();
        let l = p.leaves(&mut t)?;
        let id = build(&mut t, &l)?;
        let v = t.value(id).item();
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite loss in grad_check".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in &names {
        let n = params.get(name).unwrap().numel();
        for idx in 0..n {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += eps;
            let f_plus = eval(&plus, &mut build)?;

            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= eps;
            let f_minus = eval(&minus, &mut build)?;

            let central = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic.get(name).unwrap().data()[idx];
            let rel = (a - central).abs() / central.abs().max(1.0);
            if !rel.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite difference quotient at {name}[{idx}]"
                )));
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Finite-difference gradient of an arbitrary scalar function of the
/// parameter set. Test oracle for paths that never touch a tape.
pub fn finite_difference_grad<F>(
    params: &ParamSet,
    name: &str,
    eps: f64,
    mut f: F,
) -> Result<Tensor>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let base = params
        .get(name)
        .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
    let mut out = Tensor::zeros(base.shape());
    for idx in 0..base.numel() {
        let mut plus = params.clone();
        plus.get_mut(name).unwrap().data_mut()[idx] += eps;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap().data_mut()[idx] -= eps;
        out.data_mut()[idx] = (f(&plus)? - f(&minus)?) / (2.0 * eps);
    }
    Ok(out)
}
