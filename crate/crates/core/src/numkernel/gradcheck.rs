use super::tape::{Bound, Tape, Var};
use super::tensor::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Compares tape gradients of the scalar `f` with central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |numeric|)` over every
/// entry of every parameter.
pub fn grad_check<'a, F>(f: F, params: &ParamStore, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'a>, &Bound) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::arg(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let bound = tape.bind_owned(params.clone());
        let out = f(&mut tape, &bound)?;
        let value = tape.value(out);
        if value.numel() != 1 || !value.is_finite() {
            return Err(Error::Evaluation(format!("objective is not a finite scalar: {value:?}")));
        }
        tape.backward(out)?.to_store(&tape, &bound)
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind_owned(store.clone());
        let out = f(&mut tape, &bound)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut work = params.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let n = params.get(name)?.numel();
        for i in 0..n {
            let orig = params.get(name)?.data()[i];
            work.get_mut(name).expect("present").data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(name)?.data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
