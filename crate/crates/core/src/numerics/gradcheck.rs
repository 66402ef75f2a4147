use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
    pub pass: bool,
}

const REL_FLOOR: f64 = 1e-8;

/// Checks `f`'s tape gradient against `(f(p+h) − f(p−h)) / 2h` at every
/// coordinate of every parameter.
///
/// `f` receives a fresh tape and the parameters registered on it, and must
/// return a scalar. Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check<F>(params: &[Tensor], h: f64, tol: f64, f: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("step h must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    check_finite(tape.value(loss).item()?)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|p| t.param(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        check_finite(t.value(out).item()?)
    };

    let mut probe = params.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        pass: true,
    };
    for pi in 0..params.len() {
        for c in 0..params[pi].numel() {
            let orig = params[pi].data()[c];
            probe[pi].data_mut()[c] = orig + h;
            let up = eval(&probe)?;
            probe[pi].data_mut()[c] = orig - h;
            let down = eval(&probe)?;
            probe[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, c);
            }
            report.checked += 1;
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite objective {v}")))
    }
}
