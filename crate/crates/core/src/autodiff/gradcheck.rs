use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

/// Denominator floor for the relative error, so that components whose true
/// gradient is ~0 are judged on absolute error instead of amplified roundoff.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    /// `(param, flat index)` of the worst component.
    pub worst: (usize, usize),
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Var, Vec<Var>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let (r, c) = tape.dims(loss);
    ensure!(r == 1 && c == 1, Contract, "grad_check needs a scalar function");
    Ok((tape, loss, vars))
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h`. Passes iff the max relative error is below `tol`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    ensure!(
        (1e-7..=1e-3).contains(&h),
        Validation,
        "finite-difference step {h} outside [1e-7, 1e-3]"
    );

    let (mut tape, loss, vars) = eval(&f, params)?;
    let base = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let (tape2, loss2, _) = eval(&f, params)?;
    let again = tape2.value(loss2).item();
    if again.to_bits() != base.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_err = 0.0;
    let mut worst = (0, 0);
    for p in 0..params.len() {
        let mut pmax: f64 = 0.0;
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + h;
            let (t, l, _) = eval(&f, &work)?;
            let fp = t.value(l).item();
            work[p].data_mut()[k] = orig - h;
            let (t, l, _) = eval(&f, &work)?;
            let fm = t.value(l).item();
            work[p].data_mut()[k] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[p].data()[k], numeric);
            if err > max_err {
                max_err = err;
                worst = (p, k);
            }
            pmax = pmax.max(err);
        }
        per_param.push(pmax);
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_error: max_err,
        worst,
        tol,
        passed: max_err < tol,
    })
}
