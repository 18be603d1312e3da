//! Central-difference verification of tape gradients.

use super::mat::Mat;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor used in the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over every checked entry.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(parameter, flat entry)` where `max_rel_err` was attained.
    pub worst: (usize, usize),
    pub entries: usize,
    pub analytic: Vec<Mat>,
    pub numeric: Vec<Mat>,
}

/// Relative error with the floor used throughout the crate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `eps`, for every entry of every parameter.
///
/// `f` receives a fresh tape and one parameter variable per entry of
/// `params`, and must return a `1×1` variable.
pub fn grad_check<F>(f: F, params: &[Mat], eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Param(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |ps: &[Mat]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).shape() != (1, 1) {
        return Err(Error::shape("grad_check", tape.value(out).shape(), (1, 1)));
    }
    let grads = tape.vjp(out, &Mat::scalar(1.0))?;
    let analytic: Vec<Mat> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();

    let mut work: Vec<Mat> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        entries: 0,
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    for pi in 0..params.len() {
        let mut num = Mat::zeros(params[pi].rows(), params[pi].cols());
        for e in 0..params[pi].len() {
            let x0 = params[pi].data()[e];
            work[pi].data_mut()[e] = x0 + eps;
            let fp = eval(&work)?;
            work[pi].data_mut()[e] = x0 - eps;
            let fm = eval(&work)?;
            work[pi].data_mut()[e] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::domain(
                    "grad_check",
                    format!("non-finite f at parameter {pi}, entry {e}"),
                ));
            }
            let n = (fp - fm) / (2.0 * eps);
            num.data_mut()[e] = n;
            let a = analytic[pi].data()[e];
            let r = rel_err(a, n);
            report.max_abs_err = report.max_abs_err.max((a - n).abs());
            if r > report.max_rel_err {
                report.max_rel_err = r;
                report.worst = (pi, e);
            }
            report.entries += 1;
        }
        numeric.push(num);
    }
    report.analytic = analytic;
    report.numeric = numeric;
    Ok(report)
}
