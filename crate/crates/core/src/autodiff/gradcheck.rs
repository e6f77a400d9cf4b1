//! Central finite-difference gradient checking.

use crate::autodiff::nn::{Bound, ParamId, ParamSet};
use crate::autodiff::optim::ParamGrads;
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Denominator floor of the relative error, so gradients that are zero in
/// both routes do not divide by zero.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    /// Names of parameters whose worst entry reaches `tol`.
    pub fn failing(&self, tol: f64) -> Vec<&str> {
        self.per_param
            .iter()
            .filter(|p| p.max_rel_error >= tol)
            .map(|p| p.name.as_str())
            .collect()
    }
}

/// Analytic gradients of `f` at `params`.
pub fn analytic_grads<T, F>(params: &ParamSet<T>, f: &F) -> Result<(f64, ParamGrads<T>)>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamSet<T>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, params, &bound)?;
    let value = tape.value(loss).item().to_f64_lossy();
    let grads = tape.backward(loss)?;
    Ok((value, ParamGrads::collect(params, &bound, &grads)))
}

/// Compares `analytic` against `(f(p+h) − f(p−h)) / 2h` for every trainable scalar.
pub fn compare_with_finite_differences<T, F>(
    params: &ParamSet<T>,
    analytic: &ParamGrads<T>,
    h: f64,
    f: &F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamSet<T>, &Bound) -> Result<Var>,
{
    let eval = |p: &ParamSet<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let loss = f(&mut tape, p, &bound)?;
        let v = tape.value(loss).item().to_f64_lossy();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "loss during gradient check".into(),
                example: "-".into(),
                norms: String::new(),
            });
        }
        Ok(v)
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        per_param: Vec::new(),
    };
    let ids: Vec<ParamId> = params.trainable_ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let mut pc = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + T::lit(h);
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - T::lit(h);
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i].to_f64_lossy());
            if !a.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("analytic gradient of {name}[{i}]"),
                    example: "-".into(),
                    norms: String::new(),
                });
            }
            let e = relative_error(a, numeric);
            report.checked += 1;
            if e > pc.max_rel_error {
                pc.max_rel_error = e;
                pc.worst_index = i;
            }
            if report.worst.is_none() || e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = Some((name.clone(), i));
            }
        }
        report.per_param.push(pc);
    }
    Ok(report)
}

/// Full check: analytic gradients by backward, then finite differences.
pub fn grad_check<T, F>(params: &ParamSet<T>, h: f64, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamSet<T>, &Bound) -> Result<Var>,
{
    let (_, analytic) = analytic_grads(params, &f)?;
    compare_with_finite_differences(params, &analytic, h, &f)
}
