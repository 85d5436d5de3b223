//! Central finite-difference checks against the tape's backward pass.

use super::array::DenseArray;
use super::params::ParamStore;
use super::tape::{Kernel, Tape, Var};
use crate::error::{Error, Result};

/// Relative error floor used in the denominator.
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let value = tape.value(v);
    let s = value
        .item()
        .ok_or_else(|| Error::Contract(format!("function must return a scalar, got {:?}", value.shape())))?;
    if !s.is_finite() {
        return Err(Error::Numeric { kernel: "gradcheck".into(), detail: "function value is not finite".into() });
    }
    Ok(s)
}

/// Max over coordinates of `|analytic − central| / max(|analytic|, |central|, 1e-8)`
/// for a scalar function of one array.
/// Fourth-order central difference of `f` at offset 0.
pub fn five_point(f: impl Fn(f64) -> Result<f64>, h: f64) -> Result<f64> {
    Ok(stencil(f, h)?.derivative)
}

#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub derivative: f64,
    /// False when the central differences at `h` and `2h` disagree, i.e. a
    /// kink (ReLU, clamp, max, selection change) lies within `2h`.
    pub smooth: bool,
}

pub fn stencil(f: impl Fn(f64) -> Result<f64>, h: f64) -> Result<Stencil> {
    let (m2, m1, p1, p2) = (f(-2.0 * h)?, f(-h)?, f(h)?, f(2.0 * h)?);
    let c1 = (p1 - m1) / (2.0 * h);
    let c2 = (p2 - m2) / (4.0 * h);
    let scale = [m2, m1, p1, p2].iter().fold(1.0f64, |a, v| a.max(v.abs()));
    Ok(Stencil {
        derivative: (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h),
        smooth: (c1 - c2).abs() <= 1e-6 * c1.abs().max(c2.abs()) + 16.0 * f64::EPSILON * scale / h,
    })
}

pub fn finite_difference_check<F>(f: F, point: &DenseArray, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_with(f, point, step, None)
}

/// As [`finite_difference_check`], optionally corrupting one kernel's
/// backward rule on the analytic tape.
pub fn finite_difference_check_with<F>(
    f: F,
    point: &DenseArray,
    step: f64,
    fault: Option<Kernel>,
) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape = tape.with_fault(k);
    }
    let x = tape.param("x", point.clone())?;
    let y = f(&mut tape, x)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get("x").expect("registered above");

    let eval = |p: DenseArray| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.param("x", p)?;
        let y = f(&mut t, x)?;
        scalar_of(&t, y)
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let central = five_point(
            |d| {
                let mut p = point.clone();
                p.data_mut()[i] += d;
                eval(p)
            },
            step,
        )?;
        worst = worst.max(relative_error(analytic.data()[i], central));
    }
    Ok(worst)
}

/// Result of checking selected scalar entries of a parameter store.
#[derive(Debug, Clone)]
pub struct EntryCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub smooth: bool,
}

/// Finite-difference check of a scalar loss built from `params`, restricted
/// to the listed `(parameter, flat index)` entries.
pub fn check_param_entries<F>(
    build: F,
    params: &ParamStore,
    entries: &[(String, usize)],
    step: f64,
) -> Result<Vec<EntryCheck>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_param_entries_with(build, params, entries, step, None)
}

/// As `check_param_entries`, with the analytic pass run on a tape whose
/// `fault` kernel has a corrupted backward rule.
pub fn check_param_entries_with<F>(
    build: F,
    params: &ParamStore,
    entries: &[(String, usize)],
    step: f64,
    fault: Option<Kernel>,
) -> Result<Vec<EntryCheck>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape = tape.with_fault(k);
    }
    let y = build(&mut tape, params)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let y = build(&mut t, p)?;
        scalar_of(&t, y)
    };
    let mut out = Vec::with_capacity(entries.len());
    for (name, index) in entries {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` was not bound by the loss")))?
            .data()
            .get(*index)
            .copied()
            .ok_or_else(|| Error::Contract(format!("index {index} out of range for `{name}`")))?;
        let st = stencil(
            |d| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[*index] += d;
                eval(&p)
            },
            step,
        )?;
        let numeric = st.derivative;
        out.push(EntryCheck {
            name: name.clone(),
            index: *index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
            smooth: st.smooth,
        });
    }
    Ok(out)
}
