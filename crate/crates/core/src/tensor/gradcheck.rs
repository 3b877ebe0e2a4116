use super::{Parameters, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding do not blow the ratio up.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_scalar<P, F>(params: &P, build: &mut F) -> Result<(Tape, Var)>
where
    F: FnMut(&mut Tape, &P) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, params)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar output, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok((tape, out))
}

fn nudge<P: Parameters>(params: &mut P, which: usize, elem: usize, value: f64) {
    let mut i = 0;
    params.visit_mut(&mut |_, p| {
        if i == which {
            p.data_mut()[elem] = value;
        }
        i += 1;
    });
}

/// Compares reverse-mode gradients of `build` against central differences
/// with step `h`, over every element of every parameter that requires
/// gradients. `build` must produce the same graph on every call.
pub fn grad_check<P, F>(params: &mut P, mut build: F, h: f64) -> Result<GradCheckReport>
where
    P: Parameters,
    F: FnMut(&mut Tape, &P) -> Result<Var>,
{
    let (tape, out) = eval_scalar(params, &mut build)?;
    let grads = tape.backward(out)?;
    let mut analytic = Vec::new();
    params.visit(&mut |name, p| {
        let g = grads.wrt(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
        analytic.push((name.to_string(), p.requires_grad(), p.data().to_vec(), g));
    });
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (which, (name, requires_grad, values, g)) in analytic.iter().enumerate() {
        if !requires_grad {
            continue;
        }
        for (elem, &orig) in values.iter().enumerate() {
            nudge(params, which, elem, orig + h);
            let (t, o) = eval_scalar(params, &mut build)?;
            let plus = t.value(o)[0];
            nudge(params, which, elem, orig - h);
            let (t, o) = eval_scalar(params, &mut build)?;
            let minus = t.value(o)[0];
            nudge(params, which, elem, orig);

            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(g[elem], numeric);
            report.max_abs_err = report.max_abs_err.max((g[elem] - numeric).abs());
            if rel > report.max_rel_err || report.checked == 0 {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = elem;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
