use super::{MaskedExample, Model};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_group: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Compares the analytic gradient of the joint loss with central finite
/// differences over every parameter.
///
/// The numeric estimate combines central differences at `eps` and `eps / 2`
/// (Richardson extrapolation), which cancels their `eps^2` truncation term.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; `floor` keeps
/// components whose true gradient is zero (dead attention rows, unused
/// embedding rows) from dividing round-off by round-off.
pub fn grad_check(model: &Model, batch: &[MaskedExample], lambda: f64, eps: f64) -> Result<GradCheckReport> {
    const FLOOR: f64 = 1e-5;
    let (_, analytic) = model.loss_and_grad(batch, lambda)?;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_group: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    let groups: Vec<(String, std::ops::Range<usize>)> =
        model.param_groups().map(|(n, r)| (n.to_string(), r)).collect();
    for (name, range) in groups {
        for i in range {
            let orig = probe.params[i];
            let mut central = |h: f64| -> Result<f64> {
                probe.params[i] = orig + h;
                let up = probe.loss_and_grad(batch, lambda)?.0.total;
                probe.params[i] = orig - h;
                let down = probe.loss_and_grad(batch, lambda)?.0.total;
                probe.params[i] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let coarse = central(eps)?;
            let fine = central(eps / 2.0)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_group = name.clone();
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
