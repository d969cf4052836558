use super::{Parameter, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients to central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, row, column) of the worst entry.
    pub worst_entry: Option<(usize, usize, usize)>,
    pub entries_checked: usize,
    /// Clamp entries sitting on or outside their interval while building the
    /// loss. Those entries use the zero-gradient convention, so differences
    /// straddling a boundary are expected to disagree.
    pub clamp_boundary_hits: usize,
}

impl GradCheckReport {
    pub fn clamp_flagged(&self) -> bool {
        self.clamp_boundary_hits > 0
    }
}

fn evaluate<F>(params: &[Parameter], build: &F) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| p.bind(&mut tape)).collect();
    let loss = build(&mut tape, &vars)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("gradient check: loss is {value}")));
    }
    Ok((tape, vars, loss))
}

/// Max over all parameter entries of
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-12)` with central differences
/// of step `h`. Parameter values are restored before returning.
pub fn check_gradients<F>(params: &mut [Parameter], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step {h} must be positive")));
    }
    let (tape, vars, loss) = evaluate(params, &build)?;
    let analytic = tape.grad(loss, &vars)?;
    let clamp_boundary_hits = tape.clamp_boundary_hits();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_entry: None,
        entries_checked: 0,
        clamp_boundary_hits,
    };
    for p in 0..params.len() {
        let (rows, cols) = params[p].shape();
        for r in 0..rows {
            for c in 0..cols {
                let original = params[p].value[[r, c]];
                params[p].value[[r, c]] = original + h;
                let plus = evaluate(params, &build).map(|(t, _, l)| t.scalar(l));
                params[p].value[[r, c]] = original - h;
                let minus = evaluate(params, &build).map(|(t, _, l)| t.scalar(l));
                params[p].value[[r, c]] = original;
                let fd = (plus? - minus?) / (2.0 * h);

                let a = analytic[p][[r, c]];
                let denom = a.abs().max(fd.abs()).max(1e-12);
                let rel = (a - fd).abs() / denom;
                report.entries_checked += 1;
                if rel > report.max_rel_error || report.worst_entry.is_none() {
                    report.max_rel_error = rel;
                    report.worst_entry = Some((p, r, c));
                }
            }
        }
    }
    Ok(report)
}
