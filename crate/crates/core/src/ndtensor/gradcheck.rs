use super::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// max over entries of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_deviation: f64,
    /// (parameter index, flat entry) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(TensorError::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok(tape.value(out).item())
}

fn analytic<F>(f: &F, params: &[Tensor]) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect())
}

/// Checks every entry of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let entries: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    grad_check_entries(f, params, h, &entries)
}

/// Checks only the listed `(parameter, entry)` pairs.
pub fn grad_check_entries<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    entries: &[(usize, usize)],
) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let grads = analytic(&f, params)?;
    let mut report = GradCheck {
        max_deviation: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut work = params.to_vec();
    for &(i, j) in entries {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig - h;
        let minus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = grads[i][j];
        let dev = (a - numeric).abs() / a.abs().max(1.0);
        let dev = if dev.is_nan() { f64::INFINITY } else { dev };
        report.entries_checked += 1;
        if report.worst.is_none() || dev > report.max_deviation {
            report.max_deviation = dev;
            report.worst = Some((i, j));
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
