use super::{DiffError, Tape, Tensor, Var};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Largest relative error per leaf, in leaf order.
    pub per_leaf: Vec<f64>,
    pub max_rel_err: f64,
    pub rel_tol: f64,
    pub passed: bool,
}

fn evaluate<F, E>(f: &F, leaves: &[Tensor]) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<DiffError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = leaves.iter().map(|t| tape.param(t)).collect();
    let out = f(&tape, &vars)?;
    if out.numel() != 1 {
        return Err(DiffError::NonScalarLoss(out.shape()).into());
    }
    Ok(out.item())
}

fn central<F, E>(f: &F, leaves: &mut [Tensor], li: usize, i: usize, eps: f64) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<DiffError>,
{
    let orig = leaves[li].data()[i];
    leaves[li].data_mut()[i] = orig + eps;
    let plus = evaluate(f, leaves);
    leaves[li].data_mut()[i] = orig - eps;
    let minus = evaluate(f, leaves);
    leaves[li].data_mut()[i] = orig;
    Ok((plus? - minus?) / (2.0 * eps))
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// finite differences.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, floor)`
/// where `floor = 1e-6 · max(1, |f|)`, so coordinates whose true gradient is
/// zero are judged on an absolute scale. A coordinate that fails at `eps` is
/// retried at `eps/10` and `eps/100` and keeps the smallest error: a step
/// that straddles a relu or hinge kink is a property of the probe, not of
/// the gradient.
pub fn gradcheck<F, E>(f: F, leaves: &[Tensor], eps: f64, rel_tol: f64) -> Result<GradReport, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<DiffError>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(DiffError::InvalidArgument {
            op: "gradcheck",
            reason: format!("eps must be positive, got {eps}"),
        }
        .into());
    }
    let first = evaluate(&f, leaves)?;
    let second = evaluate(&f, leaves)?;
    if first.to_bits() != second.to_bits() {
        return Err(DiffError::NonDeterministic { first, second }.into());
    }

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = leaves.iter().map(|t| tape.param(t)).collect();
        let out = f(&tape, &vars)?;
        if out.numel() != 1 {
            return Err(DiffError::NonScalarLoss(out.shape()).into());
        }
        tape.backward(out)?;
        vars.iter()
            .zip(leaves)
            .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    };

    let floor = 1e-6 * first.abs().max(1.0);
    let rel = |a: f64, n: f64| {
        let diff = (a - n).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / a.abs().max(n.abs()).max(floor)
        }
    };

    let mut work = leaves.to_vec();
    let mut per_leaf = Vec::with_capacity(leaves.len());
    for li in 0..work.len() {
        let mut worst: f64 = 0.0;
        for i in 0..work[li].numel() {
            let a = analytic[li][i];
            let mut err = rel(a, central(&f, &mut work, li, i, eps)?);
            let mut step = eps;
            for _ in 0..2 {
                if err <= rel_tol {
                    break;
                }
                step /= 10.0;
                err = err.min(rel(a, central(&f, &mut work, li, i, step)?));
            }
            worst = worst.max(err);
        }
        per_leaf.push(worst);
    }
    let max_rel_err = per_leaf.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        per_leaf,
        max_rel_err,
        rel_tol,
        passed: max_rel_err <= rel_tol,
    })
}
