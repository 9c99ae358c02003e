use crate::{Graph, NumericsError, Result, Tensor, Var};

fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(NumericsError::Usage(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(NumericsError::Numeric(format!("function value is {v}")));
    }
    Ok(v)
}

/// Central finite differences of a scalar graph function, one coordinate at a time.
pub fn central_difference<F>(f: &F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut out = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Largest `|autodiff − central difference| / max(1, |central difference|)`
/// over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::Usage(format!("eps must be positive, got {eps}")));
    }
    evaluate(&f, x)?;
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    let grads = g.backward(out)?;
    let analytic = match grads.get(leaf) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; x.numel()],
    };
    let numeric = central_difference(&f, x, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}
