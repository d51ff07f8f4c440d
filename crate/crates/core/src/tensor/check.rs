use super::{Graph, Result, Tensor, Var};

/// Error between an analytic and a numeric derivative, relative to the larger
/// magnitude with a floor of one so near-zero gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest [`relative_error`] over coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), epsilon)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(epsilon > 0.0 && epsilon <= 1e-3, "epsilon must lie in (0, 1e-3]");

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut worst = 0.0f64;
    let mut probe = points.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..probe[t].len() {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + epsilon;
            let plus = eval(&probe)?;
            probe[t].data_mut()[i] = orig - epsilon;
            let minus = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
