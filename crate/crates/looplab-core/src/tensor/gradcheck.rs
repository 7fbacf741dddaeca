//! Central-finite-difference gradient checking.
//!
//! The checker re-evaluates the forward function at perturbed inputs, so it is
//! independent of the reverse-mode path it validates. Quadratic cost in input
//! size; intended for small test problems.

use super::{Graph, Result, Tensor, Var};

/// Compares the autodiff gradient of a scalar-valued `f` against central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`, elementwise over every input
/// marked `requires_grad`. Returns the worst relative error, with an absolute
/// floor of 1e-8 in the denominator.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "finite_diff_check needs eps > 0");

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    // Reverse-mode gradients at the unperturbed point.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let auto_grads: Vec<Option<Vec<f64>>> =
        vars.iter().map(|&v| g.grad(v).map(|s| s.to_vec())).collect();

    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let auto = auto_grads[which]
            .as_ref()
            .expect("requires_grad leaf has a gradient after backward");
        for coord in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut pd = plus[which].data().to_vec();
            let mut md = minus[which].data().to_vec();
            pd[coord] += eps;
            md[coord] -= eps;
            plus[which] = Tensor::new(plus[which].shape().to_vec(), pd)?.with_grad();
            minus[which] = Tensor::new(minus[which].shape().to_vec(), md)?.with_grad();
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let rel = (auto[coord] - fd).abs() / fd.abs().max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
