//! Central finite-difference gradient checking.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over inputs.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    /// Value of the function at the unperturbed inputs.
    pub value: f64,
}

/// Compares reverse-mode gradients of the scalar `f` against central finite
/// differences with step `1e-6`.
pub fn check_gradients(inputs: &[Tensor], f: impl Fn(&Graph, &[Var]) -> Var) -> GradCheckReport {
    check_gradients_with_step(inputs, 1e-6, f)
}

pub fn check_gradients_with_step(
    inputs: &[Tensor],
    step: f64,
    f: impl Fn(&Graph, &[Var]) -> Var,
) -> GradCheckReport {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars);
    let value = g.item(out);
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars);
        g.item(out)
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work);
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work);
            work[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let diff: f64 = a.data().iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        per_input.push(if denom < 1e-12 { diff } else { diff / denom });
    }
    let max_rel_error = per_input.iter().cloned().fold(0.0, f64::max);
    GradCheckReport { max_rel_error, per_input, value }
}
