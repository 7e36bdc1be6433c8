//! Central finite-difference verification of analytic gradients (f64 only).

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Round-off bound on a central difference of values near `f_scale`: `16·ε·|f| / h`.
fn difference_noise(f_scale: f64, eps: f64) -> f64 {
    16.0 * f64::EPSILON * f_scale.abs().max(1.0) / eps
}

/// [`relative_error`] after discounting disagreement the numeric estimate cannot resolve.
/// Without this, a gradient that is exactly zero (attention key biases) fails on noise alone.
fn resolved_error(analytic: f64, numeric: f64, noise: f64) -> f64 {
    let excess = ((analytic - numeric).abs() - noise).max(0.0);
    excess / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name of the worst coordinate's tensor (`input[i]` or a parameter name) and its flat index.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Fixed projection that turns a non-scalar output into a scalar.
fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.7 * i as f64 + 0.5).sin()).collect()
}

fn scalar_output<F>(f: &F, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<(Graph<f64>, Var, Vec<Var>)>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let mut out = f(&mut g, store, &vars)?;
    let n = g.value(out).numel();
    if n != 1 {
        out = g.weighted_sum(out, projection(n))?;
    }
    Ok((g, out, vars))
}

fn sample_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l < n => (0..l).map(|i| i * n / l).collect(),
        _ => (0..n).collect(),
    }
}

/// Max relative error between analytic and central-difference gradients of `op`
/// with respect to each of `inputs`.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    let wrapped = |g: &mut Graph<f64>, _: &ParamStore<f64>, v: &[Var]| op(g, v);
    Ok(grad_check_with_params(wrapped, &store, inputs, eps, None)?.max_rel_error)
}

/// Like [`grad_check`], but also checks every parameter the forward pass pulls from `store`.
/// `per_tensor` caps the number of (evenly spread) coordinates checked per tensor.
pub fn grad_check_with_params<F>(
    f: F,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    eps: f64,
    per_tensor: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let (g, out, vars) = scalar_output(&f, store, inputs)?;
    let grads = g.backward(out)?;
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let (g, out, _) = scalar_output(&f, store, inputs)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let noise = difference_noise(g.value(out).item(), eps);
    let mut note = |name: String, idx: usize, a: f64, n: f64| {
        let r = resolved_error(a, n, noise);
        report.coordinates += 1;
        if report.worst.is_none() || r > report.max_rel_error {
            report.max_rel_error = r;
            report.worst = Some((name, idx));
        }
    };

    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in sample_indices(inputs[k].numel(), per_tensor) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let num = (eval(store, &plus)? - eval(store, &minus)?) / (2.0 * eps);
            note(format!("input[{k}]"), i, analytic.data()[i], num);
        }
    }

    for (name, analytic) in g.param_grads(&grads) {
        let n = analytic.numel();
        for i in sample_indices(n, per_tensor) {
            let mut plus = store.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += eps;
            let mut minus = store.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= eps;
            let num = (eval(&plus, inputs)? - eval(&minus, inputs)?) / (2.0 * eps);
            note(name.clone(), i, analytic.data()[i], num);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_bound_is_far_below_real_errors() {
        let noise = difference_noise(10.0, DEFAULT_EPS);
        assert!(noise < 4e-9);
        assert!(resolved_error(1.0, 1.001, noise) > 9e-4);
        assert_eq!(resolved_error(0.0, noise / 2.0, noise), 0.0);
    }

    #[test]
    fn untracked_dependence_is_caught() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![0.3, -0.8]).unwrap());
        // the second use of `w` bypasses the tape, so its gradient contribution is missing
        let rep = grad_check_with_params(
            |g, st, v| {
                let w = g.param(st, "w")?;
                let hidden = st.get("w").unwrap().clone();
                let y = g.add(v[0], w)?;
                let y = g.add_const(y, &hidden)?;
                let y = g.relu(y);
                g.add_const(y, &hidden)
            },
            &store,
            &[Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()],
            DEFAULT_EPS,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error > 0.5, "{rep:?}");
        assert_eq!(rep.worst.unwrap().0, "w");
    }
}
