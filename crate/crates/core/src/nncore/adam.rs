use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the shared step counter.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: BTreeMap<String, Vec<T>>,
    pub second: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are left alone.
/// Any non-finite gradient aborts before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[(String, Tensor<T>)],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); g.numel()]);
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); g.numel()]);
        for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (T::one() - b1) * *gv;
            *vv = b2 * *vv + (T::one() - b2) * *gv * *gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new();
        let g = vec![("x".to_string(), Tensor::scalar(1.0))];
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        // mhat = 1, vhat = 1 → Δ = -lr / (1 + eps)
        let want = -1e-4 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = scalar_store(2.5);
        let mut st = AdamState::new();
        let g = vec![("x".to_string(), Tensor::scalar(0.0))];
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.get("x").unwrap().item(), 2.5);
    }

    #[test]
    fn minimizes_shifted_quadratic() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new();
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        for _ in 0..200 {
            let x = p.get("x").unwrap().item();
            let g = vec![("x".to_string(), Tensor::scalar(2.0 * (x - 3.0)))];
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        assert!((p.get("x").unwrap().item() - 3.0).abs() < 0.01);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_leaves_params() {
        let mut p = scalar_store(1.0);
        p.insert("y", Tensor::scalar(1.0));
        let mut st = AdamState::new();
        let g = vec![
            ("x".to_string(), Tensor::scalar(1.0)),
            ("y".to_string(), Tensor::scalar(f64::NAN)),
        ];
        let err = adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("y"));
        assert_eq!(p.get("x").unwrap().item(), 1.0);
        assert_eq!(st.step, 0);
    }
}
