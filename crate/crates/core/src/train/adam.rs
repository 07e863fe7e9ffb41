//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// First and second moments per parameter, in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = params.iter().map(|(_, p)| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One update of every parameter. Gradients are validated before anything
/// is modified, so a failed step leaves `params` and `state` untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    let one = T::one();
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x".into(), Tensor::new([v.len()], v.to_vec()).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = store(&[1.0, -2.0]);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &[Tensor::new([2], vec![3.0, -0.5]).unwrap()], &mut st, &cfg).unwrap();
        let x = p.get("x").unwrap().data();
        assert!((x[0] - 0.99).abs() < 1e-8 && (x[1] + 1.99).abs() < 1e-8, "{x:?}");
    }

    #[test]
    fn zero_gradient_keeps_params_and_counts_the_step() {
        let mut p = store(&[0.5]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros([1])], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[0.5]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = store(&[0.5]);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::full([1], f64::NAN)], &mut st, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("gradient of x"));
        assert_eq!(err.exit_code(), 3);
        assert_eq!(st.t, 0);
    }
}
