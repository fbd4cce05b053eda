use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter. Gradients are checked
/// for finiteness before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    names: &[String],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(TrainError::Config(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                names[i],
                g.shape(),
                params[i].shape()
            )));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(names[i].clone()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let bc1 = T::of(1.0 - cfg.beta1.powf(t));
    let bc2 = T::of(1.0 - cfg.beta2.powf(t));
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &names(1), &[Tensor::zeros(&[3])], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::<f64>::zeros(&[3])];
        let g = Tensor::from_f64(&[3], &[0.7, -3.0, 1e-2]).unwrap();
        let mut st = OptimizerState::new(&p);
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        adam_step(&mut p, &names(1), std::slice::from_ref(&g), &mut st, &cfg).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        for (w, gv) in p[0].data().iter().zip(g.data()) {
            let want = -0.01 * gv / (gv.abs() + 1e-8);
            assert!((w - want).abs() < 1e-12);
            assert!((w + 0.01 * gv.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_converges() {
        // Scalar simulation of the update on ½θ², written out independently.
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = th;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        let mut p = vec![Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap()];
        let mut st = OptimizerState::new(&p);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        for _ in 0..100 {
            let g = p[0].clone();
            adam_step(&mut p, &names(1), &[g], &mut st, &cfg).unwrap();
        }
        assert!((p[0].item() - th).abs() < 1e-12);
        assert!(p[0].item().abs() < 0.05, "theta = {}", p[0].item());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = OptimizerState::new(&p);
        let g = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        let err = adam_step(&mut p, &["w".to_string()], &[g], &mut st, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(st.step, 0);
    }
}
