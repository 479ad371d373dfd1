//! Adam with standard bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments matching the parameter layout, step counter 0.
    pub fn new(params: &[(&str, &Tensor)]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, elementwise over every parameter.
/// `grads` must align with `params`; non-finite gradient values abort with
/// the offending parameter's name.
pub fn adam_step(
    params: &mut [(&str, &mut Tensor)],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step arity mismatch: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::Shape(format!(
                "gradient for {} has {} elements, parameter has {}",
                name,
                g.len(),
                p.len()
            )));
        }
        if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!(
                "non-finite gradient value {} for parameter {}",
                bad, name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, gv) in g.data().iter().enumerate() {
            let gv = *gv as f64;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gv;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let upd = cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            p.data_mut()[j] = (p.data()[j] as f64 - upd) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(vec![3]);
        let mut state = AdamState::new(&[("p", &p)]);
        adam_step(
            &mut [("p", &mut p)],
            std::slice::from_ref(&g),
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(p.data(), before.data());
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_for_unit_gradient() {
        // bias correction makes the first update ~ lr * sign(g)
        let mut p = Tensor::scalar(1.0f32);
        let g = Tensor::scalar(1.0f32);
        let mut state = AdamState::new(&[("p", &p)]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut [("p", &mut p)], std::slice::from_ref(&g), &mut state, &cfg).unwrap();
        assert!(
            (p.item() - 0.9).abs() < 1e-6,
            "expected ~0.9, got {}",
            p.item()
        );
    }

    #[test]
    fn identical_tensors_stay_identical() {
        let mut a = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut b = a.clone();
        let g = Tensor::new(vec![4], vec![0.5, -0.2, 0.0, 1.0]).unwrap();
        let mut state = AdamState::new(&[("a", &a), ("b", &b)]);
        adam_step(
            &mut [("a", &mut a), ("b", &mut b)],
            &[g.clone(), g],
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::scalar(1.0f32);
        let g = Tensor::scalar(f32::NAN);
        let mut state = AdamState::new(&[("conv3.weight", &p)]);
        let err = adam_step(
            &mut [("conv3.weight", &mut p)],
            std::slice::from_ref(&g),
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap_err();
        match err {
            Error::Numerics(msg) => assert!(msg.contains("conv3.weight")),
            other => panic!("expected numerics error, got {:?}", other),
        }
    }
}
