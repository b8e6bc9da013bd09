//! AdamW with decoupled weight decay and the poly schedule.

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `base_lr · (1 − iter/total)^power`, zero once `iter ≥ total`.
pub fn poly_lr(iter: usize, total: usize, base_lr: f64, power: f64) -> f64 {
    if total == 0 || iter >= total {
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / total as f64).powf(power)
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        Self {
            step: 0,
            m: params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
            v: params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }
}

/// One AdamW step. `lr_scale[i]` multiplies the learning rate of parameter
/// `i` (both for the Adam update and the decay).
pub fn adamw_step(
    params: &mut Params,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    lr_scale: &[f64],
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || lr_scale.len() != params.len() {
        return Err(Error::Input(format!(
            "{} gradients, {} moments and {} scales for {} parameters",
            grads.len(),
            state.m.len(),
            lr_scale.len(),
            params.len()
        )));
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for (name, (g, p)) in names.iter().zip(grads.iter().zip(params.tensors())) {
        if g.shape() != p.shape() {
            return Err(Error::shape("adamw_step", format!("{name}: gradient {:?} vs {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.tensors_mut().enumerate() {
        let lr_i = lr * lr_scale[i];
        let decay = 1.0 - lr_i * weight_decay;
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *x = *x * decay - lr_i * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Params {
        let mut p = Params::new();
        p.insert("p", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 100, 1e-4, 0.9), 1e-4);
        assert_eq!(poly_lr(100, 100, 1e-4, 0.9), 0.0);
        assert_eq!(poly_lr(150, 100, 1e-4, 0.9), 0.0);
        let half = poly_lr(50, 100, 1.0, 0.9);
        assert!((half - 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((half - 0.5359).abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = scalar(0.7);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut s, 0.1, 0.0, &[1.0]).unwrap();
        assert_eq!(p.get("p").unwrap().item().unwrap(), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 0.1, 0.0, &[1.0]).unwrap();
        // m̂ = v̂ = 1, so the update is lr / (1 + ε)
        let expect = 1.0 - 0.1 / (1.0 + ADAM_EPS);
        assert!((p.get("p").unwrap().item().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_scales_parameters() {
        let mut p = scalar(2.0);
        let mut s = OptimizerState::new(&p);
        for k in 1..=3 {
            adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut s, 0.1, 0.5, &[1.0]).unwrap();
            assert!((p.get("p").unwrap().item().unwrap() - 2.0 * 0.95f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(&p);
        let err = adamw_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, 0.1, 0.0, &[1.0]).unwrap_err();
        assert!(err.to_string().contains("gradient of p"), "{err}");
        assert_eq!(s.step, 0);
    }
}
