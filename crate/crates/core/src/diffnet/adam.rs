use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update; gradients are zeroed afterwards.
///
/// Non-finite gradients leave the parameters untouched and report a divergence
/// naming the vector.
pub fn adam_step(params: &mut ParamVector, state: &mut AdamState) -> Result<()> {
    if params.grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            network: params.name.clone(),
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for i in 0..params.values.len() {
        let g = params.grads[i];
        let m = state.beta1 * params.m[i] + (1.0 - state.beta1) * g;
        let v = state.beta2 * params.v[i] + (1.0 - state.beta2) * g * g;
        params.m[i] = m;
        params.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params.values[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    params.zero_grads();
    Ok(())
}

/// Constant rate through `decay_start`, then linear decay reaching zero at
/// `epochs + 1`, so the last epoch still trains.
pub fn lr_schedule(epoch: usize, base_lr: f64, epochs: usize, decay_start: usize) -> f64 {
    let num = (epochs + 1).saturating_sub(epoch) as f64;
    let den = (epochs + 1 - decay_start.min(epochs)) as f64;
    base_lr * (num / den).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamVector::from_values("p", vec![0.0]);
        p.grads[0] = 1.0;
        let mut st = AdamState::new(0.1);
        adam_step(&mut p, &mut st).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        assert!((p.values[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(p.grads[0], 0.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = ParamVector::from_values("p", vec![0.3, -1.2]);
        let mut st = AdamState::new(0.1);
        adam_step(&mut p, &mut st).unwrap();
        assert_eq!(p.values, vec![0.3, -1.2]);
    }

    #[test]
    fn non_finite_grad_names_network() {
        let mut p = ParamVector::from_values("D_Y", vec![0.0]);
        p.grads[0] = f64::NAN;
        let err = adam_step(&mut p, &mut AdamState::new(0.1)).unwrap_err();
        assert!(err.to_string().contains("divergence detected"));
        assert!(err.to_string().contains("D_Y"));
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(25, 1e-4, 100, 50), 1e-4);
        assert_eq!(lr_schedule(50, 1e-4, 100, 50), 1e-4);
        let e75 = lr_schedule(75, 1e-4, 100, 50);
        assert!((e75 - 1e-4 * 26.0 / 51.0).abs() < 1e-18);
        assert!((e75 - 1e-4 * (1.0 - 25.0 / 51.0)).abs() < 1e-18);
        let last = lr_schedule(100, 1e-4, 100, 50);
        assert!(last > 0.0 && last <= 1e-4 / 50.0);
        assert_eq!(lr_schedule(101, 1e-4, 100, 50), 0.0);
    }
}
