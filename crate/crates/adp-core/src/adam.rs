//! Adam optimizer with bias correction.

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Completed steps (bias-correction exponent).
    pub t: u64,
    /// Steps skipped because a gradient was non-finite.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            skipped: 0,
        }
    }
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn new(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamParams {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// One Adam update for a single parameter tensor.
///
/// A non-finite gradient skips the whole tensor's step and increments
/// `state.skipped`; moments and parameters stay untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hp: &AdamParams) {
    assert_eq!(params.len(), grads.len(), "params/grads misaligned");
    assert_eq!(params.len(), state.m.len(), "params/state misaligned");
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return;
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * grads[i];
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged_from_zero_state() {
        let hp = AdamParams::new(1e-3);
        let mut p = vec![0.5, -0.25];
        let mut st = AdamState::new(2);
        for _ in 0..50 {
            adam_step(&mut p, &[0.0, 0.0], &mut st, &hp);
        }
        assert_eq!(p, vec![0.5, -0.25]);
    }

    #[test]
    fn zero_gradient_decays_existing_moments_toward_zero() {
        let hp = AdamParams::new(1e-3);
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        st.m = vec![1.0];
        st.v = vec![1.0];
        for _ in 0..200 {
            adam_step(&mut p, &[0.0], &mut st, &hp);
        }
        assert!(st.m[0] < 1e-6 && st.v[0] < 0.9);
    }

    #[test]
    fn first_step_from_zero_state_is_minus_lr() {
        // g = 1, lr = 1e-3, defaults: bias-corrected update is −lr/(1+ε·√v̂⁻¹) ≈ −1e-3
        let hp = AdamParams::new(1e-3);
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, &hp);
        assert!((p[0] + 1e-3).abs() < 1e-9, "got {}", p[0]);
    }

    #[test]
    fn constant_gradient_update_approaches_lr_sign() {
        let hp = AdamParams::new(1e-3);
        let g = [3.7, -0.02];
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        let mut last = p.clone();
        let mut delta = [0.0; 2];
        for _ in 0..5000 {
            adam_step(&mut p, &g, &mut st, &hp);
            delta = [p[0] - last[0], p[1] - last[1]];
            last = p.clone();
        }
        for (d, gi) in delta.iter().zip(&g) {
            assert!((d + hp.lr * gi.signum()).abs() < 1e-6, "delta {d}");
        }
    }

    #[test]
    fn non_finite_gradient_skips_tensor_and_counts() {
        let hp = AdamParams::new(1e-3);
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[f64::NAN], &mut st, &hp);
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.skipped, 1);
        assert_eq!(st.t, 0);
    }
}
