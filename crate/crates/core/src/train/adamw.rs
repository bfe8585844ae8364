//! AdamW with decoupled weight decay and bias correction.

use crate::lgrt::Param;
use crate::real::{lit, Real};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn zeros(params: &[Param<T>]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| vec![T::ZERO; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![T::ZERO; p.value.len()]).collect(),
            step: 0,
        }
    }
}

/// One optimizer step over all parameters. `grads` is parallel to `params`.
/// Weight decay is applied multiplicatively before the Adam update.
pub fn adamw_step<T: Real>(
    params: &mut [Param<T>],
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
) {
    debug_assert_eq!(params.len(), grads.len());
    state.step += 1;
    let t = state.step as f64;
    let lr = lit::<T>(cfg.learning_rate);
    let b1 = lit::<T>(cfg.beta1);
    let b2 = lit::<T>(cfg.beta2);
    let one_m_b1 = T::ONE - b1;
    let one_m_b2 = T::ONE - b2;
    let eps = lit::<T>(cfg.eps);
    let bc1 = lit::<T>(1.0 - cfg.beta1.powf(t)).recip();
    let bc2 = lit::<T>(1.0 - cfg.beta2.powf(t)).recip();
    let decay = lit::<T>(1.0 - cfg.learning_rate * cfg.weight_decay);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.value.len() {
            let gi = g[i];
            p.value[i] *= decay;
            m[i] = b1 * m[i] + one_m_b1 * gi;
            v[i] = b2 * v[i] + one_m_b2 * gi * gi;
            let m_hat = m[i] * bc1;
            let v_hat = v[i] * bc2;
            p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(theta: f64) -> Vec<Param<f64>> {
        vec![Param {
            name: "theta".into(),
            shape: vec![1],
            value: vec![theta],
        }]
    }

    #[test]
    fn first_step_closed_form() {
        // θ=1, g=0.5, lr=1e-3, no decay → update ≈ −lr·g/(|g|+ε) → θ ≈ 0.999
        let mut params = one_param(1.0);
        let mut state = OptimizerState::zeros(&params);
        let cfg = AdamWConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut params, &[vec![0.5]], &mut state, &cfg);
        assert!((params[0].value[0] - 0.999).abs() < 1e-8);
    }

    #[test]
    fn zero_grads_zero_decay_leave_params() {
        let mut params = one_param(0.7);
        let mut state = OptimizerState::zeros(&params);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..3 {
            adamw_step(&mut params, &[vec![0.0]], &mut state, &cfg);
        }
        assert_eq!(params[0].value[0], 0.7);
    }

    #[test]
    fn three_steps_on_quadratic_match_reference() {
        // Independent reference loop computing the published formulas
        // directly; objective θ², so g = 2θ.
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.004,
        };
        let mut theta_ref = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut reference_track = Vec::new();
        for t in 1..=3u32 {
            let g = 2.0 * theta_ref;
            theta_ref *= 1.0 - cfg.learning_rate * cfg.weight_decay;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
            let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
            theta_ref -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            reference_track.push(theta_ref);
        }

        let mut params = one_param(1.0);
        let mut state = OptimizerState::zeros(&params);
        for want in reference_track {
            let g = 2.0 * params[0].value[0];
            adamw_step(&mut params, &[vec![g]], &mut state, &cfg);
            assert!(
                (params[0].value[0] - want).abs() < 1e-8,
                "{} vs {want}",
                params[0].value[0]
            );
        }
    }
}
