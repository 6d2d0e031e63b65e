//! Decoupled-weight-decay adaptive optimizer with separate encoder and
//! decoder learning rates, plus the linear warmup / linear decay schedule.

use crate::model::{Grads, ModelState, ParamGroup};
use crate::scalar::{s, Scalar};

pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step_count: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(state: &ModelState<T>) -> Self {
        AdamW {
            m: state.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            v: state.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. Weight decay is decoupled and applies to weights only,
    /// never biases.
    pub fn step(
        &mut self,
        state: &mut ModelState<T>,
        grads: &Grads<T>,
        lr_encoder: f64,
        lr_decoder: f64,
        weight_decay: f64,
    ) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let b1: T = s(self.beta1);
        let b2: T = s(self.beta2);
        let one_minus_b1: T = s(1.0 - self.beta1);
        let one_minus_b2: T = s(1.0 - self.beta2);
        let eps: T = s(self.eps);

        for (idx, param) in state.params.iter_mut().enumerate() {
            let lr = match param.group {
                ParamGroup::Encoder => lr_encoder,
                ParamGroup::Decoder => lr_decoder,
            };
            let lr_t: T = s(lr);
            let decay: T = if param.is_bias {
                T::zero()
            } else {
                s(lr * weight_decay)
            };
            let inv_bc1: T = s(1.0 / bc1);
            let inv_bc2: T = s(1.0 / bc2);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let g = &grads[idx];
            for i in 0..param.data.len() {
                m[i] = b1 * m[i] + one_minus_b1 * g[i];
                v[i] = b2 * v[i] + one_minus_b2 * g[i] * g[i];
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                let theta = param.data[i];
                param.data[i] = theta - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * theta;
            }
        }
    }
}

/// Linear warmup to 1 over `warmup` steps, then linear decay to 0 at
/// `total` steps.
pub fn lr_schedule(iter: usize, warmup: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = warmup.min(total);
    if warmup > 0 && iter < warmup {
        (iter + 1) as f64 / warmup as f64
    } else if total > warmup {
        let remaining = (total - iter) as f64 / (total - warmup) as f64;
        remaining.clamp(0.0, 1.0)
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, zero_grads, Arch};

    fn tiny() -> ModelState<f64> {
        init_model(
            &Arch {
                in_channels: 3,
                widths: [4, 4, 4],
                feat_dim: 4,
                num_classes: 3,
            },
            0,
        )
    }

    #[test]
    fn zero_grads_and_zero_decay_leave_params_unchanged() {
        let mut state = tiny();
        let before = state.clone();
        let grads = zero_grads(&state);
        let mut opt = AdamW::new(&state);
        for _ in 0..5 {
            opt.step(&mut state, &grads, 1e-2, 1e-1, 0.0);
        }
        for (a, b) in state.params.iter().zip(&before.params) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn step_descends_a_quadratic() {
        // minimize sum(theta^2)/2: gradient = theta
        let mut state = tiny();
        let mut opt = AdamW::new(&state);
        let norm = |st: &ModelState<f64>| -> f64 {
            st.params
                .iter()
                .flat_map(|p| p.data.iter().map(|v| v * v))
                .sum::<f64>()
        };
        let start = norm(&state);
        for _ in 0..200 {
            let grads: Grads<f64> = state.params.iter().map(|p| p.data.clone()).collect();
            opt.step(&mut state, &grads, 1e-2, 1e-2, 0.0);
        }
        assert!(norm(&state) < 0.2 * start);
    }

    #[test]
    fn decay_skips_biases() {
        let mut state = tiny();
        // give biases a nonzero value to observe
        for p in state.params.iter_mut() {
            if p.is_bias {
                p.data.iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let grads = zero_grads(&state);
        let mut opt = AdamW::new(&state);
        opt.step(&mut state, &grads, 1e-2, 1e-2, 0.5);
        for p in &state.params {
            if p.is_bias {
                assert!(p.data.iter().all(|&v| v == 1.0));
            } else {
                // weights shrank
                assert!(p.data.iter().all(|&v| v.abs() < 1.0));
            }
        }
    }

    #[test]
    fn schedule_shape() {
        assert!((lr_schedule(0, 10, 100) - 0.1).abs() < 1e-12);
        assert!((lr_schedule(9, 10, 100) - 1.0).abs() < 1e-12);
        assert!((lr_schedule(55, 10, 100) - 0.5).abs() < 1e-12);
        assert!(lr_schedule(100, 10, 100) <= 0.0 + 1e-12);
        // warmup longer than total degrades gracefully
        assert!(lr_schedule(0, 50, 10) > 0.0);
    }
}
