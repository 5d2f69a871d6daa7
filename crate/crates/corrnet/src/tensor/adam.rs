//! Adam optimizer over a [`Parameters`] store.

use super::params::Parameters;
use super::{Scalar, Tensor};

/// Fixed hyperparameters of the update rule. Weight decay is folded into the
/// gradient before the moment updates (classic L2 coupling).
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment state, aligned with the parameter store by index.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &Parameters<S>) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect::<Vec<_>>();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update over every learnable parameter. A no-op on
    /// an empty store.
    pub fn step(&mut self, params: &mut Parameters<S>, lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.get(id).learnable {
                continue;
            }
            let n = params.value(id).numel();
            for j in 0..n {
                let g = params.grad(id).data()[j].as_f64()
                    + cfg.weight_decay * params.value(id).data()[j].as_f64();
                let m = &mut self.m[id.0].data_mut()[j];
                *m = S::from_f64(cfg.beta1 * m.as_f64() + (1.0 - cfg.beta1) * g);
                let m_hat = m.as_f64() / bc1;
                let v = &mut self.v[id.0].data_mut()[j];
                *v = S::from_f64(cfg.beta2 * v.as_f64() + (1.0 - cfg.beta2) * g * g);
                let v_hat = v.as_f64() / bc2;
                let p = &mut params.value_mut(id).data_mut()[j];
                *p = S::from_f64(p.as_f64() - lr * m_hat / (v_hat.sqrt() + cfg.eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut ps = Parameters::<f64>::new();
        let id = ps.register("p", Tensor::scalar(1.5), true).unwrap();
        let mut state = AdamState::new(&ps);
        state.step(&mut ps, 0.1, &AdamConfig::default());
        assert_eq!(ps.value(id).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // Scalar p = 1, g = 1, lr = 0.1: bias correction makes the first
        // update magnitude ~lr, so p ends near 0.9.
        let mut ps = Parameters::<f64>::new();
        let id = ps.register("p", Tensor::scalar(1.0), true).unwrap();
        ps.accumulate_grad(id, &[1.0]);
        let mut state = AdamState::new(&ps);
        state.step(&mut ps, 0.1, &AdamConfig::default());
        let p = ps.value(id).item();
        assert!((p - 0.9).abs() < 1e-6, "got {p}");
    }

    #[test]
    fn updates_are_reproducible() {
        let run = || {
            let mut ps = Parameters::<f64>::new();
            let id = ps.register("p", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true).unwrap();
            let mut state = AdamState::new(&ps);
            for k in 0..2 {
                ps.zero_grad();
                ps.accumulate_grad(id, &[0.3 + k as f64, -0.7]);
                state.step(&mut ps, 0.05, &AdamConfig { weight_decay: 0.001, ..Default::default() });
            }
            ps.value(id).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_learnable_parameters_are_skipped() {
        let mut ps = Parameters::<f64>::new();
        let id = ps.register("frozen", Tensor::scalar(2.0), false).unwrap();
        let mut state = AdamState::new(&ps);
        state.step(&mut ps, 0.5, &AdamConfig::default());
        assert_eq!(ps.value(id).item(), 2.0);
    }

    #[test]
    fn empty_store_is_a_no_op() {
        let mut ps = Parameters::<f64>::new();
        let mut state = AdamState::new(&ps);
        state.step(&mut ps, 0.1, &AdamConfig::default());
        assert_eq!(state.step_count(), 1);
    }
}
