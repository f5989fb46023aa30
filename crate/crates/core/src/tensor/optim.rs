use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers, aligned with the store's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<R> {
    pub step: u64,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
}

/// Adam with decoupled weight decay. Frozen parameters are never touched.
#[derive(Debug, Clone)]
pub struct AdamW<R> {
    pub config: AdamWConfig,
    state: AdamWState<R>,
}

impl<R: Real> AdamW<R> {
    pub fn new(config: AdamWConfig, params: &ParamStore<R>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            state: AdamWState {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    pub fn state(&self) -> &AdamWState<R> {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamWState<R>) {
        self.state = state;
    }

    /// Applies one update using the accumulated `grad` of every trainable
    /// parameter. Any non-finite gradient aborts the step before anything
    /// is modified.
    pub fn step(&mut self, params: &mut ParamStore<R>, lr: f64) -> Result<(), TensorError> {
        for (_, p) in params.iter() {
            if !p.trainable {
                continue;
            }
            let bad = p.grad.data().iter().filter(|g| !g.is_finite()).count();
            if bad > 0 {
                return Err(TensorError::NonFiniteGrad {
                    name: p.name.clone(),
                    count: bad,
                });
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (R::from_f64_lossy(c.beta1), R::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (R::one() - b1, R::one() - b2);
        let step_size = R::from_f64_lossy(lr / bc1);
        let bc2_sqrt = R::from_f64_lossy(bc2.sqrt());
        let eps = R::from_f64_lossy(c.eps);
        let decay = R::from_f64_lossy(1.0 - lr * c.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                if c.weight_decay != 0.0 {
                    w[j] *= decay;
                }
                w[j] -= step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`. When warmup and total coincide the schedule is a
/// pure ramp and returns `peak_lr` at the final step.
pub fn lr_at_step(
    step: u64,
    peak_lr: f64,
    warmup_steps: u64,
    total_steps: u64,
) -> Result<f64, TensorError> {
    if warmup_steps > total_steps {
        return Err(TensorError::Schedule(format!(
            "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(TensorError::Schedule(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(peak_lr);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at_step(0, 1e-3, 10, 100).unwrap(), 0.0);
        assert!((lr_at_step(10, 1e-3, 10, 100).unwrap() - 1e-3).abs() < 1e-15);
        assert!(lr_at_step(100, 1e-3, 10, 100).unwrap().abs() < 1e-15);
        // peak 2e-5 with a 6000-step ramp is half way at step 3000
        assert!((lr_at_step(3000, 2e-5, 6000, 200_000).unwrap() - 1e-5).abs() < 1e-18);
        assert!(lr_at_step(5, 1e-3, 20, 10).is_err());
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let lrs: Vec<f64> = (10..=100).map(|s| lr_at_step(s, 1.0, 10, 100).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_grad_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(), true);
        let before = store.value(id).clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        for g in [3.0f64, -0.25] {
            let mut store = ParamStore::<f64>::new();
            let id = store.add("w", Tensor::scalar(1.0), true);
            store.get_mut(id).grad = Tensor::scalar(g);
            let mut opt = AdamW::new(AdamWConfig::default(), &store);
            opt.step(&mut store, 0.01).unwrap();
            let moved = store.value(id).item() - 1.0;
            assert!((moved + 0.01 * g.signum()).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn frozen_parameter_never_changes() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("frozen", Tensor::scalar(1.0), false);
        store.get_mut(id).grad = Tensor::scalar(5.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        for _ in 0..3 {
            opt.step(&mut store, 0.1).unwrap();
        }
        assert_eq!(store.value(id).item(), 1.0);
    }

    #[test]
    fn non_finite_grad_aborts_without_change() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::scalar(1.0), true);
        let b = store.add("b", Tensor::scalar(1.0), true);
        store.get_mut(a).grad = Tensor::scalar(1.0);
        store.get_mut(b).grad = Tensor::scalar(f32::NAN);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let err = opt.step(&mut store, 0.1).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGrad { ref name, .. } if name == "b"));
        assert_eq!(store.value(a).item(), 1.0);
        assert_eq!(opt.state().step, 0);
    }
}
