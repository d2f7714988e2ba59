use serde::{Deserialize, Serialize};

use crate::error::{HocaError, Result};

use super::params::ParamStore;

/// Adam hyper-parameters. Defaults follow the usual `(0.9, 0.999, 1e-8)` with
/// a learning rate of `1e-4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of `values` in place. `step` is the
/// 1-based update count.
pub fn adam_update(
    values: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    step: u64,
    hyper: &AdamConfig,
) -> Result<()> {
    if values.len() != grads.len() || moments.m.len() != values.len() || moments.v.len() != values.len() {
        return Err(HocaError::Dimension("adam state does not match parameter".into()));
    }
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    for (((x, &g), m), v) in values
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *x -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Adam over every trainable parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub hyper: AdamConfig,
    moments: Vec<Moments>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, hyper: AdamConfig) -> Self {
        let moments = store.iter().map(|(_, p)| Moments::zeros(p.value.len())).collect();
        Self {
            hyper,
            moments,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients currently held by `store`.
    /// Fails without touching any value if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
            if let Some(bad) = p.grad.data().iter().find(|g| !g.is_finite()) {
                return Err(HocaError::Numeric(format!(
                    "non-finite gradient {bad} for parameter {}",
                    p.name
                )));
            }
        }
        self.step += 1;
        let ids: Vec<_> = store.trainable_ids();
        for id in ids {
            let p = store.get_mut(id);
            let grads = p.grad.data().to_vec();
            adam_update(
                p.value.data_mut(),
                &grads,
                &mut self.moments[id.index()],
                self.step,
                &self.hyper,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseTensor;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut x = vec![1.5, -2.0];
        let mut m = Moments::zeros(2);
        for step in 1..=5 {
            adam_update(&mut x, &[0.0, 0.0], &mut m, step, &AdamConfig::default()).unwrap();
        }
        assert_eq!(x, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let hyper = AdamConfig::default();
        for g in [3.0, -0.25, 1e-3] {
            let mut x = vec![0.0];
            let mut m = Moments::zeros(1);
            adam_update(&mut x, &[g], &mut m, 1, &hyper).unwrap();
            let expected = -hyper.lr * g.signum() / (1.0 + hyper.eps / g.abs());
            assert!((x[0] - expected).abs() < 1e-18, "{} vs {expected}", x[0]);
        }
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        // With a constant gradient both bias-corrected moments equal g and g²
        // exactly, so every step is −lr·g/(|g|+eps).
        let hyper = AdamConfig::default();
        let g = 0.7;
        let mut x = vec![0.0];
        let mut m = Moments::zeros(1);
        let mut prev = 0.0;
        for step in 1..=200 {
            adam_update(&mut x, &[g], &mut m, step, &hyper).unwrap();
            let delta = x[0] - prev;
            prev = x[0];
            assert!((delta + hyper.lr).abs() < 1e-11, "step {step}: {delta}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("decoder.bias", DenseTensor::vector(vec![0.0]).unwrap(), true).unwrap();
        store.get_mut(id).grad.data_mut()[0] = f64::NAN;
        let mut adam = Adam::new(&store, AdamConfig::default());
        let err = adam.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("decoder.bias"));
        assert_eq!(store.get(id).value.data(), &[0.0]);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let a = store.add("a", DenseTensor::vector(vec![1.0]).unwrap(), true).unwrap();
        let b = store.add("b", DenseTensor::vector(vec![1.0]).unwrap(), false).unwrap();
        store.get_mut(a).grad.data_mut()[0] = 1.0;
        store.get_mut(b).grad.data_mut()[0] = 1.0;
        let mut adam = Adam::new(&store, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        adam.step(&mut store).unwrap();
        assert!(store.get(a).value.data()[0] < 1.0);
        assert_eq!(store.get(b).value.data()[0], 1.0);
    }
}
