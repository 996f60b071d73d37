use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradMap, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Adam with per-parameter moments and step counts.
///
/// Parameters that join the trainable set late (two-phase unfreezing) start
/// their own bias correction from step one.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    moments: BTreeMap<String, Moments>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Number of calls to [`Adam::step`] so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable parameter of `params`.
    ///
    /// Non-trainable parameters are not touched even if `grads` has an
    /// entry for them.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        // Validate first so a failed step leaves everything untouched.
        for (name, p) in params.iter().filter(|(_, p)| p.trainable) {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Missing(format!("gradient for `{name}`")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        for (name, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
            let g = &grads[name];
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                step: 0,
            });
            mom.step += 1;
            let bc1 = 1.0 - beta1.powi(mom.step as i32);
            let bc2 = 1.0 - beta2.powi(mom.step as i32);
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(mom.m.data_mut())
                .zip(mom.v.data_mut())
                .zip(g.data());
            for (((w, m), v), &g) in it {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamGroup;

    fn store(trainable: bool, value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value), ParamGroup::Other).unwrap();
        s.set_trainable("w", trainable).unwrap();
        s
    }

    fn grads(g: f64) -> GradMap {
        GradMap::from([("w".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store(true, 0.7);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, &grads(0.0)).unwrap();
        assert_eq!(s.value("w").unwrap().item(), 0.7);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn frozen_parameter_ignores_gradient() {
        let mut s = store(false, 0.7);
        let before = s.value("w").unwrap().item().to_bits();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut s, &grads(3.0)).unwrap();
        }
        assert_eq!(s.value("w").unwrap().item().to_bits(), before);
    }

    #[test]
    fn scalar_update_matches_hand_rolled_recurrence() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let gs = [1.0, -0.5, 2.0];
        let mut s = store(true, 0.0);
        let mut adam = Adam::new(cfg);

        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            adam.step(&mut s, &grads(g)).unwrap();
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((s.value("w").unwrap().item() - w).abs() < 1e-15);
        }
        // First step of Adam moves by lr * sign(g) up to eps.
        let mut s = store(true, 0.0);
        Adam::new(cfg).step(&mut s, &grads(1.0)).unwrap();
        assert!((s.value("w").unwrap().item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = store(true, 0.0);
        let bad = GradMap::from([("w".to_string(), Tensor::vector(vec![1.0, 2.0]))]);
        let err = Adam::new(AdamConfig::default()).step(&mut s, &bad);
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}
