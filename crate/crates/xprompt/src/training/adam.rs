//! Adaptive moment estimation with the standard decay constants.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::model::{AteModel, GradStore};

struct Slot {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every trainable tensor that has a gradient.
    /// Parameters under `encoder.` are skipped when the backbone is frozen.
    pub fn step(&mut self, model: &mut AteModel, grads: &GradStore, freeze_backbone: bool) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (beta1, beta2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        let slots = &mut self.slots;
        model.visit_params_mut(&mut |name, mut view| {
            if freeze_backbone && name.starts_with("encoder.") {
                return;
            }
            let Some(grad) = grads.get(&name) else {
                return;
            };
            let slot = slots.entry(name).or_insert_with(|| Slot {
                m: ArrayD::zeros(grad.raw_dim()),
                v: ArrayD::zeros(grad.raw_dim()),
            });
            for ((param, &g), (m, v)) in view
                .iter_mut()
                .zip(grad.iter())
                .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *param -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::toy_model;

    #[test]
    fn frozen_backbone_stays_bit_identical() {
        let mut model = toy_model(3, 2, &["ab cd"]);
        let before = model.param_snapshot();
        let mut grads = GradStore::new();
        for (name, tensor) in &before {
            grads.add(name, tensor.mapv(|_| 0.5));
        }
        let mut adam = Adam::new(1e-2);
        adam.step(&mut model, &grads, true);
        let after = model.param_snapshot();
        for ((name, a), (_, b)) in before.iter().zip(after.iter()) {
            if name.starts_with("encoder.") {
                assert_eq!(a, b, "{name} moved despite frozen backbone");
            } else {
                assert_ne!(a, b, "{name} did not move");
            }
        }
    }

    #[test]
    fn first_step_moves_params_by_lr() {
        // with constant gradient g, the first Adam step is -lr * g/|g|
        let mut model = toy_model(4, 2, &["ab"]);
        let before = model.param_snapshot();
        let mut grads = GradStore::new();
        for (name, tensor) in &before {
            grads.add(name, tensor.mapv(|_| 2.0));
        }
        let mut adam = Adam::new(1e-3);
        adam.step(&mut model, &grads, false);
        let after = model.param_snapshot();
        for ((name, a), (_, b)) in before.iter().zip(after.iter()) {
            for (&x, &y) in a.iter().zip(b.iter()) {
                let delta = y - x;
                assert!(
                    (delta + 1e-3).abs() < 1e-8,
                    "{name}: first-step delta {delta}"
                );
            }
        }
    }
}
