use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled from the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        AdamW {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (e, g)) in params.entries_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (p, g)) in e.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = g.to_f64().unwrap_or(f64::NAN);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                let mut x = p.to_f64().unwrap_or(f64::NAN);
                x -= lr * (update + c.weight_decay * x);
                *p = T::lit(x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", vec![3], ParamKind::Bias);
        store.get_mut(id).data_mut().copy_from_slice(&[1.0, -1.0, 0.0]);
        let mut opt = AdamW::new(
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        let g = Tensor::from_vec(vec![3], vec![0.5, -2.0, 0.0]);
        opt.step(&mut store, &[g], 0.1);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", vec![1], ParamKind::Bias);
        store.get_mut(id).data_mut()[0] = 2.0;
        let mut opt = AdamW::new(
            AdamConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
            &store,
        );
        opt.step(&mut store, &[Tensor::zeros(vec![1])], 0.1);
        assert!((store.get(id).data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", vec![2], ParamKind::Bias);
        store.get_mut(id).data_mut().copy_from_slice(&[3.0, -4.0]);
        let mut opt = AdamW::new(
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let g = store.get(id).map(|v| 2.0 * v);
            opt.step(&mut store, &[g], 0.05);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-3));
    }
}
