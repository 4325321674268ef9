//! AdamW with global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Result, SwepError};
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Decoupled weight decay applies to weight matrices only; `1 x n` tensors
/// (biases, layer-norm gains) are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &BTreeMap<String, Mat>) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g *= s;
        }
    }
    norm
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Mat>) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, param) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.dim() != param.dim() {
                return Err(SwepError::Shape(format!(
                    "gradient for {name} is {:?}, parameter {:?}",
                    g.dim(),
                    param.dim()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(g.dim()));
            let decay = if param.nrows() > 1 { c.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut *param)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= c.learning_rate * (mhat / (vhat.sqrt() + c.eps) + decay * *p);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("w", Mat::from_elem((2, 2), 1.0));
        store.insert("b", Mat::from_elem((1, 2), 1.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Mat::from_elem((2, 2), 0.5));
        grads.insert("b".to_string(), Mat::from_elem((1, 2), -2.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.update(&mut store, &grads).unwrap();
        assert!((store.get("w").unwrap()[[0, 0]] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((store.get("b").unwrap()[[0, 1]] - (1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn decay_skips_row_vectors() {
        let mut store = ParamStore::new();
        store.insert("w", Mat::from_elem((2, 1), 1.0));
        store.insert("b", Mat::from_elem((1, 1), 1.0));
        let grads: BTreeMap<String, Mat> = [
            ("w".to_string(), Mat::zeros((2, 1))),
            ("b".to_string(), Mat::zeros((1, 1))),
        ]
        .into();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.update(&mut store, &grads).unwrap();
        assert!((store.get("w").unwrap()[[0, 0]] - (1.0 - 1e-3 * 0.01)).abs() < 1e-15);
        assert_eq!(store.get("b").unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut grads: BTreeMap<String, Mat> = [
            ("a".to_string(), Mat::from_elem((1, 1), 3.0)),
            ("b".to_string(), Mat::from_elem((1, 1), 4.0)),
        ]
        .into();
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-15);
        let before = grads.clone();
        clip_global_norm(&mut grads, 2.0);
        assert_eq!(grads, before);
    }
}
