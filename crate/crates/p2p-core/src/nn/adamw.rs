//! Decoupled-weight-decay adaptive optimizer.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Optimizer state: first/second moment per parameter plus the step count.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: AdamWConfig) -> Self {
        let m = params.ids().map(|id| ArrayD::zeros(params.value(id).raw_dim())).collect();
        let v = params.ids().map(|id| ArrayD::zeros(params.value(id).raw_dim())).collect();
        Self { cfg, step: 0, m, v }
    }

    /// One update. Parameters without gradients are still weight-decayed.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<ArrayD<f64>>], lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for id in params.ids() {
            let i = id.0;
            let g_hold;
            let g: &ArrayD<f64> = match &grads[i] {
                Some(g) => g,
                None => {
                    g_hold = ArrayD::zeros(params.value(id).raw_dim());
                    &g_hold
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g);
            let p = params.value_mut(id);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *p);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use ndarray::ArrayD;

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("p", ArrayD::from_elem(ndarray::IxDyn(&[2, 2]), 0.5));
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let grads = vec![Some(ArrayD::from_elem(ndarray::IxDyn(&[2, 2]), 1.0))];
        opt.step(&mut store, &grads, 0.0);
        assert!(store.value(id).iter().all(|&v| v == 0.5));
        assert!(opt.m[0].iter().all(|&v| v != 0.0));
    }

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("p", ArrayD::from_elem(ndarray::IxDyn(&[1]), 3.0));
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..2000 {
            let x = store.value(id)[[0]];
            let grads = vec![Some(ArrayD::from_elem(ndarray::IxDyn(&[1]), 2.0 * x))];
            opt.step(&mut store, &grads, 0.01);
        }
        assert!(store.value(id)[[0]].abs() < 1e-2);
    }
}
