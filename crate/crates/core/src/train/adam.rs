use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vaeinfo_tensor::Array;

use crate::model::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    /// Number of updates applied.
    pub t: u64,
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
}

impl Adam {
    /// One bias-corrected update of every parameter that has a gradient.
    pub fn update(&mut self, cfg: &AdamConfig, lr: f64, params: &mut ParamStore, grads: &BTreeMap<String, Array>) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let Some(entry) = params.entries.get_mut(name) else { continue };
            if !entry.trainable {
                continue;
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape().to_vec()));
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), entry.value.data_mut());
            for i in 0..g.len() {
                let gi = g.data()[i];
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::Entry;

    #[test]
    fn two_steps_by_hand() {
        let mut store = ParamStore::default();
        store.entries.insert("w".into(), Entry { value: Array::new(vec![1], vec![1.0]), trainable: true });
        let cfg = AdamConfig::default();
        let mut adam = Adam::default();
        let lr = 0.1;

        adam.update(&cfg, lr, &mut store, &BTreeMap::from([("w".to_string(), Array::new(vec![1], vec![2.0]))]));
        // m = 0.2, v = 0.004; m̂ = 2, v̂ = 4; step = 0.1·2/(2 + 1e-8)
        let w1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((store.get("w").unwrap().data()[0] - w1).abs() < 1e-15);

        adam.update(&cfg, lr, &mut store, &BTreeMap::from([("w".to_string(), Array::new(vec![1], vec![-1.0]))]));
        let m: f64 = 0.9 * 0.2 + 0.1 * -1.0;
        let v: f64 = 0.999 * 0.004 + 0.001 * 1.0;
        let mh = m / (1.0 - 0.81);
        let vh = v / (1.0 - 0.998001);
        let w2 = w1 - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((store.get("w").unwrap().data()[0] - w2).abs() < 1e-15);
        assert_eq!(adam.t, 2);
    }

    #[test]
    fn buffers_are_never_updated() {
        let mut store = ParamStore::default();
        store.entries.insert("bn.running_mean".into(), Entry { value: Array::new(vec![1], vec![0.5]), trainable: false });
        let mut adam = Adam::default();
        adam.update(&AdamConfig::default(), 1.0, &mut store, &BTreeMap::from([("bn.running_mean".to_string(), Array::new(vec![1], vec![1.0]))]));
        assert_eq!(store.get("bn.running_mean").unwrap().data(), &[0.5]);
    }
}
