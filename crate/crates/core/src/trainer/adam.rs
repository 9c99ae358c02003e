//! Adam with linear warmup and inverse-square-root decay.

use std::collections::BTreeMap;

use numerics::Tensor;

use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 5.0,
        }
    }
}

impl AdamConfig {
    /// Rate for 1-based update number `t`.
    pub fn learning_rate(&self, t: u64) -> f64 {
        let t = t.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (t / w).min((w / t).sqrt())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// One update of every parameter that received a gradient. Frozen
    /// arrays are never touched.
    pub fn update(&mut self, cfg: &AdamConfig, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let lr = cfg.learning_rate(self.t);
        let norm = grads
            .values()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(param) = store.get_mut(name) else { continue };
            if param.frozen {
                continue;
            }
            let n = g.numel();
            let shape = param.value.shape().to_vec();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::new(shape.clone(), vec![0.0; n]).expect("shape"));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::new(shape, vec![0.0; n]).expect("shape"));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (p, &gi)) in param.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi * clip;
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                *p -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let c = AdamConfig {
            peak_lr: 1.0,
            warmup_steps: 4,
            ..Default::default()
        };
        assert_eq!(c.learning_rate(2), 0.5);
        assert_eq!(c.learning_rate(4), 1.0);
        assert_eq!(c.learning_rate(16), 0.5);
    }

    #[test]
    fn frozen_arrays_stay_put() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::row(vec![1.0]), false);
        s.insert("q", Tensor::row(vec![2.0]), true);
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::row(vec![0.5]));
        g.insert("q".to_string(), Tensor::row(vec![0.5]));
        let mut st = AdamState::default();
        st.update(&AdamConfig::default(), &mut s, &g);
        assert!(s.tensor("a").unwrap().data()[0] < 1.0);
        assert_eq!(s.tensor("q").unwrap().data()[0], 2.0);
        assert!(!st.m.contains_key("q"));
    }
}
