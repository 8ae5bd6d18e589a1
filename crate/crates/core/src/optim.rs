//! AdamW and momentum SGD over named parameters, plus global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            momentum: 0.99,
            weight_decay: 0.05,
        }
    }
}

/// Weight decay applies to matrices only; biases, norms and tokens are exempt.
fn decays(t: &Tensor) -> bool {
    t.shape().len() >= 2
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamWState {
    pub fn update(
        &mut self,
        cfg: &AdamWConfig,
        lr: f64,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for unknown parameter");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let wd = if decays(p) { cfg.weight_decay } else { 0.0 };
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + wd * pd[i]);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub momentum: BTreeMap<String, Tensor>,
}

impl SgdState {
    pub fn update(&mut self, cfg: &SgdConfig, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for unknown parameter");
            let buf = self
                .momentum
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let wd = if decays(p) { cfg.weight_decay } else { 0.0 };
            let pd = p.data_mut();
            let bd = buf.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i] + wd * pd[i];
                bd[i] = cfg.momentum * bd[i] + gi;
                pd[i] -= cfg.lr * bd[i];
            }
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / (norm + 1e-12);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}
