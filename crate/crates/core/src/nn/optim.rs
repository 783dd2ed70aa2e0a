use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global-norm clip applied before the update; 0 disables.
    pub clip: f32,
    /// Cosine decay of the step size over this many steps; 0 keeps it constant.
    pub decay_steps: usize,
    /// Step size after the decay, as a fraction of `lr`.
    pub final_lr_frac: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 5.0, decay_steps: 0, final_lr_frac: 1.0 }
    }
}

/// Adam over a fixed subset of a store's parameters.
pub struct Adam {
    cfg: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let m: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape.clone())).collect();
        Adam { cfg, v: m.clone(), m, ids, step: 0 }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.ids
    }

    /// Applies one update from (already averaged) gradients. Parameters
    /// outside this optimizer's subset are left untouched.
    /// Step size for the next update.
    pub fn current_lr(&self) -> f32 {
        let c = &self.cfg;
        if c.decay_steps == 0 {
            return c.lr;
        }
        let t = (self.step as f32 / c.decay_steps as f32).min(1.0);
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * t).cos());
        c.lr * (c.final_lr_frac + (1.0 - c.final_lr_frac) * cos)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let lr = self.current_lr();
        self.step += 1;
        let c = self.cfg;
        let mut scale = 1.0f32;
        if c.clip > 0.0 {
            let norm: f64 = self
                .ids
                .iter()
                .filter_map(|&id| grads.get(id))
                .flat_map(|t| t.data.iter())
                .map(|&g| (g as f64) * (g as f64))
                .sum::<f64>()
                .sqrt();
            if norm > c.clip as f64 {
                scale = (c.clip as f64 / norm) as f32;
            }
        }
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (slot, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let p = &mut store.tensors[id.0];
            for k in 0..p.data.len() {
                let gk = g.data[k] * scale;
                m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
                v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    #[test]
    fn adam_minimizes_a_quadratic_and_respects_subset() {
        let mut store = ParamStore::default();
        let a = store.add("a", Tensor::vector(vec![3.0, -2.0]));
        let b = store.add("b", Tensor::vector(vec![1.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store, vec![a]);
        for _ in 0..300 {
            let grads = {
                let mut g = Graph::new(&store);
                let pa = g.param(a);
                let pb = g.param(b);
                let sq = g.square(pa);
                let s = g.sum(sq);
                let sb = g.sum(pb);
                let loss = g.add(s, sb);
                g.backward(loss)
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(a).data.iter().all(|v| v.abs() < 0.05));
        assert_eq!(store.get(b).data, vec![1.0]);
    }
}
