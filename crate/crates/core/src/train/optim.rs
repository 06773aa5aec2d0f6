//! Adam with bias correction and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers indexed like the parameter store; buffers of
/// non-trainable entries stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>, cfg: AdamConfig) -> Self {
        let mut m = vec![Vec::new(); store.len()];
        for id in store.trainable() {
            m[id.index()] = vec![0.0; store.get(id).numel()];
        }
        AdamState { cfg, step: 0, v: m.clone(), m }
    }

    /// One update from the gradients stored on the trainable tensors.
    /// Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.trainable().collect();
        for &id in &ids {
            if let Some(g) = store.get(id).grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {} at element {i}", store.name(id))));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in ids {
            let t = store.get_mut(id);
            let grad = t.grad().map(<[f32]>::to_vec);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (k, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[k] as f64);
                let mk = beta1 * m[k] as f64 + (1.0 - beta1) * g;
                let vk = beta2 * v[k] as f64 + (1.0 - beta2) * g * g;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + eps);
                *p = (*p as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Rescales all trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.trainable().collect();
    let norm = ids
        .iter()
        .filter_map(|&id| store.get(id).grad())
        .flat_map(|g| g.iter())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for id in ids {
            if store.get(id).grad().is_some() {
                for g in store.get_mut(id).grad_mut() {
                    *g *= s;
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamKind;
    use crate::tensor::Tensor;

    fn store(values: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec([1, 1, 1, values.len()], values.to_vec()).unwrap(), ParamKind::Trainable).unwrap();
        s.add("stat", Tensor::full([1, 1, 1, 2], 3.0), ParamKind::Buffer).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore<f32>, g: &[f32]) {
        let id = s.lookup("w").unwrap();
        s.get_mut(id).grad_mut().copy_from_slice(g);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[1.0, -2.0]);
        let mut a = AdamState::new(&s, AdamConfig::default());
        set_grad(&mut s, &[0.0, 0.0]);
        a.step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(s.lookup("w").unwrap()).data(), &[1.0, -2.0]);
        assert_eq!(s.get(s.lookup("stat").unwrap()).data(), &[3.0, 3.0]);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        // m̂ = 1 and v̂ = 1, so the update is lr / (1 + eps).
        let mut s = store(&[0.5, 0.0, -1.0]);
        let mut a = AdamState::new(&s, AdamConfig::default());
        set_grad(&mut s, &[1.0; 3]);
        a.step(&mut s, 0.1).unwrap();
        let w = s.get(s.lookup("w").unwrap()).data();
        for (got, start) in w.iter().zip([0.5, 0.0, -1.0]) {
            assert!((start - got - 0.1).abs() < 1e-6, "{got}");
        }
    }

    #[test]
    fn state_carries_across_steps() {
        let (g1, g2, lr) = (0.3f64, -1.7f64, 0.05);
        let mut s = store(&[1.0]);
        let mut a = AdamState::new(&s, AdamConfig::default());
        set_grad(&mut s, &[g1 as f32]);
        a.step(&mut s, lr).unwrap();
        s.zero_grads();
        set_grad(&mut s, &[g2 as f32]);
        a.step(&mut s, lr).unwrap();

        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut p = 1.0f64;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let got = s.get(s.lookup("w").unwrap()).data()[0] as f64;
        assert!((got - p).abs() < 1e-6, "{got} vs {p}");
        assert_eq!(a.step, 2);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = store(&[1.0, 1.0]);
        let mut a = AdamState::new(&s, AdamConfig::default());
        set_grad(&mut s, &[0.0, f32::NAN]);
        let err = a.step(&mut s, 0.1).unwrap_err().to_string();
        assert!(err.contains("gradient of w at element 1"), "{err}");
        assert_eq!(s.get(s.lookup("w").unwrap()).data(), &[1.0, 1.0]);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut s = store(&[0.0, 0.0]);
        set_grad(&mut s, &[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        let g = s.get(s.lookup("w").unwrap()).grad().unwrap().to_vec();
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
        set_grad(&mut s, &[0.3, 0.4]);
        clip_grad_norm(&mut s, 1.0);
        assert_eq!(s.get(s.lookup("w").unwrap()).grad().unwrap(), &[0.3, 0.4]);
    }
}
