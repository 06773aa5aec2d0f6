//! Finite-difference verification of analytic gradients in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use std::sync::Arc;

use super::graph::{Graph, Kinks, Mode, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so that near-zero
    /// gradients are compared absolutely.
    pub floor: f64,
    /// Checks at most this many coordinates per tensor (all if `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    /// Evaluate perturbed points with the base point's ReLU patterns.
    pub freeze_kinks: bool,
    pub stencil: Stencil,
}

/// Central-difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    ThreePoint,
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`, error `O(h^4)`.
    FivePoint,
}

impl Stencil {
    fn derivative(self, h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        Ok(match self {
            Stencil::ThreePoint => (f(h)? - f(-h)?) / (2.0 * h),
            Stencil::FivePoint => {
                (f(-2.0 * h)? - 8.0 * f(-h)? + 8.0 * f(h)? - f(2.0 * h)?) / (12.0 * h)
            }
        })
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            floor: 1e-2,
            max_coords: None,
            seed: 0,
            mode: Mode::Train,
            freeze_kinks: true,
            stencil: Stencil::FivePoint,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }
}

/// Relative error with a denominator floor.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar built by `f` against central
/// differences, for every trainable parameter in `store` and every tensor
/// in `inputs`.
pub fn gradcheck<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let (param_grads, input_grads, masks) = {
        let mut g = Graph::new(&*store, cfg.mode);
        if cfg.freeze_kinks {
            g.set_kinks(Kinks::Record(Vec::new()));
        }
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        let grads = g.backward(root)?;
        let masks = match g.take_kinks() {
            Kinks::Record(m) => Some(Arc::new(m)),
            _ => None,
        };
        let pg: Vec<(ParamId, Option<Tensor<f64>>)> =
            store.trainable().map(|id| (id, grads.param(id).cloned())).collect();
        let ig: Vec<Option<Tensor<f64>>> = vars.iter().map(|v| grads.wrt(*v).cloned()).collect();
        (pg, ig, masks)
    };

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store, cfg.mode);
        if let Some(m) = &masks {
            g.set_kinks(Kinks::Replay { masks: m.clone(), next: 0 });
        }
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        let v = g.value(root).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("gradcheck objective".into()));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pick = |len: usize| -> Vec<usize> {
        match cfg.max_coords {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    };

    let mut report = GradCheckReport::default();
    let h = cfg.step;

    for (id, analytic) in param_grads {
        let len = store.get(id).numel();
        let coords = pick(len);
        let mut entry = GradCheckEntry {
            name: store.name(id).to_string(),
            checked: coords.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            let numeric = cfg.stencil.derivative(h, |d| {
                store.get_mut(id).data_mut()[i] = orig + d;
                eval(store, inputs)
            });
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = numeric?;
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[i]);
            entry.max_abs_err = entry.max_abs_err.max((a - numeric).abs());
            entry.max_rel_err = entry.max_rel_err.max(rel_err(a, numeric, cfg.floor));
        }
        report.entries.push(entry);
    }

    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, analytic) in input_grads.into_iter().enumerate() {
        let coords = pick(inputs[k].numel());
        let mut entry = GradCheckEntry {
            name: format!("input{k}"),
            checked: coords.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in coords {
            let orig = inputs[k].data()[i];
            let numeric = cfg.stencil.derivative(h, |d| {
                perturbed[k].data_mut()[i] = orig + d;
                eval(store, &perturbed)
            });
            perturbed[k].data_mut()[i] = orig;
            let numeric = numeric?;
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[i]);
            entry.max_abs_err = entry.max_abs_err.max((a - numeric).abs());
            entry.max_rel_err = entry.max_rel_err.max(rel_err(a, numeric, cfg.floor));
        }
        report.entries.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamKind;
    use crate::ops::ResizeMode;
    use rand::Rng;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>) -> f64 {
        let mut store = ParamStore::new();
        let r = gradcheck(&mut store, inputs, &GradCheckConfig::default(), f).unwrap();
        r.max_rel_err()
    }

    // Weighted sum so that every output coordinate gets a distinct gradient.
    fn probe(g: &mut Graph<'_, f64>, y: Var) -> Result<Var> {
        let s = g.shape(y);
        let w = g.input(Tensor::from_fn(s, |[n, c, h, w]| {
            ((n * 7 + c * 5 + h * 3 + w) % 11) as f64 / 11.0 - 0.4
        }));
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(0.0, 1e-4, 1e-2), 1e-2);
        assert!((rel_err(2.0, 1.0, 1e-2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn elementwise_ops() {
        let x = rand_tensor([2, 3, 2, 2], 1);
        assert!(check(&[x.clone()], |g, v| { let y = g.gelu(v[0]); probe(g, y) }) < 1e-4);
        assert!(check(&[x.clone()], |g, v| { let y = g.sigmoid(v[0]); probe(g, y) }) < 1e-4);
        assert!(check(&[x], |g, v| { let y = g.softmax(v[0]); probe(g, y) }) < 1e-4);
    }

    #[test]
    fn conv_and_norms() {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor([4, 3, 3, 3], 2), ParamKind::Trainable).unwrap();
        let b = store.add("b", rand_tensor([1, 1, 1, 4], 3), ParamKind::Trainable).unwrap();
        let gm = store.add("g", rand_tensor([1, 1, 1, 4], 4), ParamKind::Trainable).unwrap();
        let bt = store.add("bt", rand_tensor([1, 1, 1, 4], 5), ParamKind::Trainable).unwrap();
        let rm = store.add("rm", Tensor::zeros([1, 1, 1, 4]), ParamKind::Buffer).unwrap();
        let rv = store.add("rv", Tensor::full([1, 1, 1, 4], 1.0), ParamKind::Buffer).unwrap();
        let x = rand_tensor([2, 3, 5, 5], 6);
        let r = gradcheck(&mut store, &[x], &GradCheckConfig::default(), |g, v| {
            let (wv, bv, gv, btv) = (g.param(w), g.param(b), g.param(gm), g.param(bt));
            let y = g.conv2d(v[0], wv, Some(bv), 2, 1)?;
            let y = g.batch_norm(y, gv, btv, (rm, rv), 0.1, 1e-5)?;
            probe(g, y)
        })
        .unwrap();
        assert!(r.max_rel_err() < 1e-4, "{r:?}");
        assert_eq!(r.entries.len(), 5);
    }

    #[test]
    fn layer_norm_linear_matmul() {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor([1, 1, 6, 5], 7), ParamKind::Trainable).unwrap();
        let b = store.add("b", rand_tensor([1, 1, 1, 5], 8), ParamKind::Trainable).unwrap();
        let gm = store.add("g", rand_tensor([1, 1, 1, 6], 9), ParamKind::Trainable).unwrap();
        let bt = store.add("bt", rand_tensor([1, 1, 1, 6], 10), ParamKind::Trainable).unwrap();
        let x = rand_tensor([1, 2, 4, 6], 11);
        let r = gradcheck(&mut store, &[x], &GradCheckConfig::default(), |g, v| {
            let (wv, bv, gv, btv) = (g.param(w), g.param(b), g.param(gm), g.param(bt));
            let y = g.layer_norm(v[0], gv, btv, 1e-5)?;
            let y = g.linear(y, wv, Some(bv))?;
            let yt = g.permute(y, [0, 1, 3, 2])?;
            let m = g.matmul(y, yt)?;
            probe(g, m)
        })
        .unwrap();
        assert!(r.max_rel_err() < 1e-4, "{r:?}");
    }

    #[test]
    fn layout_and_resize_ops() {
        let x = rand_tensor([1, 4, 4, 4], 12);
        for mode in [ResizeMode::Bilinear, ResizeMode::Nearest] {
            assert!(check(&[x.clone()], |g, v| { let y = g.resize(v[0], 7, 3, mode)?; probe(g, y) }) < 1e-4);
        }
        assert!(check(&[x.clone()], |g, v| {
            let y = g.window_partition(v[0], 2)?;
            let y = g.softmax(y);
            let y = g.window_reverse(y, 2, crate::tensor::Shape([1, 4, 4, 4]))?;
            let y = g.roll_hw(y, 1, -1);
            let y = g.pixel_unshuffle(y, 2)?;
            let y = g.pad_hw(y, 1, 0, 0, 2);
            let y = g.crop_hw(y, 1, 1, 2, 2)?;
            probe(g, y)
        }) < 1e-4);
        assert!(check(&[x.clone(), rand_tensor([1, 4, 1, 4], 13)], |g, v| {
            let y = g.add(v[0], v[1])?;
            let z = g.mul(y, v[1])?;
            let c = g.concat(&[z, v[0]], 1)?;
            let m = g.mean_hw(c);
            probe(g, m)
        }) < 1e-4);
        let idx = std::sync::Arc::new(vec![0usize, 3, 3, 5, 63, 1]);
        assert!(check(&[x], |g, v| { let y = g.gather(v[0], idx.clone(), [1, 1, 2, 3])?; probe(g, y) }) < 1e-9);
    }

    #[test]
    fn sampled_coordinates() {
        let x = rand_tensor([1, 2, 8, 8], 14);
        let mut store = ParamStore::new();
        let cfg = GradCheckConfig { max_coords: Some(10), ..Default::default() };
        let r = gradcheck(&mut store, &[x], &cfg, |g, v| { let y = g.gelu(v[0]); probe(g, y) }).unwrap();
        assert_eq!(r.checked(), 10);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = rand_tensor([1, 1, 2, 2], 15);
        let err = check(&[x], |g, v| {
            let grad = Tensor::full(g.shape(v[0]), 1.0);
            let s: f64 = g.value(v[0]).data().iter().map(|a| a * a).sum();
            g.loss(v[0], s, grad)
        });
        assert!(err > 0.1);
    }
}
