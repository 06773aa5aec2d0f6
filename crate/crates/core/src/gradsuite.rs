//! Finite-difference checks of every differentiable graph op and of both
//! end-to-end toy models.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{gradcheck, GradCheckConfig, GradCheckReport, Graph, Mode, ParamKind, ParamStore, Var};
use crate::dmgformer::{DmgFormer, DmgFormerConfig};
use crate::error::Result;
use crate::loss::{focal_loss, FocalLossConfig};
use crate::ops::ResizeMode;
use crate::tensor::{Shape, Tensor};
use crate::trsnet::{TrsNet, TrsNetConfig, TrsVariant};

pub const TOLERANCE: f64 = 1e-3;
pub const INSTANCES: usize = 5;

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelCheck {
    pub model: String,
    pub input: [usize; 4],
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradSuiteReport {
    pub tolerance: f64,
    pub ops: Vec<OpCheck>,
    pub models: Vec<ModelCheck>,
}

impl GradSuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        let ops = self.ops.iter().map(|o| o.max_rel_err);
        ops.chain(self.models.iter().map(|m| m.max_rel_err)).fold(0.0, f64::max)
    }

    /// NaN errors count as failures.
    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn failures(&self) -> Vec<String> {
        let ops = self.ops.iter().filter(|o| !(o.max_rel_err < self.tolerance)).map(|o| o.op.clone());
        ops.chain(self.models.iter().filter(|m| !(m.max_rel_err < self.tolerance)).map(|m| m.model.clone()))
            .collect()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for o in &self.ops {
            s.push_str(&format!("{:<20} {} instances {:>5} coords max rel {:.2e}\n", o.op, o.instances, o.checked, o.max_rel_err));
        }
        for m in &self.models {
            s.push_str(&format!(
                "{:<20} {:?} {:>5} coords max rel {:.2e} ({})\n",
                m.model, m.input, m.checked, m.max_rel_err, m.worst
            ));
        }
        s
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 4] {
    [rng.gen_range(1..=2), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)]
}

/// Weighted sum so that every output coordinate gets a distinct gradient.
fn probe(g: &mut Graph<'_, f64>, y: Var) -> Result<Var> {
    let s = g.shape(y);
    let w = g.input(Tensor::from_fn(s, |[n, c, h, w]| ((n * 7 + c * 5 + h * 3 + w) % 11) as f64 / 11.0 - 0.4));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Instance = (ParamStore<f64>, Vec<Tensor<f64>>, Mode, Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>);

fn unary(rng: &mut ChaCha8Rng, shape: [usize; 4], f: impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var> + 'static) -> Instance {
    let x = rand_tensor(rng, shape);
    (ParamStore::new(), vec![x], Mode::Train, Box::new(move |g, v| { let y = f(g, v[0])?; probe(g, y) }))
}

fn unary_dims(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize), f: impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var> + 'static) -> Instance {
    let shape = dims(rng, lo, hi);
    unary(rng, shape, f)
}

fn conv_instance(rng: &mut ChaCha8Rng) -> Instance {
    let bias = rng.gen_bool(0.5);
    let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let k = [1, 3][rng.gen_range(0..2)];
    let stride = rng.gen_range(1..=2);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(rng, [cout, cin, k, k]), ParamKind::Trainable).unwrap();
    let b = bias.then(|| store.add("b", rand_tensor(rng, [1, 1, 1, cout]), ParamKind::Trainable).unwrap());
    let shape = [rng.gen_range(1..=2), cin, rng.gen_range(3..=6), rng.gen_range(3..=6)];
    let x = rand_tensor(rng, shape);
    let f = move |g: &mut Graph<'_, f64>, v: &[Var]| {
        let wv = g.param(w);
        let bv = b.map(|b| g.param(b));
        let y = g.conv2d(v[0], wv, bv, stride, k / 2)?;
        probe(g, y)
    };
    (store, vec![x], Mode::Train, Box::new(f))
}

fn norm_instance(rng: &mut ChaCha8Rng, mode: Mode) -> Instance {
    let c = rng.gen_range(1..=3);
    let mut store = ParamStore::new();
    let gm = store.add("gamma", rand_tensor(rng, [1, 1, 1, c]), ParamKind::Trainable).unwrap();
    let bt = store.add("beta", rand_tensor(rng, [1, 1, 1, c]), ParamKind::Trainable).unwrap();
    let rm = store.add("mean", rand_tensor(rng, [1, 1, 1, c]), ParamKind::Buffer).unwrap();
    let var = Tensor::from_fn([1, 1, 1, c], |_| rng.gen_range(0.5..2.0));
    let rv = store.add("var", var, ParamKind::Buffer).unwrap();
    let shape = [2, c, rng.gen_range(2..=4), rng.gen_range(2..=4)];
    let x = rand_tensor(rng, shape);
    let f = move |g: &mut Graph<'_, f64>, v: &[Var]| {
        let (a, b) = (g.param(gm), g.param(bt));
        let y = g.batch_norm(v[0], a, b, (rm, rv), 0.1, 1e-5)?;
        probe(g, y)
    };
    (store, vec![x], mode, Box::new(f))
}

fn layer_norm_instance(rng: &mut ChaCha8Rng) -> Instance {
    let d = rng.gen_range(2..=6);
    let mut store = ParamStore::new();
    let gm = store.add("gamma", rand_tensor(rng, [1, 1, 1, d]), ParamKind::Trainable).unwrap();
    let bt = store.add("beta", rand_tensor(rng, [1, 1, 1, d]), ParamKind::Trainable).unwrap();
    let shape = [1, rng.gen_range(1..=2), rng.gen_range(1..=4), d];
    let x = rand_tensor(rng, shape);
    let f = move |g: &mut Graph<'_, f64>, v: &[Var]| {
        let (a, b) = (g.param(gm), g.param(bt));
        let y = g.layer_norm(v[0], a, b, 1e-5)?;
        probe(g, y)
    };
    (store, vec![x], Mode::Train, Box::new(f))
}

fn linear_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (din, dout) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(rng, [1, 1, din, dout]), ParamKind::Trainable).unwrap();
    let b = store.add("b", rand_tensor(rng, [1, 1, 1, dout]), ParamKind::Trainable).unwrap();
    let shape = [1, rng.gen_range(1..=2), rng.gen_range(1..=4), din];
    let x = rand_tensor(rng, shape);
    let f = move |g: &mut Graph<'_, f64>, v: &[Var]| {
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.linear(v[0], wv, Some(bv))?;
        probe(g, y)
    };
    (store, vec![x], Mode::Train, Box::new(f))
}

fn binary(rng: &mut ChaCha8Rng, a: [usize; 4], b: [usize; 4], f: impl Fn(&mut Graph<'_, f64>, Var, Var) -> Result<Var> + 'static) -> Instance {
    let xs = vec![rand_tensor(rng, a), rand_tensor(rng, b)];
    (ParamStore::new(), xs, Mode::Train, Box::new(move |g, v| { let y = f(g, v[0], v[1])?; probe(g, y) }))
}

/// Zeroes a random subset of axes so the second operand broadcasts.
fn broadcast_of(rng: &mut ChaCha8Rng, s: [usize; 4]) -> [usize; 4] {
    s.map(|d| if rng.gen_bool(0.4) { 1 } else { d })
}

fn focal_instance(rng: &mut ChaCha8Rng, multilabel: bool) -> Instance {
    let [n, c, h, w] = [rng.gen_range(1..=2), rng.gen_range(2..=4), rng.gen_range(1..=3), rng.gen_range(1..=3)];
    let x = rand_tensor(rng, [n, c, h, w]);
    let (targets, cfg) = if multilabel {
        ((0..n * c * h * w).map(|_| rng.gen_range(0..2u8)).collect::<Vec<_>>(), FocalLossConfig::multilabel())
    } else {
        ((0..n * h * w).map(|_| rng.gen_range(0..c as u8)).collect(), FocalLossConfig::multiclass())
    };
    (ParamStore::new(), vec![x], Mode::Train, Box::new(move |g, v| focal_loss(g, v[0], &targets, &cfg)))
}

fn make(op: &str, rng: &mut ChaCha8Rng) -> Instance {
    match op {
        "relu" => unary_dims(rng, (1, 4), |g, x| Ok(g.relu(x))),
        "gelu" => unary_dims(rng, (1, 4), |g, x| Ok(g.gelu(x))),
        "sigmoid" => unary_dims(rng, (1, 4), |g, x| Ok(g.sigmoid(x))),
        "softmax" => unary_dims(rng, (1, 4), |g, x| Ok(g.softmax(x))),
        "scale" => {
            let k = rng.gen_range(-2.0..2.0);
            unary_dims(rng, (1, 4), move |g, x| Ok(g.scale(x, k)))
        }
        "mean_hw" => unary_dims(rng, (1, 4), |g, x| Ok(g.mean_hw(x))),
        "mean" => unary_dims(rng, (1, 4), |g, x| { let m = g.mean(x); Ok(g.scale(m, 1.7)) }),
        "sum" => unary_dims(rng, (1, 4), |g, x| { let s = g.sum(x); Ok(g.scale(s, -0.6)) }),
        "conv2d" => conv_instance(rng),
        "batch_norm_train" => norm_instance(rng, Mode::Train),
        "batch_norm_eval" => norm_instance(rng, Mode::Eval),
        "layer_norm" => layer_norm_instance(rng),
        "linear" => linear_instance(rng),
        "matmul" => {
            let [b1, b2, m, k] = dims(rng, 1, 4);
            let p = rng.gen_range(1..=4);
            binary(rng, [b1, b2, m, k], [b1, b2, k, p], |g, a, b| g.matmul(a, b))
        }
        "add" => {
            let s = dims(rng, 1, 4);
            let b = broadcast_of(rng, s);
            binary(rng, s, b, |g, a, b| g.add(a, b))
        }
        "mul" => {
            let s = dims(rng, 1, 4);
            let b = broadcast_of(rng, s);
            binary(rng, s, b, |g, a, b| g.mul(a, b))
        }
        "concat" => {
            let s = dims(rng, 1, 3);
            let axis = rng.gen_range(0..4);
            let mut b = s;
            b[axis] = rng.gen_range(1..=3);
            binary(rng, s, b, move |g, a, b| g.concat(&[a, b, a], axis))
        }
        "permute" => {
            let mut axes = [0, 1, 2, 3];
            for i in (1..4).rev() {
                axes.swap(i, rng.gen_range(0..=i));
            }
            unary_dims(rng, (1, 3), move |g, x| g.permute(x, axes))
        }
        "reshape" => {
            let s = dims(rng, 1, 4);
            let to = [1, s[0] * s[1], s[2], s[3]];
            unary(rng, s, move |g, x| g.reshape(x, to))
        }
        "narrow" => {
            let s = dims(rng, 2, 4);
            let axis = rng.gen_range(0..4);
            let start = rng.gen_range(0..s[axis]);
            let len = rng.gen_range(1..=s[axis] - start);
            unary(rng, s, move |g, x| g.narrow(x, axis, start, len))
        }
        "pad_hw" => {
            let p: [usize; 4] = std::array::from_fn(|_| rng.gen_range(0..=2));
            unary_dims(rng, (1, 3), move |g, x| Ok(g.pad_hw(x, p[0], p[1], p[2], p[3])))
        }
        "crop_hw" => {
            let s = dims(rng, 2, 5);
            let (t, l) = (rng.gen_range(0..s[2]), rng.gen_range(0..s[3]));
            let (h, w) = (rng.gen_range(1..=s[2] - t), rng.gen_range(1..=s[3] - l));
            unary(rng, s, move |g, x| g.crop_hw(x, t, l, h, w))
        }
        "roll_hw" => {
            let (sy, sx) = (rng.gen_range(-3..=3), rng.gen_range(-3..=3));
            unary_dims(rng, (1, 4), move |g, x| Ok(g.roll_hw(x, sy, sx)))
        }
        "resize_bilinear" | "resize_nearest" => {
            let mode = if op == "resize_bilinear" { ResizeMode::Bilinear } else { ResizeMode::Nearest };
            let (oh, ow) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
            unary_dims(rng, (1, 4), move |g, x| g.resize(x, oh, ow, mode))
        }
        "pixel_shuffle" => {
            let r = rng.gen_range(1..=3);
            let [n, c, h, w] = dims(rng, 1, 3);
            unary(rng, [n, c * r * r, h, w], move |g, x| g.pixel_shuffle(x, r))
        }
        "pixel_unshuffle" => {
            let r = rng.gen_range(1..=3);
            let [n, c, h, w] = dims(rng, 1, 2);
            unary(rng, [n, c, h * r, w * r], move |g, x| g.pixel_unshuffle(x, r))
        }
        "window_partition" => {
            let ws = rng.gen_range(1..=3);
            let [n, c, h, w] = dims(rng, 1, 2);
            unary(rng, [n, h * ws, w * ws, c], move |g, x| g.window_partition(x, ws))
        }
        "window_reverse" => {
            let ws = rng.gen_range(1..=3);
            let [n, c, h, w] = dims(rng, 1, 2);
            let grid = Shape([n, h * ws, w * ws, c]);
            unary(rng, [1, n * h * w, ws * ws, c], move |g, x| g.window_reverse(x, ws, grid))
        }
        "gather" => {
            let s = dims(rng, 1, 3);
            let len = s.iter().product::<usize>();
            let out = [1, 1, rng.gen_range(1..=3), rng.gen_range(1..=4)];
            let idx: Vec<usize> = (0..out[2] * out[3]).map(|_| rng.gen_range(0..len)).collect();
            let idx = Arc::new(idx);
            unary(rng, s, move |g, x| g.gather(x, idx.clone(), out))
        }
        "focal_multiclass" => focal_instance(rng, false),
        "focal_multilabel" => focal_instance(rng, true),
        _ => unreachable!("unknown op {op}"),
    }
}

pub const OPS: &[&str] = &[
    "relu", "gelu", "sigmoid", "softmax", "scale", "mean_hw", "mean", "sum", "conv2d", "batch_norm_train",
    "batch_norm_eval", "layer_norm", "linear", "matmul", "add", "mul", "concat", "permute", "reshape", "narrow",
    "pad_hw", "crop_hw", "roll_hw", "resize_bilinear", "resize_nearest", "pixel_shuffle", "pixel_unshuffle",
    "window_partition", "window_reverse", "gather", "focal_multiclass", "focal_multilabel",
];

pub fn check_op(op: &str, instances: usize, seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OpCheck { op: op.into(), instances, checked: 0, max_rel_err: 0.0 };
    for i in 0..instances {
        let (mut store, inputs, mode, f) = make(op, &mut rng);
        let cfg = GradCheckConfig { mode, seed: seed + i as u64, ..Default::default() };
        let r = gradcheck(&mut store, &inputs, &cfg, |g, v| f(g, v))?;
        out.checked += r.checked();
        out.max_rel_err = out.max_rel_err.max(r.max_rel_err());
    }
    Ok(out)
}

fn model_check(model: &str, input: [usize; 4], r: GradCheckReport) -> ModelCheck {
    ModelCheck {
        model: model.into(),
        input,
        checked: r.checked(),
        max_rel_err: r.max_rel_err(),
        worst: r.worst().map(|e| e.name.clone()).unwrap_or_default(),
    }
}

/// Inputs with a random offset per (image, channel) so batch statistics
/// are well conditioned.
fn model_input(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    let offs: Vec<f64> = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_fn(shape, |[n, c, _, _]| offs[n * shape[1] + c] + rng.gen_range(0.0..0.5))
}

pub fn check_trsnet(seed: u64, coords: usize) -> Result<ModelCheck> {
    let mut store = ParamStore::new();
    let net = TrsNet::new(&TrsNetConfig::tiny(3), TrsVariant::Compound, &mut store, seed)?;
    let mut s64 = store.cast::<f64>();
    let input = [4, 3, 16, 16];
    let x = model_input(&mut ChaCha8Rng::seed_from_u64(seed), input);
    let cfg = GradCheckConfig { max_coords: Some(coords), seed, ..Default::default() };
    let r = gradcheck(&mut s64, &[x], &cfg, |g, v| {
        let y = net.forward(g, v[0])?;
        probe(g, y)
    })?;
    Ok(model_check("trsnet", input, r))
}

pub fn check_dmgformer(seed: u64, coords: usize) -> Result<ModelCheck> {
    let mut store = ParamStore::new();
    let net = DmgFormer::new(&DmgFormerConfig::grad_toy(), &mut store, seed)?;
    let mut s64 = store.cast::<f64>();
    let input = [2, 3, 16, 16];
    let x = model_input(&mut ChaCha8Rng::seed_from_u64(seed), input);
    let cfg = GradCheckConfig { max_coords: Some(coords), seed, ..Default::default() };
    let r = gradcheck(&mut s64, &[x], &cfg, |g, v| {
        let y = net.forward(g, v[0])?;
        probe(g, y)
    })?;
    Ok(model_check("dmgformer", input, r))
}

/// The whole suite: every op in [`OPS`] on [`INSTANCES`] random instances,
/// then both toy models on 16×16 inputs.
pub fn run(seed: u64) -> Result<GradSuiteReport> {
    let ops = OPS.iter().enumerate().map(|(i, op)| check_op(op, INSTANCES, seed.wrapping_add(1000 * i as u64))).collect::<Result<_>>()?;
    let models = vec![check_trsnet(seed, 6)?, check_dmgformer(seed, 6)?];
    Ok(GradSuiteReport { tolerance: TOLERANCE, ops, models })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for op in OPS {
            let r = check_op(op, INSTANCES, 7).unwrap();
            assert!(r.max_rel_err < TOLERANCE, "{op}: {}", r.max_rel_err);
            assert!(r.checked >= INSTANCES, "{op}");
        }
    }

    #[test]
    fn failures_are_reported() {
        let r = GradSuiteReport {
            tolerance: TOLERANCE,
            ops: vec![OpCheck { op: "x".into(), instances: 1, checked: 1, max_rel_err: f64::NAN }],
            models: vec![],
        };
        assert!(!r.passed());
        assert_eq!(r.failures(), vec!["x".to_string()]);
    }
}
