//! Activation-memory accounting and measurement for the TRS-Net family.
//!
//! [`account`] walks the layer graph symbolically and assumes every
//! intermediate activation is retained for the backward pass. Its peak adds
//! two times the largest activation for the gradient buffers alive while
//! that layer is differentiated. Optimizer state is not included.
//! [`measure`] runs a real forward and backward pass and reads the tensor
//! allocation high-water mark.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode};
use crate::error::{Error, Result};
use crate::tensor::{memory, Shape, Tensor};
use crate::train::{Arch, Model, ModelKind, ModelSpec};
use crate::trsnet::TrsNetConfig;

const F32: u64 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBytes {
    pub name: String,
    pub kind: String,
    pub shape: [usize; 4],
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub model: String,
    pub input: [usize; 4],
    pub layers: Vec<LayerBytes>,
    pub activation_bytes: u64,
    pub param_bytes: u64,
    /// Analytic forward + backward peak.
    pub peak_bytes: u64,
    /// Allocator high-water mark, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_peak_bytes: Option<u64>,
}

impl MemoryReport {
    pub fn max_layer_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.bytes).max().unwrap_or(0)
    }

    pub fn table(&self) -> String {
        let mb = |b: u64| b as f64 / 1e6;
        let mut s = format!("model {} input {:?}\n{:<40} {:<10} {:>22} {:>10}\n", self.model, self.input, "layer", "kind", "shape", "MB");
        for l in &self.layers {
            let shape = format!("{:?}", l.shape);
            s.push_str(&format!("{:<40} {:<10} {:>22} {:>10.3}\n", l.name, l.kind, shape, mb(l.bytes)));
        }
        s.push_str(&format!("activations {:.3} MB, params {:.3} MB, peak {:.3} MB", mb(self.activation_bytes), mb(self.param_bytes), mb(self.peak_bytes)));
        if let Some(m) = self.measured_peak_bytes {
            s.push_str(&format!(", measured {:.3} MB", mb(m)));
        }
        s
    }
}

struct Tracer {
    scope: Vec<String>,
    layers: Vec<LayerBytes>,
}

type S = [usize; 4];

impl Tracer {
    fn push(&mut self, name: &str, kind: &str, shape: S) -> S {
        let mut full = self.scope.join(".");
        if !name.is_empty() {
            if !full.is_empty() {
                full.push('.');
            }
            full.push_str(name);
        }
        let bytes = shape.iter().product::<usize>() as u64 * F32;
        self.layers.push(LayerBytes { name: full, kind: kind.into(), shape, bytes });
        shape
    }

    fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.into());
        let r = f(self);
        self.scope.pop();
        r
    }

    fn conv(&mut self, x: S, cout: usize, k: usize, stride: usize) -> S {
        let p = k / 2;
        let out = |d: usize| (d + 2 * p - k) / stride + 1;
        self.push("conv", "conv", [x[0], cout, out(x[2]), out(x[3])])
    }

    fn cba(&mut self, name: impl Into<String>, x: S, cout: usize, k: usize, stride: usize, relu: bool) -> S {
        self.scoped(name, |t| {
            let y = t.conv(x, cout, k, stride);
            let y = t.push("bn", "batchnorm", y);
            if relu {
                t.push("relu", "relu", y)
            } else {
                y
            }
        })
    }

    fn resize(&mut self, name: &str, x: S, h: usize, w: usize) -> S {
        self.push(name, "resize", [x[0], x[1], h, w])
    }

    fn split_attention(&mut self, x: S, radix: usize, reduction: usize) -> S {
        let c = x[1];
        let inter = (c * radix / reduction.max(1)).max(8);
        let splits: Vec<S> = (0..radix).map(|r| self.cba(format!("branch{r}"), x, c, 3, 1, true)).collect();
        for _ in 1..radix {
            self.push("sum", "add", x);
        }
        let pooled = self.push("pool", "mean_hw", [x[0], c, 1, 1]);
        let h = self.scoped("fc1", |t| t.conv(pooled, inter, 1, 1));
        let h = self.push("fc1.relu", "relu", h);
        let l = self.scoped("fc2", |t| t.conv(h, c * radix, 1, 1));
        let l = self.push("reshape", "reshape", [l[0], c, 1, radix]);
        let a = self.push("softmax", "softmax", l);
        for (r, s) in splits.iter().enumerate() {
            self.push(&format!("w{r}"), "narrow", [a[0], c, 1, 1]);
            self.push(&format!("mul{r}"), "mul", *s);
            if r > 0 {
                self.push(&format!("acc{r}"), "add", *s);
            }
        }
        x
    }

    fn internal_features(&mut self, cfg: &TrsNetConfig, x: S) -> S {
        let m = cfg.internal_multiple();
        let (h, w) = (x[2].div_ceil(m) * m, x[3].div_ceil(m) * m);
        let xp = if (h, w) != (x[2], x[3]) { self.push("pad", "pad", [x[0], x[1], h, w]) } else { x };
        let e = &cfg.encoder;
        let mut levels = vec![self.scoped("encoder", |t| t.cba("stem", xp, e.stem_channels, 3, 2, true))];
        for (i, (&c, &depth)) in e.stage_channels.iter().zip(&e.stage_depths).enumerate() {
            let prev = *levels.last().unwrap();
            let y = self.scoped(format!("encoder.e{i}"), |t| {
                let mut y = t.cba("down", prev, c, 3, 2, true);
                for k in 0..depth {
                    y = t.scoped(format!("block{k}"), |t| {
                        let a = t.split_attention(y, e.radix, e.reduction);
                        let s = t.push("residual", "add", a);
                        t.push("relu", "relu", s)
                    });
                }
                y
            });
            levels.push(y);
        }
        let depth = cfg.decoder.depth;
        let mut grid: Vec<Vec<S>> = levels.iter().map(|&v| vec![v]).collect();
        for j in 1..=depth {
            for i in 0..=depth - j {
                let below = grid[i + 1][j - 1];
                let y = self.scoped(format!("decoder.d{i}_{j}"), |t| {
                    let up = t.resize("up", below, below[2] * 2, below[3] * 2);
                    let ch: usize = grid[i][..j].iter().map(|s| s[1]).sum::<usize>() + up[1];
                    let cat = t.push("concat", "concat", [up[0], ch, up[2], up[3]]);
                    t.cba("", cat, cfg.decoder.widths[i], 3, 1, true)
                });
                grid[i].push(y);
            }
        }
        let d = grid[0][depth];
        let up = self.resize("refine.up", d, d[2] * 2, d[3] * 2);
        let f = self.cba("refine", up, cfg.decoder.out_channels, 3, 1, true);
        if (h, w) != (x[2], x[3]) {
            let rows = self.push("crop.rows", "narrow", [f[0], f[1], x[2], w]);
            self.push("crop.cols", "narrow", [rows[0], rows[1], x[2], x[3]])
        } else {
            f
        }
    }

    fn internal_logits(&mut self, cfg: &TrsNetConfig, x: S) -> S {
        let f = self.internal_features(cfg, x);
        self.scoped("head", |t| t.conv(f, cfg.n_classes, 1, 1))
    }
}

/// Analytic activation report of `spec` on an `input` batch. Shapes must
/// satisfy the model's own input rules.
pub fn account(spec: &ModelSpec, input: [usize; 4]) -> Result<MemoryReport> {
    spec.validate()?;
    let Arch::TrsNet(cfg) = &spec.arch else {
        return Err(Error::Unsupported(format!("memory accounting of {} layers", spec.kind)));
    };
    let [n, c, h, w] = input;
    let r = cfg.resizer.r;
    if c != 3 || (spec.kind != ModelKind::InternalCrop && (h % r != 0 || w % r != 0)) {
        return Err(Error::invalid_shape("account", format!("input {}", Shape(input))));
    }
    let mut t = Tracer { scope: Vec::new(), layers: Vec::new() };
    let x = t.push("input", "input", input);
    match spec.kind {
        ModelKind::TrsNet => {
            let rz = &cfg.resizer;
            let mut y = t.push("dcn.unshuffle", "unshuffle", [n, c * r * r, h / r, w / r]);
            for (i, &cout) in rz.dcn_channels.iter().enumerate() {
                let relu = i + 1 < rz.dcn_channels.len();
                y = t.scoped("dcn", |t| t.cba(i.to_string(), y, cout, rz.kernel, 1, relu));
            }
            let f = t.scoped("internal", |t| t.internal_features(cfg, y));
            let (&last, hidden) = rz.ucn_channels.split_last().expect("validated");
            let mut u = f;
            for (i, &cout) in hidden.iter().enumerate() {
                u = t.scoped("ucn", |t| t.cba(i.to_string(), u, cout, rz.kernel, 1, true));
            }
            let u = t.scoped(format!("ucn.{}", hidden.len()), |t| t.conv(u, last, rz.kernel, 1));
            t.push("ucn.shuffle", "shuffle", [n, u[1] / (r * r), h, w]);
        }
        ModelKind::BaselineLowRes => {
            let low = t.resize("down", x, h / r, w / r);
            t.scoped("internal", |t| t.internal_logits(cfg, low));
        }
        ModelKind::BaselineUniform => {
            let low = t.resize("down", x, h / r, w / r);
            let y = t.scoped("internal", |t| t.internal_logits(cfg, low));
            t.resize("up", y, h, w);
        }
        ModelKind::InternalCrop | ModelKind::DmgFormer => {
            t.scoped("internal", |t| t.internal_logits(cfg, x));
        }
    }
    let param_bytes = Model::new(spec, 0)?.store.bytes() as u64;
    Ok(report(spec, input, t.layers, param_bytes))
}

fn report(spec: &ModelSpec, input: [usize; 4], layers: Vec<LayerBytes>, param_bytes: u64) -> MemoryReport {
    let activation_bytes = layers.iter().map(|l| l.bytes).sum();
    let max = layers.iter().map(|l| l.bytes).max().unwrap_or(0);
    MemoryReport {
        model: spec.kind.name().into(),
        input,
        layers,
        activation_bytes,
        param_bytes,
        peak_bytes: activation_bytes + 2 * max,
        measured_peak_bytes: None,
    }
}

/// Runs one train-mode forward and backward pass of the whole-image model
/// on a constant input and returns the tensor-allocation high-water mark,
/// parameters and gradients included. Runs on a single dedicated thread so
/// the per-thread counters see every allocation. Inputs whose analytic
/// peak exceeds `budget` bytes are refused before allocating.
pub fn measure(model: &Model, input: [usize; 4], budget: u64) -> Result<u64> {
    if let Ok(r) = account(&model.spec, input) {
        let needed = r.peak_bytes + 2 * r.param_bytes;
        if needed > budget {
            return Err(Error::OutOfMemory { needed, budget });
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Unsupported(format!("thread pool: {e}")))?;
    pool.install(|| {
        memory::reset_peak();
        let base = memory::live_bytes();
        let params = model.store.bytes() as i64;
        let mut g = Graph::new(&model.store, Mode::Train);
        let x = g.input(Tensor::full(input, 0.5f32));
        let y = model.forward(&mut g, x)?;
        let s = g.sum(y);
        let grads = g.backward(s)?;
        drop(grads);
        drop(g);
        Ok((memory::peak_bytes() - base + params).max(0) as u64)
    })
}
