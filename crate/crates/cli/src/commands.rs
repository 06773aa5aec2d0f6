use std::path::{Path, PathBuf};

use hrseg::gradsuite;
use hrseg::mask::Mask;
use hrseg::membench::{self, MemoryReport};
use hrseg::metrics::MetricsReport;
use hrseg::synth::netpbm::{encode_pgm, encode_ppm};
use hrseg::synth::{annotate, generate_dataset, load_dataset, read_image, split, write_dataset, Dataset, SegmentationSample};
use hrseg::tensor::Tensor;
use hrseg::train::{self, load_checkpoint, save_checkpoint, write_history, Model, ModelKind, ModelSpec};
use hrseg::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{hex, Provenance, RunConfig};

/// Peak-bytes ceiling of a measured bench pass.
const MEASURE_BUDGET: u64 = 3 << 30;

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io { path: p.into(), source: e })
}

fn write(path: &Path, bytes: &[u8]) -> Result<String> {
    std::fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(hex(&Sha256::digest(bytes)))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    write(path, &bytes).map(drop)
}

/// The envelope every JSON artifact shares.
fn report(command: &str, cfg: &RunConfig, body: Value) -> Value {
    json!({
        "provenance": Provenance::new(command, cfg),
        "config": cfg,
        "result": body,
    })
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let g = &cfg.gen;
    let ds = generate_dataset(g.count, g.width, g.height, cfg.seed, &g.params)?;
    write_dataset(&ds, out)?;
    write_json(&out.join("provenance.json"), &report("gen", cfg, json!({"samples": ds.len()})))?;
    println!("wrote {} scenes of {}x{} to {}", ds.len(), g.width, g.height, out.display());
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.dataset.as_ref().ok_or_else(|| Error::Config("a dataset directory is required (--dataset)".into()))?;
    let ds = load_dataset(dir)?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {} is empty", dir.display())));
    }
    Ok(ds)
}

/// Indices of the named split; the partition depends only on the seed.
fn split_indices(cfg: &RunConfig, n: usize, name: &str) -> Result<Vec<usize>> {
    let s = split(n, cfg.split, cfg.seed)?;
    Ok(match name {
        "train" => s.train,
        "val" => s.val,
        "test" => s.test,
        _ => (0..n).collect(),
    })
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let ds = dataset(cfg)?;
    let spec = cfg.resolved_spec()?;
    let tcfg = cfg.train_config();
    let (tr, va) = (split_indices(cfg, ds.len(), "train")?, split_indices(cfg, ds.len(), "val")?);
    let pick = |idx: &[usize]| -> Vec<SegmentationSample> { idx.iter().map(|&i| ds.samples[i].clone()).collect() };
    let (train_set, val_set) = (pick(&tr), pick(&va));
    mkdir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let ckpt = out.join("checkpoint");
    let mut model = Model::new(&spec, cfg.seed)?;
    let rep = train::train(&mut model, cfg.task, &train_set, &val_set, &tcfg, Some(&ckpt), |e| {
        eprintln!("epoch {} loss {:.5} val mIoU {:.4} lr {:.2e}", e.epoch, e.train_loss, e.val_mean_iou, e.lr);
    })?;
    let prov = Provenance::new("train", cfg);
    let meta = json!({"provenance": prov, "epoch": rep.best_epoch, "val_mean_iou": rep.best_val_iou});
    save_checkpoint(&model, &ckpt, meta)?;
    write_history(out.join("history.csv"), &rep.history)?;
    let body = json!({"model": spec, "train": tcfg, "train_samples": tr.len(), "val_samples": va.len(), "report": rep});
    write_json(&out.join("train_report.json"), &report("train", cfg, body))?;
    println!("best epoch {} val mIoU {:.4}; checkpoint {}", rep.best_epoch, rep.best_val_iou, ckpt.display());
    Ok(())
}

/// Loads the checkpoint and applies the config's model and crop settings.
fn checkpoint_model(cfg: &RunConfig) -> Result<Model> {
    let dir = cfg.checkpoint.as_ref().ok_or_else(|| Error::Config("a checkpoint directory is required (--checkpoint)".into()))?;
    let (mut model, _) = load_checkpoint(dir)?;
    if let Some(k) = cfg.model {
        if k != model.kind() {
            return Err(Error::Config(format!("checkpoint holds {}, not {k}", model.kind())));
        }
    }
    if model.spec.classes() != cfg.task.classes() {
        return Err(Error::Config(format!("checkpoint has {} outputs, task {:?} needs {}", model.spec.classes(), cfg.task, cfg.task.classes())));
    }
    if let Some((w, h)) = cfg.crop {
        if model.spec.crop_size() != Some((w, h)) {
            if model.kind() != ModelKind::InternalCrop {
                return Err(Error::Config(format!("{} was trained with crop {:?}", model.kind(), model.spec.crop_size())));
            }
            model.spec.set_crop(w, h)?;
        }
    }
    Ok(model)
}

fn passes(spec: &ModelSpec, ai: usize) -> usize {
    if spec.kind.tiled() { 1 + ai } else { 1 }
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let model = checkpoint_model(cfg)?;
    let ds = dataset(cfg)?;
    let idx = split_indices(cfg, ds.len(), &cfg.eval_split)?;
    if idx.is_empty() {
        return Err(Error::InvalidArgument(format!("split {:?} is empty", cfg.eval_split)));
    }
    let samples: Vec<SegmentationSample> = idx.iter().map(|&i| ds.samples[i].clone()).collect();
    let ev = train::evaluate(&model, cfg.task, &samples, cfg.ai)?;
    let table = MetricsReport::new(&ev.metrics, &cfg.task.class_names());
    let grid = model.grid(ds.manifest.width, ds.manifest.height)?;
    let body = json!({
        "model": model.kind(),
        "task": cfg.task,
        "split": cfg.eval_split,
        "samples": samples.len(),
        "ai": cfg.ai,
        "passes_per_image": passes(&model.spec, cfg.ai),
        "grid": grid,
        "metrics": table,
    });
    mkdir(out)?;
    write_json(&out.join("metrics.json"), &report("eval", cfg, body))?;
    for row in table.classes.iter().chain([&table.mean]) {
        println!("{:<16} P {:6.2} R {:6.2} F1 {:6.2} IoU {:6.2}", row.class, row.precision, row.recall, row.f1, row.iou);
    }
    Ok(())
}

const OVERLAY: [[f32; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.10],
    [0.15, 0.30, 0.95],
    [0.95, 0.80, 0.10],
    [0.80, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.50, 0.10],
];

/// Half-transparent class colours over the image. Masks smaller than the
/// image (low-resolution outputs) are sampled nearest.
fn overlay(image: &Tensor<f32>, mask: &Mask, multilabel: bool) -> Tensor<f32> {
    let [_, _, h, w] = image.shape().dims();
    let (sy, sx) = (mask.height as f64 / h as f64, mask.width as f64 / w as f64);
    let colour = |y: usize, x: usize| -> Option<[f32; 3]> {
        let (my, mx) = ((y as f64 * sy) as usize, (x as f64 * sx) as usize);
        if multilabel {
            (0..mask.channels).rev().find(|&c| mask.at(c, my, mx) != 0).map(|c| OVERLAY[1 + c % 7])
        } else {
            let k = mask.at(0, my, mx) as usize;
            (k != 0).then(|| OVERLAY[1 + (k - 1) % 7])
        }
    };
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let v = image.at(0, c, y, x);
        colour(y, x).map_or(v, |rgb| 0.5 * v + 0.5 * rgb[c])
    })
}

fn infer_inputs(cfg: &RunConfig) -> Result<Vec<(String, Tensor<f32>)>> {
    let input = cfg.input.as_ref().or(cfg.dataset.as_ref()).ok_or_else(|| {
        Error::Config("infer needs an image file or dataset directory (--input)".into())
    })?;
    if input.is_dir() {
        let ds = load_dataset(input)?;
        let idx = split_indices(cfg, ds.len(), &cfg.eval_split)?;
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!("split {:?} is empty", cfg.eval_split)));
        }
        return Ok(idx.into_iter().map(|i| (ds.manifest.samples[i].clone(), ds.samples[i].image.clone())).collect());
    }
    let id = input.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    Ok(vec![(id, read_image(input)?)])
}

pub fn infer(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let model = checkpoint_model(cfg)?;
    let inputs = infer_inputs(cfg)?;
    let (masks_dir, overlay_dir) = (out.join("masks"), out.join("overlays"));
    mkdir(&masks_dir)?;
    mkdir(&overlay_dir)?;
    let prov = Provenance::new("infer", cfg).line();
    let mode = cfg.task.mode();
    let multilabel = mode == hrseg::loss::LossMode::Multilabel;
    let names = cfg.task.class_names();
    let mut images = Vec::new();
    for (id, image) in &inputs {
        let mask = model.predict(image, mode, cfg.ai)?;
        let mut files = Vec::new();
        let planes: Vec<(PathBuf, Mask)> = if multilabel {
            (0..mask.channels).map(|c| (masks_dir.join(format!("{id}_{}.pgm", names[c])), mask.select(&[c]))).collect()
        } else {
            vec![(masks_dir.join(format!("{id}.pgm")), mask.clone())]
        };
        for (path, m) in &planes {
            let sha = write(path, &annotate(encode_pgm(m), &prov))?;
            files.push(json!({"path": path.strip_prefix(out).unwrap_or(path), "sha256": sha}));
        }
        let opath = overlay_dir.join(format!("{id}.ppm"));
        let osha = write(&opath, &annotate(encode_ppm(&overlay(image, &mask, multilabel))?, &prov))?;
        images.push(json!({
            "id": id,
            "width": image.shape().w(),
            "height": image.shape().h(),
            "masks": files,
            "overlay": {"path": opath.strip_prefix(out).unwrap_or(&opath), "sha256": osha},
        }));
    }
    let body = json!({"model": model.kind(), "task": cfg.task, "ai": cfg.ai, "passes_per_image": passes(&model.spec, cfg.ai), "images": images});
    write_json(&out.join("report.json"), &report("infer", cfg, body))?;
    println!("wrote masks for {} images to {}", inputs.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct Measured {
    input: [usize; 4],
    compound_peak_bytes: u64,
    direct_peak_bytes: u64,
    ratio: f64,
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let classes = cfg.task.classes();
    let compound = ModelSpec::toy(ModelKind::TrsNet, classes);
    let direct = ModelSpec::toy(ModelKind::InternalCrop, classes);
    let uniform = ModelSpec::toy(ModelKind::BaselineUniform, classes);
    let reports: Vec<MemoryReport> =
        [&compound, &direct, &uniform].iter().map(|s| membench::account(s, cfg.bench_input)).collect::<Result<_>>()?;
    let ratio = reports[0].peak_bytes as f64 / reports[1].peak_bytes as f64;
    let measured = match cfg.bench_measure {
        Some(input) => {
            let c = membench::measure(&Model::new(&compound, cfg.seed)?, input, MEASURE_BUDGET)?;
            let d = membench::measure(&Model::new(&direct, cfg.seed)?, input, MEASURE_BUDGET)?;
            Some(Measured { input, compound_peak_bytes: c, direct_peak_bytes: d, ratio: c as f64 / d as f64 })
        }
        None => None,
    };
    for r in &reports {
        println!("{}\n", r.table());
    }
    println!("compound / direct analytic peak ratio at {:?}: {ratio:.4}", cfg.bench_input);
    if let Some(m) = &measured {
        println!("compound / direct measured peak ratio at {:?}: {:.4}", m.input, m.ratio);
    }
    mkdir(out)?;
    let body = json!({"input": cfg.bench_input, "reports": reports, "peak_ratio": ratio, "measured": measured});
    write_json(&out.join("bench.json"), &report("bench", cfg, body))
}

pub fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let r = gradsuite::run(cfg.seed)?;
    print!("{}", r.summary());
    if let Some(out) = &cfg.out {
        mkdir(out)?;
        write_json(&out.join("gradcheck.json"), &report("gradcheck", cfg, serde_json::to_value(&r)?))?;
    }
    if !r.passed() {
        return Err(Error::Numerical(format!("gradient check above {:e} for {}", r.tolerance, r.failures().join(", "))));
    }
    println!("all {} ops and {} models within {:e}", r.ops.len(), r.models.len(), r.tolerance);
    Ok(())
}
