//! Confusion counts and the precision / recall / F1 / IoU family.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One-vs-rest counts per class (or per channel for multilabel heads).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix { tp: vec![0; n], fp: vec![0; n], fn_: vec![0; n], tn: vec![0; n] }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    fn check_len(pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::InvalidArgument(format!(
                "prediction has {} pixels, truth {}",
                pred.len(),
                truth.len()
            )));
        }
        Ok(())
    }

    /// Adds label maps holding one class index per pixel.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        Self::check_len(pred, truth)?;
        let n = self.classes();
        if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l as usize >= n) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {n} classes")));
        }
        let mut pairs = vec![0u64; n * n];
        for (&p, &t) in pred.iter().zip(truth) {
            pairs[t as usize * n + p as usize] += 1;
        }
        let total = pred.len() as u64;
        for k in 0..n {
            let tp = pairs[k * n + k];
            let row: u64 = pairs[k * n..(k + 1) * n].iter().sum();
            let col: u64 = (0..n).map(|t| pairs[t * n + k]).sum();
            self.tp[k] += tp;
            self.fn_[k] += row - tp;
            self.fp[k] += col - tp;
            self.tn[k] += total + tp - row - col;
        }
        Ok(())
    }

    /// Adds binary maps laid out `(N, C, H, W)` with `C` = class count.
    pub fn accumulate_binary(&mut self, pred: &[u8], truth: &[u8], plane: usize) -> Result<()> {
        Self::check_len(pred, truth)?;
        let n = self.classes();
        if plane == 0 || pred.len() % (plane * n) != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values do not tile {n} channels of {plane} pixels",
                pred.len()
            )));
        }
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if p > 1 || t > 1 {
                return Err(Error::InvalidArgument("binary maps must hold 0 or 1".into()));
            }
            let k = (i / plane) % n;
            match (p, t) {
                (1, 1) => self.tp[k] += 1,
                (1, 0) => self.fp[k] += 1,
                (0, 1) => self.fn_[k] += 1,
                _ => self.tn[k] += 1,
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::InvalidArgument("cannot merge confusion matrices of different size".into()));
        }
        for k in 0..self.classes() {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.fn_[k] += other.fn_[k];
            self.tn[k] += other.tn[k];
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

/// `num / den`, or 1 when the class appears in neither map and 0 when it
/// appears in one only.
fn ratio(num: u64, den: u64, absent: bool) -> f64 {
    if den == 0 {
        if absent {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted class means.
    pub mean: ClassMetrics,
}

pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|k| {
            let (tp, fp, fn_) = (cm.tp[k], cm.fp[k], cm.fn_[k]);
            let absent = tp + fp + fn_ == 0;
            ClassMetrics {
                precision: ratio(tp, tp + fp, absent),
                recall: ratio(tp, tp + fn_, absent),
                f1: ratio(2 * tp, 2 * tp + fp + fn_, absent),
                iou: ratio(tp, tp + fp + fn_, absent),
            }
        })
        .collect();
    let n = per_class.len().max(1) as f64;
    let mut mean = ClassMetrics::default();
    for m in &per_class {
        mean.precision += m.precision / n;
        mean.recall += m.recall / n;
        mean.f1 += m.f1 / n;
        mean.iou += m.iou / n;
    }
    Metrics { per_class, mean }
}

/// Per-pixel argmax over channels, `(N, C, H, W)` to `N·H·W` labels.
pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let [n, c, h, w] = logits.shape().dims();
    let hw = h * w;
    let d = logits.data();
    let mut out = vec![0u8; n * hw];
    for b in 0..n {
        for px in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * hw + px] > d[(b * c + best) * hw + px] {
                    best = k;
                }
            }
            out[b * hw + px] = best as u8;
        }
    }
    out
}

/// Sigmoid > 0.5 per logit, i.e. logit > 0.
pub fn threshold<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    logits.data().iter().map(|&z| u8::from(z > T::zero())).collect()
}

/// Percent, rounded to two decimals.
fn pct(v: f64) -> f64 {
    (v * 10000.0).round() / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

impl ClassRow {
    fn new(class: String, m: &ClassMetrics) -> Self {
        ClassRow { class, precision: pct(m.precision), recall: pct(m.recall), f1: pct(m.f1), iou: pct(m.iou) }
    }
}

/// Metric table in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassRow>,
    pub mean: ClassRow,
}

impl MetricsReport {
    pub fn new(m: &Metrics, names: &[String]) -> Self {
        let classes = m
            .per_class
            .iter()
            .enumerate()
            .map(|(k, c)| ClassRow::new(names.get(k).cloned().unwrap_or_else(|| format!("class{k}")), c))
            .collect();
        MetricsReport { classes, mean: ClassRow::new("mean".into(), &m.mean) }
    }
}
