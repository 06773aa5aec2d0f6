//! Focal loss for softmax (one label per pixel) and sigmoid (independent
//! binary channels) heads.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Lower clamp on probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Multiclass,
    Multilabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alpha {
    Scalar(f64),
    PerClass(Vec<f64>),
}

impl Alpha {
    fn get(&self, class: usize) -> f64 {
        match self {
            Alpha::Scalar(a) => *a,
            Alpha::PerClass(v) => v[class],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalLossConfig {
    pub gamma: f64,
    pub alpha: Alpha,
    pub mode: LossMode,
}

impl FocalLossConfig {
    pub fn multiclass() -> Self {
        FocalLossConfig { gamma: 2.0, alpha: Alpha::Scalar(1.0), mode: LossMode::Multiclass }
    }

    pub fn multilabel() -> Self {
        FocalLossConfig { gamma: 2.0, alpha: Alpha::Scalar(1.0), mode: LossMode::Multilabel }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        let ok = match &self.alpha {
            Alpha::Scalar(a) => *a > 0.0,
            Alpha::PerClass(v) => {
                if v.len() != classes {
                    return Err(Error::Config(format!("{} alpha weights for {classes} classes", v.len())));
                }
                v.iter().all(|&a| a > 0.0)
            }
        };
        if !ok {
            return Err(Error::Config("focal alpha must be > 0".into()));
        }
        Ok(())
    }
}

/// `-alpha (1 - p)^gamma log p` and its derivative in `p`, from `log p`.
fn focal_term(log_p: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let clamped = log_p < PROB_FLOOR.ln();
    let lp = log_p.max(PROB_FLOOR.ln());
    let p = lp.exp();
    let q = (1.0 - p).max(0.0);
    let value = -alpha * q.powf(gamma) * lp;
    let dlog = if clamped { 0.0 } else { 1.0 / p };
    let dmod = if gamma == 0.0 || q == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * lp };
    (value, alpha * (dmod - q.powf(gamma) * dlog))
}

/// Per-pixel focal value for a probability of the true state, for
/// reference and plotting.
pub fn focal_value(p_t: f64, gamma: f64, alpha: f64) -> f64 {
    focal_term(p_t.ln(), gamma, alpha).0
}

fn log_sigmoid(z: f64) -> f64 {
    // log(1 / (1 + e^-z)) without overflow
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Loss value and logit gradient, without a graph.
///
/// Multiclass `targets` hold one class index per pixel (`N·H·W`);
/// multilabel `targets` hold a {0,1} state per logit (`N·C·H·W`).
pub fn focal_loss_value<T: Scalar>(logits: &Tensor<T>, targets: &[u8], cfg: &FocalLossConfig) -> Result<(f64, Tensor<T>)> {
    let [n, c, h, w] = logits.shape().dims();
    cfg.validate(c)?;
    let hw = h * w;
    let z = logits.data();
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    let mut total = 0.0;
    match cfg.mode {
        LossMode::Multiclass => {
            if targets.len() != n * hw {
                return Err(Error::invalid_shape(
                    "focal_loss",
                    format!("{} targets for {n}x{h}x{w} pixels", targets.len()),
                ));
            }
            let count = (n * hw) as f64;
            let mut row = vec![0.0f64; c];
            for b in 0..n {
                for px in 0..hw {
                    let t = targets[b * hw + px] as usize;
                    if t >= c {
                        return Err(Error::InvalidArgument(format!("label {t} out of range for {c} classes")));
                    }
                    let at = |k: usize| (b * c + k) * hw + px;
                    let max = (0..c).map(|k| z[at(k)].f64()).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (k, r) in row.iter_mut().enumerate() {
                        *r = (z[at(k)].f64() - max).exp();
                        sum += *r;
                    }
                    let log_pt = z[at(t)].f64() - max - sum.ln();
                    let (v, dp) = focal_term(log_pt, cfg.gamma, cfg.alpha.get(t));
                    total += v;
                    let pt = log_pt.exp();
                    for (k, r) in row.iter().enumerate() {
                        let pk = r / sum;
                        let dz = dp * pt * (if k == t { 1.0 } else { 0.0 } - pk);
                        gd[at(k)] = T::c(dz / count);
                    }
                }
            }
            Ok((total / count, grad))
        }
        LossMode::Multilabel => {
            if targets.len() != z.len() {
                return Err(Error::invalid_shape(
                    "focal_loss",
                    format!("{} targets for {} logits", targets.len(), z.len()),
                ));
            }
            let count = z.len() as f64;
            for (i, (&zi, &y)) in z.iter().zip(targets).enumerate() {
                if y > 1 {
                    return Err(Error::InvalidArgument(format!("binary target {y} is not 0 or 1")));
                }
                let ch = (i / hw) % c;
                let zi = zi.f64();
                let (log_pt, sign) = if y == 1 { (log_sigmoid(zi), 1.0) } else { (log_sigmoid(-zi), -1.0) };
                // The weight of a binary channel applies to its positive state.
                let alpha = if y == 1 { cfg.alpha.get(ch) } else { 1.0 };
                let (v, dp) = focal_term(log_pt, cfg.gamma, alpha);
                total += v;
                let pt = log_pt.exp();
                gd[i] = T::c(dp * sign * pt * (1.0 - pt) / count);
            }
            Ok((total / count, grad))
        }
    }
}

/// Records the focal loss of `logits` as a scalar graph node.
pub fn focal_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, targets: &[u8], cfg: &FocalLossConfig) -> Result<Var> {
    let (value, grad) = focal_loss_value(g.value(logits), targets, cfg)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("focal loss".into()));
    }
    g.loss(logits, T::c(value), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn half_probability_gamma_two() {
        // Two equal logits give p_t = 0.5.
        let logits = Tensor::<f64>::zeros([1, 2, 1, 1]);
        let (v, _) = focal_loss_value(&logits, &[1], &FocalLossConfig::multiclass()).unwrap();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
        let (v, _) = focal_loss_value(&Tensor::<f64>::zeros([1, 1, 1, 1]), &[1], &FocalLossConfig::multilabel()).unwrap();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_is_cross_entropy() {
        let mut r = rng(1);
        for _ in 0..20 {
            let logits = Tensor::<f64>::from_fn([2, 4, 3, 3], |_| r.gen_range(-4.0..4.0));
            let targets: Vec<u8> = (0..18).map(|_| r.gen_range(0..4)).collect();
            let cfg = FocalLossConfig { gamma: 0.0, ..FocalLossConfig::multiclass() };
            let (v, _) = focal_loss_value(&logits, &targets, &cfg).unwrap();
            let mut ce = 0.0;
            for b in 0..2 {
                for px in 0..9 {
                    let zs: Vec<f64> = (0..4).map(|k| logits.data()[(b * 4 + k) * 9 + px]).collect();
                    let lse = zs.iter().map(|z| z.exp()).sum::<f64>().ln();
                    ce += lse - zs[targets[b * 9 + px] as usize];
                }
            }
            assert!((v - ce / 18.0).abs() < 1e-6);
        }
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        let logits = Tensor::<f64>::from_vec([1, 2, 1, 1], vec![-30.0, 30.0]).unwrap();
        let (v, _) = focal_loss_value(&logits, &[1], &FocalLossConfig::multiclass()).unwrap();
        assert!(v < 1e-20);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = Tensor::<f64>::from_vec([1, 2, 1, 1], vec![500.0, -500.0]).unwrap();
        let (v, g) = focal_loss_value(&logits, &[1], &FocalLossConfig::multiclass()).unwrap();
        assert!(v.is_finite() && g.all_finite());
        assert!((v + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(3);
        for mode in [LossMode::Multiclass, LossMode::Multilabel] {
            for gamma in [0.0, 0.5, 2.0] {
                let logits = Tensor::<f64>::from_fn([2, 3, 2, 2], |_| r.gen_range(-3.0..3.0));
                let targets: Vec<u8> = match mode {
                    LossMode::Multiclass => (0..8).map(|_| r.gen_range(0..3)).collect(),
                    LossMode::Multilabel => (0..24).map(|_| r.gen_range(0..2)).collect(),
                };
                let cfg = FocalLossConfig { gamma, alpha: Alpha::PerClass(vec![0.5, 1.0, 2.0]), mode };
                let (_, g) = focal_loss_value(&logits, &targets, &cfg).unwrap();
                for i in 0..logits.numel() {
                    let h = 1e-5;
                    let mut a = logits.clone();
                    a.data_mut()[i] += h;
                    let mut b = logits.clone();
                    b.data_mut()[i] -= h;
                    let fd = (focal_loss_value(&a, &targets, &cfg).unwrap().0
                        - focal_loss_value(&b, &targets, &cfg).unwrap().0)
                        / (2.0 * h);
                    let an = g.data()[i];
                    assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-5, "{mode:?} {gamma} {i}: {fd} {an}");
                }
            }
        }
    }

    #[test]
    fn multilabel_alpha_weights_positives_only() {
        let logits = Tensor::<f64>::zeros([1, 2, 1, 1]);
        let cfg = FocalLossConfig { alpha: Alpha::PerClass(vec![3.0, 5.0]), ..FocalLossConfig::multilabel() };
        let base = 0.25 * 2f64.ln();
        let (neg, _) = focal_loss_value(&logits, &[0, 0], &cfg).unwrap();
        assert!((neg - base).abs() < 1e-12);
        let (pos, _) = focal_loss_value(&logits, &[1, 0], &cfg).unwrap();
        assert!((pos - (3.0 + 1.0) / 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let logits = Tensor::<f64>::zeros([1, 2, 2, 2]);
        let cfg = FocalLossConfig::multiclass();
        assert!(focal_loss_value(&logits, &[0, 1, 1], &cfg).is_err());
        assert!(focal_loss_value(&logits, &[0, 1, 1, 2], &cfg).is_err());
        assert!(focal_loss_value(&logits, &[0; 4], &FocalLossConfig { gamma: -1.0, ..cfg.clone() }).is_err());
        let a = FocalLossConfig { alpha: Alpha::PerClass(vec![1.0]), ..cfg };
        assert!(focal_loss_value(&logits, &[0; 4], &a).is_err());
        assert!(focal_loss_value(&logits, &[0; 4], &FocalLossConfig::multilabel()).is_err());
    }

    #[test]
    fn alpha_deserialises_from_scalar_or_vector() {
        let c: FocalLossConfig = serde_json::from_str(r#"{"gamma":2,"alpha":0.5,"mode":"multilabel"}"#).unwrap();
        assert_eq!(c.alpha, Alpha::Scalar(0.5));
        let c: FocalLossConfig = serde_json::from_str(r#"{"gamma":2,"alpha":[1,2],"mode":"multiclass"}"#).unwrap();
        assert_eq!(c.alpha, Alpha::PerClass(vec![1.0, 2.0]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn non_negative_and_decreasing_in_pt(p in 1e-6f64..0.999, dp in 1e-4f64..0.5, gamma in 0.01f64..5.0) {
                let q = (p + dp).min(1.0 - 1e-9);
                let (a, b) = (focal_value(p, gamma, 1.0), focal_value(q, gamma, 1.0));
                prop_assert!(a >= 0.0 && b >= 0.0);
                prop_assert!(b < a);
            }
        }
    }
}
