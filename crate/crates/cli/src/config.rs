//! Run configuration: a JSON file merged with command-line flags.

use std::path::{Path, PathBuf};

use hrseg::loss::FocalLossConfig;
use hrseg::synth::{AugmentPolicy, SceneParams, Task};
use hrseg::train::{ModelKind, ModelSpec, TrainConfig};
use hrseg::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const AI_CHOICES: [usize; 3] = [0, 4, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub params: SceneParams,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { count: 40, width: 448, height: 448, params: SceneParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_task")]
    pub task: Task,
    /// Defaults to trsnet for training and to the checkpoint's model after.
    #[serde(default)]
    pub model: Option<ModelKind>,
    /// Full architecture override; `model` must agree with it.
    #[serde(default)]
    pub model_spec: Option<ModelSpec>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Image file or dataset directory for `infer`.
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub max_lr: Option<f64>,
    #[serde(default)]
    pub loss: Option<FocalLossConfig>,
    #[serde(default)]
    pub augment: Option<AugmentPolicy>,
    /// Train/val/test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Which split `eval` and dataset `infer` read.
    #[serde(default = "default_eval_split")]
    pub eval_split: String,
    /// Extra padded passes of augmented inference.
    #[serde(default)]
    pub ai: usize,
    /// `(width, height)` of grid crops.
    #[serde(default)]
    pub crop: Option<(usize, usize)>,
    #[serde(default)]
    pub gen: GenConfig,
    /// `(N, C, H, W)` of the memory comparison.
    #[serde(default = "default_bench_input")]
    pub bench_input: [usize; 4],
    /// Input of the measured pass; `None` skips measurement.
    #[serde(default)]
    pub bench_measure: Option<[usize; 4]>,
}

fn default_task() -> Task {
    Task::Components
}

fn default_epochs() -> usize {
    30
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_eval_split() -> String {
    "test".into()
}

fn default_bench_input() -> [usize; 4] {
    [1, 3, 1080, 1920]
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if !AI_CHOICES.contains(&self.ai) {
            return Err(Error::Config(format!("ai must be one of {AI_CHOICES:?}, got {}", self.ai)));
        }
        if !["train", "val", "test", "all"].contains(&self.eval_split.as_str()) {
            return Err(Error::Config(format!("eval_split must be train, val, test or all, got {:?}", self.eval_split)));
        }
        if let (Some(m), Some(s)) = (self.model, &self.model_spec) {
            if m != s.kind {
                return Err(Error::Config(format!("model {m} disagrees with model_spec kind {}", s.kind)));
            }
        }
        Ok(())
    }

    pub fn model_kind(&self) -> ModelKind {
        self.model.or(self.model_spec.as_ref().map(|s| s.kind)).unwrap_or(ModelKind::TrsNet)
    }

    /// The architecture to build for training.
    pub fn resolved_spec(&self) -> Result<ModelSpec> {
        let mut spec = match &self.model_spec {
            Some(s) => s.clone(),
            None => ModelSpec::toy(self.model_kind(), self.task.classes()),
        };
        if let Some((w, h)) = self.crop {
            spec.set_crop(w, h)?;
        }
        spec.validate()?;
        if spec.classes() != self.task.classes() {
            return Err(Error::Config(format!(
                "model has {} outputs, task {:?} needs {}",
                spec.classes(),
                self.task,
                self.task.classes()
            )));
        }
        Ok(spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.model_kind(), self.task, self.epochs, self.seed);
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.max_lr {
            cfg.schedule.max_lr = lr;
        }
        if let Some(l) = &self.loss {
            cfg.loss = l.clone();
        }
        cfg.augment = self.augment.clone();
        cfg
    }

    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(&bytes))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Config("an output directory is required (--out)".into()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn parse_crop(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let p = |v: &str| v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad crop side {v:?}"));
    Ok((p(w)?, p(h)?))
}

/// What every artifact records so it can be regenerated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Provenance {
            tool: env!("CARGO_BIN_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256: cfg.sha256(),
            seed: cfg.seed,
        }
    }

    /// One-line form for image headers.
    pub fn line(&self) -> String {
        format!("{} {} {} config={} seed={}", self.tool, self.version, self.command, self.config_sha256, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let e = serde_json::from_str::<RunConfig>(r#"{"task":"components","colour":1}"#);
        assert!(e.is_err());
        let e = serde_json::from_str::<RunConfig>(r#"{"gen":{"count":1,"width":8,"height":8,"extra":0}}"#);
        assert!(e.is_err());
    }

    #[test]
    fn defaults_and_names() {
        let c: RunConfig = serde_json::from_str(r#"{"task":"crack-rebar-spall","model":"internal-crop-480x270"}"#).unwrap();
        assert_eq!(c.model_kind(), ModelKind::InternalCrop);
        assert_eq!(c.epochs, 30);
        assert_eq!(c.resolved_spec().unwrap().crop_size(), Some((480, 270)));
        assert_eq!(RunConfig::default().model_kind(), ModelKind::TrsNet);
    }

    #[test]
    fn ai_must_be_a_listed_choice() {
        let c = RunConfig { ai: 3, ..RunConfig::default() };
        assert!(c.validate().is_err());
        assert!(RunConfig { ai: 8, ..RunConfig::default() }.validate().is_ok());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_eq!(a.sha256(), RunConfig::default().sha256());
        assert_ne!(a.sha256(), b.sha256());
        assert_eq!(a.sha256().len(), 64);
    }

    #[test]
    fn crop_flag_parsing() {
        assert_eq!(parse_crop("480x270"), Ok((480, 270)));
        assert!(parse_crop("480").is_err());
        assert!(parse_crop("0x5").is_err());
    }
}
