//! `key = value` run configuration.

use std::fmt::Write as _;
use std::fmt;
use std::str::FromStr;

use super::{DataError, Result};
use crate::loss::LossKind;
use crate::model::{ModelConfig, VrpeKind};
use crate::viewgen::ViewConfig;

/// Splits `key = value` lines, dropping blanks and `#` comments. Returns
/// `(line number, key, value)`.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(DataError::Config {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            });
        };
        out.push((i + 1, k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

/// Named augmentation recipes applied after cropping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    None,
    Jitter,
    Scale,
    Rotation,
    ScaleTranslate,
    RotationScaleTranslate,
}

impl Augmentation {
    pub const ALL: [Augmentation; 6] = [
        Self::None,
        Self::Jitter,
        Self::Scale,
        Self::Rotation,
        Self::ScaleTranslate,
        Self::RotationScaleTranslate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Jitter => "jitter",
            Self::Scale => "scale",
            Self::Rotation => "rotation",
            Self::ScaleTranslate => "scale_translate",
            Self::RotationScaleTranslate => "rotation_scale_translate",
        }
    }

    /// Sets the rotate/scale/translate/jitter switches of `view`.
    pub fn apply(self, view: &mut ViewConfig) {
        let (rotate, scale, translate, jitter) = match self {
            Self::None => (false, false, false, false),
            Self::Jitter => (false, false, false, true),
            Self::Scale => (false, true, false, false),
            Self::Rotation => (true, false, false, false),
            Self::ScaleTranslate => (false, true, true, false),
            Self::RotationScaleTranslate => (true, true, true, false),
        };
        view.rotate = rotate;
        view.scale = scale;
        view.translate = translate;
        view.jitter = jitter;
    }
}

impl FromStr for Augmentation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown augmentation {s:?}"))
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every hyperparameter of a pretraining run and its probes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub view: ViewConfig,
    pub loss_kind: LossKind,
    pub siamese: bool,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
    /// Reuse each cloud's first view pair at every step, so a fixed batch
    /// can be memorized.
    pub overfit: bool,
    /// Accepted for fidelity with the full recipe; has no effect.
    pub drop_path: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_full_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            view: ViewConfig::default(),
            loss_kind: LossKind::ChamferL2,
            siamese: true,
            lr: 1e-3,
            min_lr: 1e-6,
            weight_decay: 0.05,
            warmup_epochs: 2,
            epochs: 30,
            batch: 4,
            seed: 0,
            checkpoint_every: 0,
            overfit: false,
            drop_path: 0.0,
            probe_epochs: 100,
            probe_lr: 1e-3,
            probe_full_lr: 1e-4,
        }
    }

    /// The published pretraining recipe.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            lr: 5e-4,
            warmup_epochs: 10,
            epochs: 300,
            batch: 128,
            drop_path: 0.1,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(DataError::Invalid(m));
        if !(self.view.r_min > 0.0 && self.view.r_min <= 1.0) {
            return fail(format!("r_min {} must be in (0, 1]", self.view.r_min));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(self.min_lr.is_finite() && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return fail(format!("min_lr {} must be in [0, lr]", self.min_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.epochs == 0 || self.batch == 0 {
            return fail("epochs and batch must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return fail(format!("drop_path {} must be in [0, 1)", self.drop_path));
        }
        if !(self.probe_lr > 0.0 && self.probe_full_lr > 0.0) {
            return fail("probe learning rates must be positive".into());
        }
        if self.model.vrpe_kind == VrpeKind::Ape && (self.view.normalize || self.view.rotate) {
            return fail("vrpe_kind = ape needs normalize = false and rotate = false".into());
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(format!("{key}: expected true/false, got {v:?}")),
            }
        }
        match key {
            "preset" => {
                *self = match value {
                    "desk" => Self::desk(),
                    "paper" => Self::paper(),
                    _ => return Err(format!("unknown preset {value:?} (desk or paper)")),
                }
            }
            "D" | "dim" => self.model.dim = num(key, value)?,
            "heads" => self.model.heads = num(key, value)?,
            "enc_blocks" => self.model.enc_blocks = num(key, value)?,
            "dec_blocks" => self.model.dec_blocks = num(key, value)?,
            "mlp_ratio" => self.model.mlp_ratio = num(key, value)?,
            "n" => self.model.n_patches = num(key, value)?,
            "k" => self.model.patch_size = num(key, value)?,
            "vrpe_kind" => self.model.vrpe_kind = value.parse().map_err(|e: crate::model::ModelError| e.to_string())?,
            "loss_kind" => self.loss_kind = value.parse().map_err(|e: crate::loss::LossError| e.to_string())?,
            "siamese" => self.siamese = flag(key, value)?,
            "r_min" => self.view.r_min = num(key, value)?,
            "crop" => {
                if !flag(key, value)? {
                    self.view.r_min = 1.0;
                }
            }
            "augmentation" => value.parse::<Augmentation>()?.apply(&mut self.view),
            "normalize" => self.view.normalize = flag(key, value)?,
            "rotate" => self.view.rotate = flag(key, value)?,
            "scale" => self.view.scale = flag(key, value)?,
            "translate" => self.view.translate = flag(key, value)?,
            "jitter" => self.view.jitter = flag(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "min_lr" => self.min_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "overfit" => self.overfit = flag(key, value)?,
            "drop_path" => self.drop_path = num(key, value)?,
            "probe_epochs" => self.probe_epochs = num(key, value)?,
            "probe_lr" => self.probe_lr = num(key, value)?,
            "probe_full_lr" => self.probe_full_lr = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses a config file on top of the desk defaults. A `preset` line
    /// resets everything set before it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (line, key, value) in parse_kv(text)? {
            cfg.set(&key, &value).map_err(|msg| DataError::Config { line, msg })?;
        }
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let v = &self.view;
        let mut s = String::new();
        let mut put = |k: &str, val: String| {
            let _ = writeln!(s, "{k} = {val}");
        };
        put("D", m.dim.to_string());
        put("heads", m.heads.to_string());
        put("enc_blocks", m.enc_blocks.to_string());
        put("dec_blocks", m.dec_blocks.to_string());
        put("mlp_ratio", m.mlp_ratio.to_string());
        put("n", m.n_patches.to_string());
        put("k", m.patch_size.to_string());
        put("vrpe_kind", m.vrpe_kind.to_string());
        put("loss_kind", self.loss_kind.to_string());
        put("siamese", self.siamese.to_string());
        put("r_min", format!("{:?}", v.r_min));
        put("normalize", v.normalize.to_string());
        put("rotate", v.rotate.to_string());
        put("scale", v.scale.to_string());
        put("translate", v.translate.to_string());
        put("jitter", v.jitter.to_string());
        put("lr", format!("{:?}", self.lr));
        put("min_lr", format!("{:?}", self.min_lr));
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("warmup_epochs", self.warmup_epochs.to_string());
        put("epochs", self.epochs.to_string());
        put("batch", self.batch.to_string());
        put("seed", self.seed.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("overfit", self.overfit.to_string());
        put("drop_path", format!("{:?}", self.drop_path));
        put("probe_epochs", self.probe_epochs.to_string());
        put("probe_lr", format!("{:?}", self.probe_lr));
        put("probe_full_lr", format!("{:?}", self.probe_full_lr));
        s
    }
}

/// Text form of just the architecture, as stored in checkpoints.
pub(crate) fn model_config_text(m: &ModelConfig) -> String {
    RunConfig {
        model: *m,
        ..RunConfig::desk()
    }
    .to_text()
    .lines()
    .take(8)
    .map(|l| format!("{l}\n"))
    .collect()
}

pub(crate) fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let cfg = RunConfig::parse(text)?;
    cfg.model.validate()?;
    Ok(cfg.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for cfg in [RunConfig::desk(), RunConfig::paper()] {
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
        let mut odd = RunConfig::desk();
        odd.model.vrpe_kind = VrpeKind::Learnable;
        odd.loss_kind = LossKind::Cosine;
        odd.view.r_min = 0.35;
        odd.lr = 3.3e-4;
        assert_eq!(RunConfig::parse(&odd.to_text()).unwrap(), odd);
        let m = parse_model_config(&model_config_text(&odd.model)).unwrap();
        assert_eq!(m, odd.model);
    }

    #[test]
    fn presets_and_overrides() {
        let p = RunConfig::parse("preset = paper\nepochs = 5").unwrap();
        assert_eq!((p.lr, p.batch, p.epochs, p.warmup_epochs), (5e-4, 128, 5, 10));
        assert_eq!(p.model, ModelConfig::paper());
        let c = RunConfig::parse("crop = off").unwrap();
        assert_eq!(c.view.r_min, 1.0);
        let a = RunConfig::parse("augmentation = scale_translate").unwrap();
        assert!(!a.view.rotate && a.view.scale && a.view.translate && !a.view.jitter);
    }

    #[test]
    fn errors_are_located() {
        let e = RunConfig::parse("lr = 1e-3\nlearning_rate = 2").unwrap_err();
        assert!(matches!(e, DataError::Config { line: 2, .. }), "{e}");
        assert!(RunConfig::parse("lr 1e-3").is_err());
        assert!(RunConfig::parse("siamese = maybe").is_err());
        let mut c = RunConfig::parse("r_min = 1.5").unwrap();
        assert!(matches!(c.validate(), Err(DataError::Invalid(_))));
        c.view.r_min = 0.6;
        assert!(c.validate().is_ok());
        c.model.dim = 50;
        assert!(c.validate().is_err());
        let ape = RunConfig::parse("vrpe_kind = ape").unwrap();
        assert!(ape.validate().is_err());
        let ape = RunConfig::parse("vrpe_kind = ape\nnormalize = false\nrotate = false").unwrap();
        assert!(ape.validate().is_ok());
    }
}
