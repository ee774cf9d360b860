//! One pretrain-and-probe run per setting of a single axis.

use std::fmt;
use std::str::FromStr;

use super::{pretrain, probe, Protocol, Result, TrainError};
use crate::data::{Augmentation, Dataset, RunConfig};

pub const ABLATION_COLUMNS: &str = "axis_value,final_loss,probe_acc";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    VrpeKind,
    Augmentation,
    Crop,
    LossKind,
    Siamese,
    RMin,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        Self::VrpeKind,
        Self::Augmentation,
        Self::Crop,
        Self::LossKind,
        Self::Siamese,
        Self::RMin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::VrpeKind => "vrpe_kind",
            Self::Augmentation => "augmentation",
            Self::Crop => "crop",
            Self::LossKind => "loss_kind",
            Self::Siamese => "siamese",
            Self::RMin => "r_min",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::VrpeKind => &["sinusoid", "learnable", "ape", "none"],
            Self::Augmentation => &[
                "jitter",
                "scale",
                "rotation",
                "scale_translate",
                "rotation_scale_translate",
            ],
            Self::Crop => &["on", "off"],
            Self::LossKind => &["cd_l2", "cd_l1", "cos"],
            Self::Siamese => &["on", "off"],
            Self::RMin => &["0.2", "0.4", "0.6", "0.8", "1.0"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`. Absolute positional queries
    /// only make sense in a shared frame, so `vrpe_kind = ape` also turns
    /// off normalization and rotation.
    pub fn configure(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        if self == Self::Augmentation {
            value.parse::<Augmentation>().map_err(TrainError::Invalid)?;
        }
        cfg.set(self.name(), value).map_err(TrainError::Invalid)?;
        if self == Self::VrpeKind && value == "ape" {
            cfg.view.normalize = false;
            cfg.view.rotate = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for AblationAxis {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            TrainError::Invalid(format!(
                "unknown ablation axis {s:?} (vrpe_kind, augmentation, crop, loss_kind, siamese or r_min)"
            ))
        })
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis_value: String,
    /// Mean total loss over the last pretraining epoch.
    pub final_loss: f64,
    pub probe_acc: f64,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!("{},{:?},{:?}", self.axis_value, self.final_loss, self.probe_acc)
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_COLUMNS}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Pretrains and probes once per value; every row shares the base seed, so
/// initialization streams and the probe split are identical across rows.
pub fn run_ablation(
    axis: AblationAxis,
    values: &[String],
    base: &RunConfig,
    dataset: &Dataset,
    protocol: Protocol,
) -> Result<Vec<AblationRow>> {
    let configs = values
        .iter()
        .map(|v| axis.configure(base, v))
        .collect::<Result<Vec<_>>>()?;
    values
        .iter()
        .zip(configs)
        .map(|(value, cfg)| {
            let (model, log) = pretrain(&cfg, dataset, None)?;
            let result = probe(protocol, &model, dataset, &cfg)?;
            Ok(AblationRow {
                axis_value: value.clone(),
                final_loss: log.last_epoch_mean().unwrap_or(f64::NAN),
                probe_acc: result.accuracy,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tests::tiny_run;

    #[test]
    fn axes_parse_and_configure() {
        for a in AblationAxis::ALL {
            assert_eq!(a.name().parse::<AblationAxis>().unwrap(), a);
            let (cfg, _) = tiny_run();
            for v in a.default_values() {
                a.configure(&cfg, &v).unwrap();
            }
        }
        assert!("dropout".parse::<AblationAxis>().is_err());
        assert_eq!(AblationAxis::RMin.default_values().len(), 5);
        let (cfg, _) = tiny_run();
        assert_eq!(AblationAxis::Crop.configure(&cfg, "off").unwrap().view.r_min, 1.0);
        assert!(AblationAxis::RMin.configure(&cfg, "1.5").is_err());
        assert!(AblationAxis::Augmentation.configure(&cfg, "mixup").is_err());
    }

    #[test]
    fn crop_axis_gives_two_rows() {
        let (mut cfg, ds) = tiny_run();
        cfg.epochs = 1;
        let values = AblationAxis::Crop.default_values();
        let rows = run_ablation(AblationAxis::Crop, &values, &cfg, &ds, Protocol::MlpLinear).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].axis_value, "on");
        let csv = ablation_csv(&rows);
        assert!(csv.starts_with("axis_value,final_loss,probe_acc\non,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
