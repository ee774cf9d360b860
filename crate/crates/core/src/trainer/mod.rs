//! Pretraining loop, downstream probes, reconstruction export and ablations.
//!
//! Every random draw during training comes from a stream keyed by
//! `(seed, epoch, sample index)`, so a run is a pure function of its
//! configuration and dataset, and a resumed run replays exactly.

mod ablation;
mod probe;
mod reconstruct;

pub use ablation::{ablation_csv, run_ablation, AblationAxis, AblationRow, ABLATION_COLUMNS};
pub use probe::{probe, stratified_split, ProbeResult, Protocol, Split};
pub use reconstruct::{reconstruct_pair, ReconstructReport, RECONSTRUCT_FILES};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{self, epoch_order, save_checkpoint, stream_rng, Checkpoint, DataError, Dataset, RunConfig};
use crate::model::{ModelError, ModelState, PairSample};
use crate::tensor::{AdamW, AdamWConfig, LrSchedule, Tensor, TensorError};
use crate::viewgen::{generate_view_pair, ViewError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] crate::loss::LossError),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: u64 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub const LOG_COLUMNS: &str = "step,epoch,lr,loss_total,loss_1to2,loss_2to1,seconds";
pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// One optimizer step. Losses are batch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_1to2: f64,
    pub loss_2to1: f64,
    /// Wall time since the start of this process's run.
    pub seconds: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:.3}",
            self.step, self.epoch, self.lr, self.loss_total, self.loss_1to2, self.loss_2to1, self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// Mean total loss over the records of `epoch`.
    pub fn epoch_mean(&self, epoch: u64) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.loss_total)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn last_epoch_mean(&self) -> Option<f64> {
        self.records.last().and_then(|r| self.epoch_mean(r.epoch))
    }
}

/// `# key = value` lines describing the run, then the column header.
pub fn log_header(config: &RunConfig) -> String {
    let mut s: String = config.to_text().lines().map(|l| format!("# {l}\n")).collect();
    s.push_str(LOG_COLUMNS);
    s.push('\n');
    s
}

const TAG_VIEW: u64 = 0x5649_4557;
const TAG_INIT: u64 = 0x494e_4954;

pub fn init_seed(seed: u64) -> u64 {
    use rand::RngCore;
    stream_rng(seed, TAG_INIT, 0, 0).next_u64()
}

/// View pair for dataset record `index` at `epoch`.
pub fn training_sample(config: &RunConfig, dataset: &Dataset, epoch: u64, index: usize) -> Result<PairSample> {
    let epoch = if config.overfit { 0 } else { epoch };
    let mut rng = stream_rng(config.seed, TAG_VIEW, epoch, index as u64);
    let cloud = &dataset.samples[index].cloud;
    let pair = generate_view_pair(cloud, &config.view, &mut rng, index)?;
    Ok(PairSample::from_pair(&pair, config.model.n_patches, config.model.patch_size, &mut rng)?)
}

pub fn adamw_config(config: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    }
}

/// Resumable pretraining state.
pub struct Trainer<'d> {
    pub config: RunConfig,
    dataset: &'d Dataset,
    pub model: ModelState,
    pub optimizer: AdamW,
    /// Index of the next step to run.
    pub step: u64,
    pub schedule: LrSchedule,
    pub log: TrainLog,
    started: Instant,
}

impl<'d> Trainer<'d> {
    pub fn new(config: RunConfig, dataset: &'d Dataset) -> Result<Self> {
        config.validate()?;
        let model = ModelState::init(config.model, init_seed(config.seed))?;
        let optimizer = AdamW::new(adamw_config(&config), &model.params);
        Self::assemble(config, dataset, model, optimizer, 0)
    }

    /// Continues from a checkpoint written by an earlier run of `config`.
    pub fn resume(config: RunConfig, dataset: &'d Dataset, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.model.config != config.model {
            return Err(TrainError::Invalid(
                "checkpoint architecture differs from the run config".into(),
            ));
        }
        Self::assemble(config, dataset, ckpt.model, ckpt.optimizer, ckpt.step)
    }

    fn assemble(config: RunConfig, dataset: &'d Dataset, model: ModelState, optimizer: AdamW, step: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(TrainError::Invalid("dataset is empty".into()));
        }
        let spe = steps_per_epoch(&config, dataset);
        let schedule = LrSchedule {
            base_lr: config.lr,
            min_lr: config.min_lr,
            warmup_steps: config.warmup_epochs as u64 * spe,
            total_steps: config.epochs as u64 * spe,
        };
        Ok(Self {
            config,
            dataset,
            model,
            optimizer,
            step,
            schedule,
            log: TrainLog::default(),
            started: Instant::now(),
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        steps_per_epoch(&self.config, self.dataset)
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Dataset indices of the batch for `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, b) = (step / spe, (step % spe) as usize);
        let order = epoch_order(self.dataset.len(), self.config.seed, epoch);
        let start = b * self.config.batch;
        order[start..(start + self.config.batch).min(order.len())].to_vec()
    }

    /// Runs the next optimizer step and returns its record.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let epoch = step / self.steps_per_epoch();
        let batch = self.batch_indices(step);
        let mut grads: Vec<Option<Tensor>> = vec![None; self.model.params.len()];
        let (mut total, mut l12, mut l21) = (0.0, 0.0, 0.0);
        for &i in &batch {
            let sample = training_sample(&self.config, self.dataset, epoch, i)?;
            let mut sess = self.model.session();
            let (loss, report) = sess.cross_reconstruction(&sample, self.config.loss_kind, self.config.siamese)?;
            if !report.total.is_finite() {
                return Err(TrainError::NonFinite { what: "loss", step });
            }
            sess.backward(loss)?;
            for (acc, g) in grads.iter_mut().zip(sess.param_grads()) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
            total += report.total;
            l12 += report.l_1to2;
            l21 += report.l_2to1;
        }
        let scale = 1.0 / batch.len() as f64;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
            if !g.all_finite() {
                return Err(TrainError::NonFinite { what: "gradient", step });
            }
        }
        let lr = self.schedule.at(step);
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        if !self.model.params.all_finite() {
            return Err(TrainError::NonFinite { what: "parameter", step });
        }
        self.step += 1;
        let record = StepRecord {
            step,
            epoch,
            lr,
            loss_total: total * scale,
            loss_1to2: l12 * scale,
            loss_2to1: l21 * scale,
            seconds: self.started.elapsed().as_secs_f64(),
        };
        self.log.records.push(record);
        Ok(record)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_checkpoint(path, &self.model, &self.optimizer, self.step, &self.config.to_text())?)
    }

    /// Trains until `until` steps are done (or the schedule ends). With an
    /// output directory, appends to `train_log.csv`, writes periodic
    /// `epoch_NNNN.ckpt` files and, at the end of training, `final.ckpt`.
    pub fn run(&mut self, until: Option<u64>, out_dir: Option<&Path>) -> Result<()> {
        let end = until.unwrap_or(u64::MAX).min(self.total_steps());
        let mut log = match out_dir {
            Some(dir) => Some(open_log(dir, &self.config, self.step)?),
            None => None,
        };
        let spe = self.steps_per_epoch();
        while self.step < end {
            let rec = self.train_step()?;
            if let Some((file, path)) = log.as_mut() {
                writeln!(file, "{}", rec.csv_row()).map_err(|e| io(path, e))?;
            }
            let epochs_done = self.step / spe;
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every as u64;
                if self.step.is_multiple_of(spe) && every > 0 && epochs_done.is_multiple_of(every) {
                    self.save(&dir.join(format!("epoch_{epochs_done:04}.ckpt")))?;
                }
            }
        }
        if let (Some(dir), true) = (out_dir, self.is_done()) {
            self.save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(())
    }
}

pub fn steps_per_epoch(config: &RunConfig, dataset: &Dataset) -> u64 {
    dataset.len().div_ceil(config.batch) as u64
}

fn io(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Data(DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Opens the log for appending at `step`. A fresh run writes the header; a
/// resumed one drops rows at or after `step` left by an interrupted run.
fn open_log(dir: &Path, config: &RunConfig, step: u64) -> Result<(fs::File, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let path = dir.join(LOG_FILE);
    let mut keep = log_header(config);
    if step > 0 {
        let old = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
        for line in old.lines().filter(|l| !l.starts_with('#') && *l != LOG_COLUMNS) {
            let s: u64 = line
                .split(',')
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| TrainError::Invalid(format!("{}: bad log row {line:?}", path.display())))?;
            if s < step {
                keep.push_str(line);
                keep.push('\n');
            }
        }
    }
    fs::write(&path, keep).map_err(|e| io(&path, e))?;
    let file = fs::OpenOptions::new().append(true).open(&path).map_err(|e| io(&path, e))?;
    Ok((file, path))
}

/// Full pretraining run from scratch.
pub fn pretrain(config: &RunConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<(ModelState, TrainLog)> {
    let mut t = Trainer::new(config.clone(), dataset)?;
    t.run(None, out_dir)?;
    Ok((t.model, t.log))
}

/// Reads a run config stored in a checkpoint's metadata.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    Ok(data::RunConfig::parse(&ckpt.meta)?)
}
