//! Datasets, file formats, checkpoints and run configuration.

mod checkpoint;
mod config;
mod synthetic;
mod xyz;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{parse_kv, Augmentation, RunConfig};
pub use synthetic::{generate_synthetic, ShapeClass, SyntheticSpec};
pub use xyz::{parse_xyz, read_xyz, write_ply, write_ply_pair, write_xyz, xyz_string};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{GeometryError, PointCloud};
use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("unknown shape class {0:?} (expected sphere, cube, cylinder, torus or plane)")]
    UnknownClass(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid run config: {0}")]
    Invalid(String),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Random generator for one `(seed, tag, a, b)` stream. Distinct tuples give
/// independent ChaCha keys, so results never depend on consumption order
/// elsewhere.
pub fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key.chunks_mut(8).zip([seed, tag, a, b]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

const LABELS_FILE: &str = "labels.csv";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Writes `cloud_NNNNN.xyz` files plus `labels.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut labels = String::from("file,label,class\n");
        for (i, s) in self.samples.iter().enumerate() {
            let file = format!("cloud_{i:05}.xyz");
            write_xyz(&s.cloud, &dir.join(&file))?;
            labels.push_str(&format!("{file},{},{}\n", s.label, self.class_names[s.label]));
        }
        let path = dir.join(LABELS_FILE);
        fs::write(&path, labels).map_err(io_err(&path))
    }

    /// Reads a directory written by [`Dataset::save`]. Class names are
    /// ordered by label.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(LABELS_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let shown = path.display().to_string();
        let parse_err = |line: usize, msg: String| DataError::Parse {
            path: shown.clone(),
            line,
            msg,
        };
        let mut names: Vec<Option<String>> = Vec::new();
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [file, label, class] = fields[..] else {
                return Err(parse_err(i + 1, "expected file,label,class".into()));
            };
            let label: usize = label
                .parse()
                .map_err(|_| parse_err(i + 1, format!("bad label {label:?}")))?;
            if names.len() <= label {
                names.resize(label + 1, None);
            }
            match &names[label] {
                Some(n) if n != class => {
                    return Err(parse_err(i + 1, format!("label {label} named both {n} and {class}")))
                }
                _ => names[label] = Some(class.to_owned()),
            }
            samples.push(Sample {
                cloud: read_xyz(&dir.join(file))?,
                label,
            });
        }
        if samples.is_empty() {
            return Err(DataError::Dataset(format!("{} lists no clouds", shown)));
        }
        let class_names = names
            .into_iter()
            .enumerate()
            .map(|(l, n)| n.ok_or_else(|| DataError::Dataset(format!("label {l} has no samples"))))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            class_names,
            samples,
        })
    }
}

const TAG_SHUFFLE: u64 = 0x5348_5546;

/// Visit order for one epoch: a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(seed, TAG_SHUFFLE, epoch, 0));
    order
}
