//! Classification probes on encoder features.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use super::{adamw_config, Result, TrainError};
use crate::data::{stream_rng, Dataset, RunConfig};
use crate::model::{extract_feature, feature_patches, Binder, ModelState};
use crate::tensor::{AdamW, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::viewgen::PatchSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Backbone and a 3-layer head trained jointly.
    Full,
    /// One linear layer on frozen features.
    MlpLinear,
    /// 3-layer perceptron on frozen features.
    Mlp3,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::MlpLinear => "mlp_linear",
            Self::Mlp3 => "mlp_3",
        }
    }
}

impl FromStr for Protocol {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Self::Full),
            "mlp_linear" => Ok(Self::MlpLinear),
            "mlp_3" | "mlp3" => Ok(Self::Mlp3),
            _ => Err(TrainError::Invalid(format!(
                "unknown protocol {s:?} (full, mlp-linear or mlp-3)"
            ))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub protocol: Protocol,
    /// Test-split accuracy in `[0, 1]`.
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub epochs: usize,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

const TAG_SPLIT: u64 = 0x5350_4c54;
const TAG_PROBE: u64 = 0x5052_4f42;
const TAG_HEAD: u64 = 0x4845_4144;
const TEST_FRACTION: f64 = 0.2;
const HIDDEN: usize = 256;
const PROBE_BATCH: usize = 32;

/// 80/20 split within every class; each class with at least two members
/// contributes at least one test and one train sample.
pub fn stratified_split(labels: &[usize], num_classes: usize, seed: u64) -> Split {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut stream_rng(seed, TAG_SPLIT, c as u64, 0));
        let n = members.len();
        let mut n_test = (n as f64 * TEST_FRACTION).round() as usize;
        if n >= 2 {
            n_test = n_test.clamp(1, n - 1);
        }
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Split { train, test }
}

struct Head {
    params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

impl Head {
    fn new(widths: &[usize], seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, TAG_HEAD, 0, 0);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            let data = (0..w[0] * w[1]).map(|_| Distribution::<f64>::sample(&normal, &mut rng).clamp(-0.04, 0.04)).collect();
            let wid = params.insert(&format!("head{i}.weight"), Tensor::new(&[w[0], w[1]], data)?, true)?;
            let bid = params.insert(&format!("head{i}.bias"), Tensor::zeros(&[w[1]]), true)?;
            layers.push((wid, bid));
        }
        Ok(Self { params, layers })
    }

    fn forward(&self, g: &mut Graph, binder: &mut Binder, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h);
            }
            let (w, b) = (binder.get(g, &self.params, w), binder.get(g, &self.params, b));
            let y = g.matmul(h, w)?;
            h = g.add_bias(y, b)?;
        }
        Ok(h)
    }
}

/// Per-feature affine map fitted on the training split only.
struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(features: &[Vec<f64>], train: &[usize]) -> Self {
        let d = features[0].len();
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in train {
            mean.iter_mut().zip(&features[i]).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; d];
        for &i in train {
            for ((v, x), m) in var.iter_mut().zip(&features[i]).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let inv_std = var
            .iter()
            .map(|v| if v.sqrt() > 1e-12 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, inv_std }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.inv_std).map(|((x, m), s)| (x - m) * s).collect()
    }

    fn node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let d = self.mean.len();
        let mean = g.constant(Tensor::new(&[1, d], self.mean.clone())?);
        let scale = g.constant(Tensor::new(&[1, d], self.inv_std.clone())?);
        let c = g.sub(x, mean)?;
        Ok(g.mul(c, scale)?)
    }
}

fn per_class_accuracy(pred: &[usize], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let mut hit = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (&p, &l) in pred.iter().zip(labels) {
        count[l] += 1;
        hit[l] += (p == l) as usize;
    }
    let acc = hit.iter().sum::<usize>() as f64 / labels.len().max(1) as f64;
    let per = hit
        .iter()
        .zip(&count)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    (acc, per)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn batches(train: &[usize], seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(&mut stream_rng(seed, TAG_PROBE, epoch as u64, 0));
    order.chunks(PROBE_BATCH).map(<[usize]>::to_vec).collect()
}

/// Trains a classification head with cross-entropy on the 80% split of
/// `dataset` and reports test accuracy on the rest.
pub fn probe(protocol: Protocol, model: &ModelState, dataset: &Dataset, config: &RunConfig) -> Result<ProbeResult> {
    let classes = dataset.num_classes();
    if classes < 2 {
        return Err(TrainError::Invalid(format!("probe needs at least 2 classes, got {classes}")));
    }
    let labels = dataset.labels();
    let split = stratified_split(&labels, classes, config.seed);
    if split.train.is_empty() || split.test.is_empty() {
        return Err(TrainError::Invalid("dataset too small for a train/test split".into()));
    }
    let feature_dim = 2 * model.config.dim;
    let widths: Vec<usize> = match protocol {
        Protocol::MlpLinear => vec![feature_dim, classes],
        Protocol::Mlp3 | Protocol::Full => vec![feature_dim, HIDDEN, HIDDEN, classes],
    };
    let head = Head::new(&widths, config.seed)?;
    let predictions = match protocol {
        Protocol::MlpLinear | Protocol::Mlp3 => train_frozen(head, model, dataset, &labels, &split, config)?,
        Protocol::Full => train_full(head, model, dataset, &labels, &split, config)?,
    };
    let test_labels: Vec<usize> = split.test.iter().map(|&i| labels[i]).collect();
    let (accuracy, per_class) = per_class_accuracy(&predictions, &test_labels, classes);
    Ok(ProbeResult {
        protocol,
        accuracy,
        per_class,
        epochs: config.probe_epochs,
        train_size: split.train.len(),
        test_size: split.test.len(),
    })
}

fn train_frozen(
    mut head: Head,
    model: &ModelState,
    dataset: &Dataset,
    labels: &[usize],
    split: &Split,
    config: &RunConfig,
) -> Result<Vec<usize>> {
    let raw: Vec<Vec<f64>> = dataset
        .samples
        .iter()
        .map(|s| extract_feature(&s.cloud, model))
        .collect::<std::result::Result<_, _>>()?;
    let norm = Standardizer::fit(&raw, &split.train);
    let features: Vec<Vec<f64>> = raw.iter().map(|f| norm.apply(f)).collect();
    let d = features[0].len();
    let stack = |idx: &[usize]| -> Result<Tensor> {
        Ok(Tensor::new(&[idx.len(), d], idx.iter().flat_map(|&i| features[i].iter().copied()).collect())?)
    };
    let mut opt = AdamW::new(adamw_config(config), &head.params);
    for epoch in 0..config.probe_epochs {
        for batch in batches(&split.train, config.seed, epoch) {
            let mut g = Graph::new();
            let mut binder = Binder::new(&head.params, true);
            let x = g.constant(stack(&batch)?);
            let logits = head.forward(&mut g, &mut binder, x)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = g.softmax_cross_entropy(logits, &y)?;
            g.backward(loss)?;
            opt.step(&mut head.params, &binder.grads(&g), config.probe_lr)?;
        }
    }
    let mut g = Graph::new();
    let mut binder = Binder::new(&head.params, false);
    let x = g.constant(stack(&split.test)?);
    let logits = head.forward(&mut g, &mut binder, x)?;
    let out = g.value(logits);
    Ok((0..out.rows()).map(|r| argmax(out.row(r))).collect())
}

fn train_full(
    mut head: Head,
    model: &ModelState,
    dataset: &Dataset,
    labels: &[usize],
    split: &Split,
    config: &RunConfig,
) -> Result<Vec<usize>> {
    let patches: Vec<PatchSet> = dataset
        .samples
        .iter()
        .map(|s| feature_patches(&s.cloud, &model.config))
        .collect::<std::result::Result<_, _>>()?;
    let initial: Vec<Vec<f64>> = dataset
        .samples
        .iter()
        .map(|s| extract_feature(&s.cloud, model))
        .collect::<std::result::Result<_, _>>()?;
    let norm = Standardizer::fit(&initial, &split.train);
    let mut backbone = model.clone();
    let mut opt_backbone = AdamW::new(adamw_config(config), &backbone.params);
    let mut opt_head = AdamW::new(adamw_config(config), &head.params);
    let lr = config.probe_full_lr;
    for epoch in 0..config.probe_epochs {
        for batch in batches(&split.train, config.seed, epoch) {
            let scale = 1.0 / batch.len() as f64;
            let mut gb: Vec<Option<Tensor>> = vec![None; backbone.params.len()];
            let mut gh: Vec<Option<Tensor>> = vec![None; head.params.len()];
            for &i in &batch {
                let mut sess = backbone.session();
                let f = sess.feature(&patches[i])?;
                let f = norm.node(&mut sess.graph, f)?;
                let mut hb = Binder::new(&head.params, true);
                let logits = head.forward(&mut sess.graph, &mut hb, f)?;
                let loss = sess.graph.softmax_cross_entropy(logits, &[labels[i]])?;
                let loss = sess.graph.scale(loss, scale);
                sess.backward(loss)?;
                accumulate(&mut gb, sess.param_grads());
                accumulate(&mut gh, hb.grads(&sess.graph));
            }
            opt_backbone.step(&mut backbone.params, &gb, lr)?;
            opt_head.step(&mut head.params, &gh, lr)?;
        }
    }
    split
        .test
        .iter()
        .map(|&i| {
            let mut sess = backbone.frozen_session();
            let f = sess.feature(&patches[i])?;
            let f = norm.node(&mut sess.graph, f)?;
            let mut hb = Binder::new(&head.params, false);
            let logits = head.forward(&mut sess.graph, &mut hb, f)?;
            Ok(argmax(sess.graph.value(logits).data()))
        })
        .collect()
}

fn accumulate(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}
