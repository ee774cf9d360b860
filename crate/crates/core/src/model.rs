//! Positional-query autoencoder.
//!
//! ```text
//! patches ─ PointNet ─┐
//!                     + ─ encoder blocks ─ H (n×D) ─┐
//! centers ─ pos MLP ──┘                               K, V
//!                                  query embedding ── Q ─ cross-attn ─ T ─ decoder blocks ─ linear ─ n×k×3
//! ```
//!
//! The model is evaluated on one sample at a time inside a [`Session`],
//! which owns the autodiff tape and binds parameters onto it lazily.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::geometry::{Point, PointCloud};
use crate::loss::{patch_loss_node, LossError, LossKind, LossReport};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor, TensorError};
use crate::viewgen::{PatchSet, ViewError};
use crate::vrpe::{absolute_embed, build_relpos, sincos_embed, VrpeError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape: {0}")]
    Input(String),
    #[error("checkpoint parameter {name}: {msg}")]
    Param { name: String, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vrpe(#[from] VrpeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    View(#[from] ViewError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How the positional query is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VrpeKind {
    /// Fixed sinusoid of (target center, displacement).
    #[default]
    Sinusoid,
    /// Two-layer perceptron 6→D→D on the same relative positions.
    Learnable,
    /// Sinusoid of the target centers only; meaningful only when views
    /// share a frame (normalization and rotation disabled).
    Ape,
    /// Fixed random embedding carrying no positional information.
    None,
}

impl FromStr for VrpeKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoid" => Ok(Self::Sinusoid),
            "learnable" => Ok(Self::Learnable),
            "ape" => Ok(Self::Ape),
            "none" => Ok(Self::None),
            other => Err(ModelError::Config(format!(
                "unknown vrpe kind {other:?} (expected sinusoid, learnable, ape or none)"
            ))),
        }
    }
}

impl fmt::Display for VrpeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sinusoid => "sinusoid",
            Self::Learnable => "learnable",
            Self::Ape => "ape",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub mlp_ratio: usize,
    pub n_patches: usize,
    pub patch_size: usize,
    pub vrpe_kind: VrpeKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            dim: 48,
            heads: 4,
            enc_blocks: 3,
            dec_blocks: 1,
            mlp_ratio: 4,
            n_patches: 16,
            patch_size: 8,
            vrpe_kind: VrpeKind::Sinusoid,
        }
    }

    /// Full-size architecture: 384 wide, 6 heads, 12 encoder and 4 decoder
    /// blocks, 64 patches of 32 points.
    pub fn paper() -> Self {
        Self {
            dim: 384,
            heads: 6,
            enc_blocks: 12,
            dec_blocks: 4,
            mlp_ratio: 4,
            n_patches: 64,
            patch_size: 32,
            vrpe_kind: VrpeKind::Sinusoid,
        }
    }

    /// Gradient-check configuration.
    pub fn tiny() -> Self {
        Self {
            dim: 12,
            heads: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            mlp_ratio: 2,
            n_patches: 4,
            patch_size: 4,
            vrpe_kind: VrpeKind::Sinusoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.dim == 0 || !self.dim.is_multiple_of(12) {
            return fail(format!("dim {} must be a positive multiple of 12", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.mlp_ratio == 0 || self.n_patches == 0 || self.patch_size == 0 {
            return fail("mlp_ratio, n_patches and patch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    proj: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: (ParamId, ParamId),
    attn: Attention,
    ln2: (ParamId, ParamId),
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: [Linear; 4],
    embed_norm: (ParamId, ParamId),
    pos: [Linear; 2],
    enc: Vec<Block>,
    query: Attention,
    vrpe_mlp: Option<[Linear; 2]>,
    vrpe_fixed: Option<ParamId>,
    dec: Vec<Block>,
    dec_norm: (ParamId, ParamId),
    head: Linear,
}

#[derive(Clone, Copy)]
enum Init {
    Weight,
    /// Small weights for the output head.
    Head,
    Zero,
    One,
    Fixed,
}

/// Hands out parameter slots either by creating them (initialization) or by
/// looking them up (loading).
trait Alloc {
    fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId>;
}

struct Initializer {
    store: ParamStore,
    rng: ChaCha8Rng,
}

const HEAD_STD: f64 = 0.02;

/// Truncated-normal weight scale `1/√fan_in`.
pub fn weight_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl Alloc for Initializer {
    fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Weight | Init::Head => {
                let std = match init {
                    Init::Head => HEAD_STD,
                    _ => weight_std(shape[0]),
                };
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..len)
                    .map(|_| loop {
                        let v = normal.sample(&mut self.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::Zero => vec![0.0; len],
            Init::One => vec![1.0; len],
            Init::Fixed => {
                let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
                (0..len).map(|_| u.sample(&mut self.rng)).collect()
            }
        };
        let trainable = !matches!(init, Init::Fixed);
        Ok(self.store.insert(name, Tensor::new(shape, data)?, trainable)?)
    }
}

struct Lookup<'a> {
    store: &'a ParamStore,
    seen: usize,
}

impl Alloc for Lookup<'_> {
    fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let err = |msg: String| ModelError::Param {
            name: name.to_owned(),
            msg,
        };
        let id = self.store.id(name).ok_or_else(|| err("missing".into()))?;
        let p = self.store.get(id);
        if p.value.shape() != shape {
            return Err(err(format!("shape {:?}, expected {shape:?}", p.value.shape())));
        }
        if p.trainable == matches!(init, Init::Fixed) {
            return Err(err("trainable flag mismatch".into()));
        }
        self.seen += 1;
        Ok(id)
    }
}

fn linear(a: &mut dyn Alloc, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
    let w = a.get(&format!("{name}.weight"), &[fan_in, fan_out], Init::Weight)?;
    let b = if bias {
        Some(a.get(&format!("{name}.bias"), &[fan_out], Init::Zero)?)
    } else {
        None
    };
    Ok(Linear { w, b })
}

fn norm(a: &mut dyn Alloc, name: &str, d: usize) -> Result<(ParamId, ParamId)> {
    Ok((
        a.get(&format!("{name}.gain"), &[d], Init::One)?,
        a.get(&format!("{name}.bias"), &[d], Init::Zero)?,
    ))
}

fn attention(a: &mut dyn Alloc, name: &str, d: usize) -> Result<Attention> {
    Ok(Attention {
        wq: linear(a, &format!("{name}.q"), d, d, false)?.w,
        wk: linear(a, &format!("{name}.k"), d, d, false)?.w,
        wv: linear(a, &format!("{name}.v"), d, d, false)?.w,
        proj: linear(a, &format!("{name}.proj"), d, d, true)?,
    })
}

fn block(a: &mut dyn Alloc, name: &str, d: usize, ratio: usize) -> Result<Block> {
    Ok(Block {
        ln1: norm(a, &format!("{name}.norm1"), d)?,
        attn: attention(a, &format!("{name}.attn"), d)?,
        ln2: norm(a, &format!("{name}.norm2"), d)?,
        fc1: linear(a, &format!("{name}.mlp.fc1"), d, d * ratio, true)?,
        fc2: linear(a, &format!("{name}.mlp.fc2"), d * ratio, d, true)?,
    })
}

fn build_layout(cfg: &ModelConfig, a: &mut dyn Alloc) -> Result<Layout> {
    let d = cfg.dim;
    let half = d / 2;
    let embed = [
        linear(a, "embed.point1", 3, half, true)?,
        linear(a, "embed.point2", half, half, true)?,
        linear(a, "embed.group1", d, d, true)?,
        linear(a, "embed.group2", d, d, true)?,
    ];
    let embed_norm = norm(a, "embed.norm", d)?;
    let pos = [
        linear(a, "encoder.pos1", 3, d, true)?,
        linear(a, "encoder.pos2", d, d, true)?,
    ];
    let enc = (0..cfg.enc_blocks)
        .map(|i| block(a, &format!("encoder.block{i}"), d, cfg.mlp_ratio))
        .collect::<Result<_>>()?;
    let query = attention(a, "query", d)?;
    let vrpe_mlp = match cfg.vrpe_kind {
        VrpeKind::Learnable => Some([
            linear(a, "query.vrpe1", 6, d, true)?,
            linear(a, "query.vrpe2", d, d, true)?,
        ]),
        _ => None,
    };
    let vrpe_fixed = match cfg.vrpe_kind {
        VrpeKind::None => Some(a.get("query.fixed_embedding", &[cfg.n_patches, d], Init::Fixed)?),
        _ => None,
    };
    let dec = (0..cfg.dec_blocks)
        .map(|i| block(a, &format!("decoder.block{i}"), d, cfg.mlp_ratio))
        .collect::<Result<_>>()?;
    let dec_norm = norm(a, "decoder.norm", d)?;
    let head = Linear {
        w: a.get("head.weight", &[d, cfg.patch_size * 3], Init::Head)?,
        b: Some(a.get("head.bias", &[cfg.patch_size * 3], Init::Zero)?),
    };
    Ok(Layout {
        embed,
        embed_norm,
        pos,
        enc,
        query,
        vrpe_mlp,
        vrpe_fixed,
        dec,
        dec_norm,
        head,
    })
}

/// Configuration plus every named parameter of the autoencoder.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl ModelState {
    /// Fresh parameters: truncated-normal weights with std `1/√fan_in` (cut
    /// at 2σ), zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut alloc = Initializer {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let layout = build_layout(&config, &mut alloc)?;
        Ok(Self {
            config,
            params: alloc.store,
            layout,
        })
    }

    /// Rebuilds a model around loaded parameters, checking every name,
    /// shape and trainable flag against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut lookup = Lookup {
            store: &params,
            seen: 0,
        };
        let layout = build_layout(&config, &mut lookup)?;
        if lookup.seen != params.len() {
            return Err(ModelError::Param {
                name: "*".into(),
                msg: format!("{} unexpected extra parameters", params.len() - lookup.seen),
            });
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Ids of the decoder-side query projections, for gradient probes.
    pub fn query_projection_ids(&self) -> [ParamId; 3] {
        [self.layout.query.wq, self.layout.query.wk, self.layout.query.wv]
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(self, true)
    }

    /// Session whose parameters are constants (no gradients).
    pub fn frozen_session(&self) -> Session<'_> {
        Session::new(self, false)
    }
}

/// Lazily binds parameters of one store onto a graph.
pub struct Binder {
    ids: Vec<Option<NodeId>>,
    trainable: bool,
}

impl Binder {
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        Self {
            ids: vec![None; store.len()],
            trainable,
        }
    }

    pub fn get(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(n) = self.ids[id.0] {
            return n;
        }
        let p = store.get(id);
        let n = if self.trainable && p.trainable {
            g.leaf(p.value.clone())
        } else {
            g.constant(p.value.clone())
        };
        self.ids[id.0] = Some(n);
        n
    }

    /// Gradients per parameter slot after `g.backward`.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.ids
            .iter()
            .map(|n| n.filter(|n| g.requires_grad(*n)).and_then(|n| g.grad(n)))
            .collect()
    }
}

/// One forward (and optionally backward) evaluation of the model.
pub struct Session<'m> {
    pub graph: Graph,
    pub model: &'m ModelState,
    binder: Binder,
    /// When set, every attention-probability node is recorded here.
    pub attention_trace: Option<Vec<NodeId>>,
}

impl<'m> Session<'m> {
    fn new(model: &'m ModelState, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            model,
            binder: Binder::new(&model.params, trainable),
            attention_trace: None,
        }
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.binder.get(&mut self.graph, &self.model.params, id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.graph.value(id)
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        Ok(self.graph.backward(loss)?)
    }

    /// Model parameter gradients, aligned with `model.params`.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.binder.grads(&self.graph)
    }

    fn cfg(&self) -> ModelConfig {
        self.model.config
    }

    fn linear(&mut self, x: NodeId, l: Linear) -> Result<NodeId> {
        let w = self.param(l.w);
        let mut y = self.graph.matmul(x, w)?;
        if let Some(b) = l.b {
            let b = self.param(b);
            y = self.graph.add_bias(y, b)?;
        }
        Ok(y)
    }

    fn mlp2(&mut self, x: NodeId, layers: [Linear; 2]) -> Result<NodeId> {
        let h = self.linear(x, layers[0])?;
        let h = self.graph.gelu(h);
        self.linear(h, layers[1])
    }

    /// Linear, layer norm, GELU, linear.
    fn normed_mlp2(&mut self, x: NodeId, layers: [Linear; 2], ln: (ParamId, ParamId)) -> Result<NodeId> {
        let h = self.linear(x, layers[0])?;
        let h = self.layer_norm(h, ln)?;
        let h = self.graph.gelu(h);
        self.linear(h, layers[1])
    }

    fn layer_norm(&mut self, x: NodeId, p: (ParamId, ParamId)) -> Result<NodeId> {
        let (g, b) = (self.param(p.0), self.param(p.1));
        Ok(self.graph.layer_norm(x, g, b)?)
    }

    /// Multi-head attention of `queries` (nq×D) over `keys_values` (nk×D)
    /// with per-head scaling `1/√(D/heads)`.
    fn attend(&mut self, queries: NodeId, keys_values: NodeId, a: Attention) -> Result<NodeId> {
        let (wq, wk, wv) = (self.param(a.wq), self.param(a.wk), self.param(a.wv));
        let q = self.graph.matmul(queries, wq)?;
        let k = self.graph.matmul(keys_values, wk)?;
        let v = self.graph.matmul(keys_values, wv)?;
        let cfg = self.cfg();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = self.graph.slice_cols(q, h * dh, dh)?;
            let kh = self.graph.slice_cols(k, h * dh, dh)?;
            let vh = self.graph.slice_cols(v, h * dh, dh)?;
            let scores = self.graph.matmul_nt(qh, kh)?;
            let scores = self.graph.scale(scores, scale);
            let probs = self.graph.softmax_rows(scores);
            if let Some(trace) = self.attention_trace.as_mut() {
                trace.push(probs);
            }
            heads.push(self.graph.matmul(probs, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            self.graph.concat_cols(&heads)?
        };
        self.linear(merged, a.proj)
    }

    /// Pre-norm transformer block.
    fn block(&mut self, x: NodeId, b: Block) -> Result<NodeId> {
        let h = self.layer_norm(x, b.ln1)?;
        let h = self.attend(h, h, b.attn)?;
        let x = self.graph.add(x, h)?;
        let h = self.layer_norm(x, b.ln2)?;
        let h = self.linear(h, b.fc1)?;
        let h = self.graph.gelu(h);
        let h = self.linear(h, b.fc2)?;
        Ok(self.graph.add(x, h)?)
    }

    fn check_patches(&self, p: &PatchSet) -> Result<()> {
        let cfg = self.cfg();
        if p.n != cfg.n_patches || p.k != cfg.patch_size || p.patches.len() != p.n * p.k {
            return Err(ModelError::Input(format!(
                "patch set {}×{} does not match config {}×{}",
                p.n, p.k, cfg.n_patches, cfg.patch_size
            )));
        }
        Ok(())
    }

    /// Mini PointNet: shared per-point MLP, group max-pool, concatenation
    /// of the pooled feature onto every point, a second shared MLP (linear,
    /// norm, GELU, linear) and a final max-pool. Returns one D-vector per
    /// patch.
    pub fn embed_patches(&mut self, p: &PatchSet) -> Result<NodeId> {
        self.check_patches(p)?;
        let k = p.k;
        let layers = self.model.layout.embed;
        let x = self
            .graph
            .constant(Tensor::new(&[p.n * k, 3], p.patch_values())?);
        let norm = self.model.layout.embed_norm;
        let h = self.mlp2(x, [layers[0], layers[1]])?;
        let pooled = self.graph.max_pool_groups(h, k)?;
        let spread = self.graph.repeat_rows(pooled, k)?;
        let cat = self.graph.concat_cols(&[h, spread])?;
        let h = self.normed_mlp2(cat, [layers[2], layers[3]], norm)?;
        Ok(self.graph.max_pool_groups(h, k)?)
    }

    /// Patch tokens plus learned center embedding, through the encoder.
    pub fn encode(&mut self, p: &PatchSet) -> Result<NodeId> {
        let tokens = self.embed_patches(p)?;
        let centers = self
            .graph
            .constant(Tensor::new(&[p.n, 3], p.center_values())?);
        let pos = self.mlp2(centers, self.model.layout.pos)?;
        let mut x = self.graph.add(tokens, pos)?;
        for b in self.model.layout.enc.clone() {
            x = self.block(x, b)?;
        }
        Ok(x)
    }

    /// Query embedding for reconstructing a target view whose patch centers
    /// are `target_centers`, displaced by `rl` from the source view.
    pub fn query_embedding(&mut self, target_centers: &[Point], rl: Point) -> Result<NodeId> {
        let d = self.cfg().dim;
        match self.cfg().vrpe_kind {
            VrpeKind::Sinusoid => {
                let e = sincos_embed(&build_relpos(target_centers, rl)?, d)?;
                Ok(self.graph.constant(e))
            }
            VrpeKind::Learnable => {
                let rp = build_relpos(target_centers, rl)?;
                let flat = rp.rows.iter().flatten().copied().collect();
                let x = self.graph.constant(Tensor::new(&[rp.rows.len(), 6], flat)?);
                let layers = self.model.layout.vrpe_mlp.expect("learnable layout");
                self.mlp2(x, layers)
            }
            VrpeKind::Ape => Ok(self.graph.constant(absolute_embed(target_centers, d)?)),
            VrpeKind::None => {
                if target_centers.len() != self.cfg().n_patches {
                    return Err(ModelError::Input(format!(
                        "fixed query embedding has {} rows, got {} targets",
                        self.cfg().n_patches,
                        target_centers.len()
                    )));
                }
                let id = self.model.layout.vrpe_fixed.expect("fixed layout");
                Ok(self.param(id))
            }
        }
    }

    /// Single cross-attention: queries from the embedding, keys and values
    /// from the latent tokens of the source view.
    pub fn positional_query(&mut self, latent: NodeId, query: NodeId) -> Result<NodeId> {
        let d = self.cfg().dim;
        let (lw, qw) = (self.value(latent).cols(), self.value(query).cols());
        if lw != d || qw != d {
            return Err(ModelError::Input(format!(
                "latent width {lw} and query width {qw} must equal {d}"
            )));
        }
        self.attend(query, latent, self.model.layout.query)
    }

    /// Decoder blocks (no positional input), a final layer norm and a
    /// linear head;
    /// returns `(n·k)×3` center-relative points.
    pub fn decode_and_predict(&mut self, queried: NodeId) -> Result<NodeId> {
        let mut x = queried;
        for b in self.model.layout.dec.clone() {
            x = self.block(x, b)?;
        }
        let x = self.layer_norm(x, self.model.layout.dec_norm)?;
        let out = self.linear(x, self.model.layout.head)?;
        let n = self.value(out).rows();
        Ok(self.graph.reshape(out, &[n * self.cfg().patch_size, 3])?)
    }

    /// Predicts the target view's patches from the source view's latent.
    pub fn reconstruct(&mut self, source_latent: NodeId, target: &PatchSet, rl: Point) -> Result<NodeId> {
        let q = self.query_embedding(&target.centers, rl)?;
        let t = self.positional_query(source_latent, q)?;
        self.decode_and_predict(t)
    }

    /// Full cross-reconstruction objective for one view pair.
    pub fn cross_reconstruction(
        &mut self,
        sample: &PairSample,
        kind: LossKind,
        siamese: bool,
    ) -> Result<(NodeId, LossReport)> {
        let k = self.cfg().patch_size;
        let h2 = self.encode(&sample.patches2)?;
        let pred1 = self.reconstruct(h2, &sample.patches1, sample.rl_2to1)?;
        let (l21, per21) = patch_loss_node(&mut self.graph, pred1, &sample.patches1.patches, k, kind)?;
        let l_2to1 = self.value(l21).item();
        if !siamese {
            let report = LossReport {
                total: l_2to1,
                l_1to2: 0.0,
                l_2to1,
                per_patch_1to2: Vec::new(),
                per_patch_2to1: per21,
            };
            return Ok((l21, report));
        }
        let h1 = self.encode(&sample.patches1)?;
        let pred2 = self.reconstruct(h1, &sample.patches2, sample.rl_1to2)?;
        let (l12, per12) = patch_loss_node(&mut self.graph, pred2, &sample.patches2.patches, k, kind)?;
        let l_1to2 = self.value(l12).item();
        let total = self.graph.add(l21, l12)?;
        let report = LossReport {
            total: self.value(total).item(),
            l_1to2,
            l_2to1,
            per_patch_1to2: per12,
            per_patch_2to1: per21,
        };
        Ok((total, report))
    }

    /// `concat(mean over tokens, max over tokens)` of the encoded patches,
    /// as a 1×2D row.
    pub fn feature(&mut self, p: &PatchSet) -> Result<NodeId> {
        let tokens = self.encode(p)?;
        let mean = self.graph.mean_rows(tokens);
        let max = self.graph.max_pool_groups(tokens, p.n)?;
        Ok(self.graph.concat_cols(&[mean, max])?)
    }
}

/// Patchified view pair with its displacement vectors, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub patches1: PatchSet,
    pub patches2: PatchSet,
    pub rl_1to2: Point,
    pub rl_2to1: Point,
}

impl PairSample {
    /// Patchifies both views of `pair` with random FPS starts.
    pub fn from_pair<R: rand::Rng>(
        pair: &crate::viewgen::ViewPair,
        n: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let patches1 = crate::viewgen::patchify(&pair.view1, n, k, rng)?;
        let patches2 = crate::viewgen::patchify(&pair.view2, n, k, rng)?;
        let (rl_1to2, rl_2to1) = crate::viewgen::relative_displacement(pair);
        Ok(Self {
            patches1,
            patches2,
            rl_1to2,
            rl_2to1,
        })
    }
}

/// Patch tokens for a batch, stacked into `b×n×D`.
pub fn embed_batch(model: &ModelState, batch: &[PatchSet]) -> Result<Tensor> {
    stack(model, batch, |s, p| s.embed_patches(p))
}

/// Encoder output for a batch, stacked into `b×n×D`.
pub fn encode_batch(model: &ModelState, batch: &[PatchSet]) -> Result<Tensor> {
    stack(model, batch, |s, p| s.encode(p))
}

fn stack(
    model: &ModelState,
    batch: &[PatchSet],
    f: impl Fn(&mut Session<'_>, &PatchSet) -> Result<NodeId>,
) -> Result<Tensor> {
    let cfg = model.config;
    let mut data = Vec::with_capacity(batch.len() * cfg.n_patches * cfg.dim);
    for p in batch {
        let mut s = model.frozen_session();
        let out = f(&mut s, p)?;
        data.extend_from_slice(s.value(out).data());
    }
    Ok(Tensor::new(&[batch.len(), cfg.n_patches, cfg.dim], data)?)
}

/// Frozen 2D-length feature of a whole cloud: normalize, patchify with FPS
/// starting at point 0, encode and pool.
pub fn extract_feature(cloud: &PointCloud, model: &ModelState) -> Result<Vec<f64>> {
    let patches = feature_patches(cloud, &model.config)?;
    let mut s = model.frozen_session();
    let f = s.feature(&patches)?;
    Ok(s.value(f).data().to_vec())
}

/// Patch set used for downstream features.
pub fn feature_patches(cloud: &PointCloud, cfg: &ModelConfig) -> Result<PatchSet> {
    if cloud.len() < cfg.n_patches || cloud.len() < cfg.patch_size {
        return Err(ModelError::Input(format!(
            "cloud of {} points is smaller than n={} or k={}",
            cloud.len(),
            cfg.n_patches,
            cfg.patch_size
        )));
    }
    let normalized = crate::geometry::minmax_normalize(cloud);
    Ok(crate::viewgen::patchify_from::<ChaCha8Rng>(
        &normalized,
        cfg.n_patches,
        cfg.patch_size,
        crate::geometry::FpsStart::Index(0),
    )?)
}
