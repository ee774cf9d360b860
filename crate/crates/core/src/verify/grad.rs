//! Central finite differences against reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Outcome;
use crate::geometry::{Point, PointCloud};
use crate::loss::{patch_loss_node, LossKind};
use crate::model::{ModelConfig, ModelState, PairSample, VrpeKind};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::viewgen::{generate_view_pair, ViewConfig};

/// Per-operation tolerance.
pub const OP_TOL: f64 = 1e-5;
/// End-to-end model tolerance.
pub const MODEL_TOL: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely.
pub const GRAD_FLOOR: f64 = 1e-3;

const OP_STEP: f64 = 1e-6;
const MODEL_STEP: f64 = 1e-5;
const MODEL_ENTRIES_PER_TENSOR: usize = 4;

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, String>>;

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Build,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId, String> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5))
        .collect()
}

fn loss_case(name: &'static str, kind: LossKind, gt: Vec<Point>) -> OpCase {
    let n = gt.len();
    case(name, &[&[n, 3]], move |g, x| {
        patch_loss_node(g, x[0], &gt, 4, kind).map(|(l, _)| l).map_err(s)
    })
}

fn cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f70_735f);
    let gt = points(&mut rng, 8);
    vec![
        case("add", &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1]).map_err(s)),
        case("sub", &[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1]).map_err(s)),
        case("mul", &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1]).map_err(s)),
        case("scale", &[&[3, 4]], |g, x| Ok(g.scale(x[0], -1.7))),
        case("add_bias", &[&[3, 4], &[4]], |g, x| g.add_bias(x[0], x[1]).map_err(s)),
        case("matmul", &[&[3, 5], &[5, 4]], |g, x| g.matmul(x[0], x[1]).map_err(s)),
        case("matmul_nt", &[&[3, 5], &[4, 5]], |g, x| g.matmul_nt(x[0], x[1]).map_err(s)),
        case("gelu", &[&[3, 4]], |g, x| Ok(g.gelu(x[0]))),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |g, x| g.layer_norm(x[0], x[1], x[2]).map_err(s)),
        case("softmax_rows", &[&[3, 5]], |g, x| {
            let y = g.scale(x[0], 2.0);
            Ok(g.softmax_rows(y))
        }),
        case("slice_cols", &[&[3, 6]], |g, x| g.slice_cols(x[0], 1, 3).map_err(s)),
        case("concat_cols", &[&[3, 2], &[3, 3]], |g, x| g.concat_cols(&[x[0], x[1]]).map_err(s)),
        case("reshape", &[&[3, 4]], |g, x| g.reshape(x[0], &[6, 2]).map_err(s)),
        case("max_pool_groups", &[&[6, 4]], |g, x| g.max_pool_groups(x[0], 3).map_err(s)),
        case("repeat_rows", &[&[2, 3]], |g, x| g.repeat_rows(x[0], 3).map_err(s)),
        case("mean_rows", &[&[4, 3]], |g, x| Ok(g.mean_rows(x[0]))),
        case("sum", &[&[3, 4]], |g, x| Ok(g.sum(x[0]))),
        case("mean", &[&[3, 4]], |g, x| Ok(g.mean(x[0]))),
        case("softmax_cross_entropy", &[&[4, 3]], |g, x| {
            g.softmax_cross_entropy(x[0], &[0, 2, 1, 2]).map_err(s)
        }),
        loss_case("chamfer_l2", LossKind::ChamferL2, gt.clone()),
        loss_case("chamfer_l1", LossKind::ChamferL1, gt.clone()),
        loss_case("cosine", LossKind::Cosine, gt),
    ]
}

/// Scalar objective `Σ op(x) ⊙ w` with fixed random weights `w`.
fn objective(c: &OpCase, inputs: &[Tensor], weights: &Tensor, track: bool) -> Result<(Graph, NodeId, Vec<NodeId>), String> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| if track { g.leaf(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = (c.build)(&mut g, &ids)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).map_err(s)?;
    let loss = g.sum(prod);
    Ok((g, loss, ids))
}

fn check_case(c: &OpCase, seed: u64, outcome: &mut Outcome) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    };
    let inputs: Vec<Tensor> = c.shapes.iter().map(|sh| random(&mut rng, sh)).collect();
    // Run once to learn the output shape.
    let mut g0 = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g0.constant(t.clone())).collect();
    let out = (c.build)(&mut g0, &ids)?;
    let weights = random(&mut rng, g0.value(out).shape());

    let (mut g, loss, leaves) = objective(c, &inputs, &weights, true)?;
    g.backward(loss).map_err(s)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&id| g.grad_or_zeros(id)).collect();
    let eval = |inputs: &[Tensor]| -> Result<f64, String> {
        let (g, loss, _) = objective(c, inputs, &weights, false)?;
        Ok(g.value(loss).item())
    };
    let mut work = inputs.clone();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + OP_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - OP_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * OP_STEP);
            let an = a.data()[j];
            outcome.measure(rel_err(an, fd), || {
                format!("{} seed {seed} input {i}[{j}]: analytic {an:.9e} vs numeric {fd:.9e}", c.name)
            });
        }
    }
    Ok(())
}

/// One outcome per differentiable operation, each over every seed.
pub fn gradcheck_ops(seeds: &[u64]) -> Vec<Outcome> {
    let names: Vec<&'static str> = cases(0).iter().map(|c| c.name).collect();
    let mut outcomes: Vec<Outcome> = names.iter().map(|n| Outcome::new(format!("grad/{n}"), OP_TOL)).collect();
    for &seed in seeds {
        for (c, o) in cases(seed).iter().zip(outcomes.iter_mut()) {
            if let Err(e) = check_case(c, seed, o) {
                o.expect(false, || format!("seed {seed}: {e}"));
            }
        }
    }
    outcomes
}

fn model_variant(i: usize) -> (VrpeKind, LossKind) {
    const KINDS: [VrpeKind; 4] = [VrpeKind::Sinusoid, VrpeKind::Learnable, VrpeKind::None, VrpeKind::Ape];
    const LOSSES: [LossKind; 3] = [LossKind::ChamferL2, LossKind::ChamferL1, LossKind::Cosine];
    (KINDS[i % 4], LOSSES[i % 3])
}

fn model_case(seed: u64, i: usize, outcome: &mut Outcome) -> Result<(), String> {
    let (vrpe_kind, loss_kind) = model_variant(i);
    let cfg = ModelConfig {
        vrpe_kind,
        ..ModelConfig::tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelState::init(cfg, seed).map_err(s)?;
    // Move away from the initialization (zero biases, unit gains) so every
    // nonlinearity is exercised.
    for (_, p) in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v = 2.0 * *v + rng.random_range(-0.2..0.2);
        }
    }
    let cloud = PointCloud::new(points(&mut rng, 96)).map_err(s)?;
    let view = ViewConfig {
        normalize: vrpe_kind != VrpeKind::Ape,
        rotate: vrpe_kind != VrpeKind::Ape,
        ..ViewConfig::default()
    };
    let pair = generate_view_pair(&cloud, &view, &mut rng, 0).map_err(s)?;
    let sample = PairSample::from_pair(&pair, cfg.n_patches, cfg.patch_size, &mut rng).map_err(s)?;

    let mut sess = model.session();
    let (loss, _) = sess.cross_reconstruction(&sample, loss_kind, true).map_err(s)?;
    sess.backward(loss).map_err(s)?;
    let grads = sess.param_grads();
    drop(sess);
    let eval = |m: &ModelState| -> Result<f64, String> {
        let mut sess = m.frozen_session();
        let (l, _) = sess.cross_reconstruction(&sample, loss_kind, true).map_err(s)?;
        Ok(sess.value(l).item())
    };
    let ids: Vec<_> = model.params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let grad = grads[id.0]
            .as_ref()
            .ok_or_else(|| format!("{} has no gradient", model.params.get(id).name))?
            .data()
            .to_vec();
        let len = grad.len();
        let picks = (0..MODEL_ENTRIES_PER_TENSOR.min(len)).map(|_| rng.random_range(0..len)).collect::<Vec<_>>();
        for j in picks {
            let orig = model.params.value(id).data()[j];
            model.params.value_mut(id).data_mut()[j] = orig + MODEL_STEP;
            let up = eval(&model)?;
            model.params.value_mut(id).data_mut()[j] = orig - MODEL_STEP;
            let down = eval(&model)?;
            model.params.value_mut(id).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * MODEL_STEP);
            let an = grad[j];
            let name = &model.params.get(id).name;
            outcome.measure(rel_err(an, fd), || {
                format!("seed {seed} ({vrpe_kind}, {loss_kind}) {name}[{j}]: analytic {an:.9e} vs numeric {fd:.9e}")
            });
        }
    }
    Ok(())
}

/// End-to-end tiny-config cross-reconstruction loss, cycling through the
/// query embedding and loss variants across seeds.
pub fn gradcheck_model(seeds: &[u64]) -> Outcome {
    let mut o = Outcome::new("grad/model", MODEL_TOL);
    for (i, &seed) in seeds.iter().enumerate() {
        if let Err(e) = model_case(seed, i, &mut o) {
            o.expect(false, || format!("seed {seed}: {e}"));
        }
    }
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(2.0, 1.0), 0.5);
        assert!((rel_err(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn op_suite_passes_on_two_seeds() {
        for o in gradcheck_ops(&[1, 2]) {
            assert!(o.passed(), "{o}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // An op whose backward deliberately doubles the true gradient.
        let bad = case("bad", &[&[2, 2]], |g, x| {
            let v = g.value(x[0]).clone();
            Ok(g.custom(&[x[0]], v, Box::new(|up: &[f64]| vec![Some(up.iter().map(|u| 2.0 * u).collect())])))
        });
        let mut o = Outcome::new("bad", OP_TOL);
        check_case(&bad, 3, &mut o).unwrap();
        assert!(!o.passed());
        assert!((o.worst - 0.5).abs() < 1e-6);
    }
}
