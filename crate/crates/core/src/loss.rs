//! Reconstruction losses.
//!
//! Chamfer terms are computed per patch (each patch is an independent set of
//! `k` center-relative points) and averaged over patches. Nearest neighbours
//! are found by exhaustive search; gradient ties go to the lowest index.

use std::fmt;
use std::str::FromStr;

use crate::geometry::{dist, sq_dist, Point};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("chamfer distance needs non-empty point sets")]
    Empty,
    #[error("prediction has {pred} values but target has {gt}")]
    Shape { pred: usize, gt: usize },
    #[error("unknown loss kind {0:?} (expected cd_l2, cd_l1 or cos)")]
    UnknownKind(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    ChamferL2,
    ChamferL1,
    Cosine,
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cd_l2" => Ok(Self::ChamferL2),
            "cd_l1" => Ok(Self::ChamferL1),
            "cos" => Ok(Self::Cosine),
            other => Err(LossError::UnknownKind(other.to_owned())),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ChamferL2 => "cd_l2",
            Self::ChamferL1 => "cd_l1",
            Self::Cosine => "cos",
        })
    }
}

/// Index of the nearest point of `set` to `q` (lowest index on ties) and
/// its squared distance.
fn nearest(q: &Point, set: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in set.iter().enumerate() {
        let d = sq_dist(q, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Two-sided chamfer value and its gradient with respect to `pred`.
fn chamfer_with_grad(pred: &[Point], gt: &[Point], squared: bool) -> (f64, Vec<Point>) {
    let mut grad = vec![[0.0; 3]; pred.len()];
    let (np, ng) = (pred.len() as f64, gt.len() as f64);
    let mut forward = 0.0;
    for (i, a) in pred.iter().enumerate() {
        let (j, d2) = nearest(a, gt);
        let b = &gt[j];
        let w = pair_weight(a, b, d2, squared) / np;
        forward += if squared { d2 } else { d2.sqrt() };
        for c in 0..3 {
            grad[i][c] += w * (a[c] - b[c]);
        }
    }
    let mut backward = 0.0;
    for b in gt {
        let (i, d2) = nearest(b, pred);
        let a = &pred[i];
        let w = pair_weight(a, b, d2, squared) / ng;
        backward += if squared { d2 } else { d2.sqrt() };
        for c in 0..3 {
            grad[i][c] += w * (a[c] - b[c]);
        }
    }
    (forward / np + backward / ng, grad)
}

/// d/da of |a−b|² is 2(a−b); of |a−b| it is (a−b)/|a−b| (zero at a = b).
fn pair_weight(_a: &Point, _b: &Point, d2: f64, squared: bool) -> f64 {
    if squared {
        2.0
    } else if d2 > 0.0 {
        1.0 / d2.sqrt()
    } else {
        0.0
    }
}

/// Mean squared nearest-neighbour distance from `pred` to `gt` plus the same
/// from `gt` to `pred`.
pub fn chamfer_l2(pred: &[Point], gt: &[Point]) -> Result<f64, LossError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(chamfer_with_grad(pred, gt, true).0)
}

/// As [`chamfer_l2`] with Euclidean rather than squared distances.
pub fn chamfer_l1(pred: &[Point], gt: &[Point]) -> Result<f64, LossError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(LossError::Empty);
    }
    let (mut f, mut b) = (0.0, 0.0);
    for a in pred {
        f += dist(a, &gt[nearest(a, gt).0]);
    }
    for q in gt {
        b += dist(q, &pred[nearest(q, pred).0]);
    }
    Ok(f / pred.len() as f64 + b / gt.len() as f64)
}

fn cosine_with_grad(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    let dot: f64 = pred.iter().zip(gt).map(|(a, b)| a * b).sum();
    let na = pred.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = gt.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, vec![0.0; pred.len()]);
    }
    let cos = dot / (na * nb);
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| b / (na * nb) - cos * a / (na * na))
        .collect();
    (cos, grad)
}

/// `1 − mean cosine similarity` between flattened patches of `patch_len`
/// values. Zero-vector patches count as similarity 0.
pub fn cosine_loss(pred: &[f64], gt: &[f64], patch_len: usize) -> Result<f64, LossError> {
    if pred.len() != gt.len() || patch_len == 0 || !pred.len().is_multiple_of(patch_len) {
        return Err(LossError::Shape {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let patches = pred.len() / patch_len;
    let total: f64 = pred
        .chunks(patch_len)
        .zip(gt.chunks(patch_len))
        .map(|(a, b)| cosine_with_grad(a, b).0)
        .sum();
    Ok(1.0 - total / patches as f64)
}

/// Per-patch loss values and the gradient of their mean with respect to the
/// flattened prediction.
fn patch_terms(pred: &[f64], gt: &[Point], k: usize, kind: LossKind) -> (Vec<f64>, Vec<f64>) {
    let n = gt.len() / k;
    let mut per_patch = Vec::with_capacity(n);
    let mut grad = vec![0.0; pred.len()];
    let pred_pts: Vec<Point> = pred.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    for i in 0..n {
        let range = i * k..(i + 1) * k;
        match kind {
            LossKind::ChamferL2 | LossKind::ChamferL1 => {
                let (v, g) = chamfer_with_grad(
                    &pred_pts[range.clone()],
                    &gt[range.clone()],
                    kind == LossKind::ChamferL2,
                );
                per_patch.push(v);
                for (j, gp) in range.zip(g) {
                    for c in 0..3 {
                        grad[j * 3 + c] = gp[c] / n as f64;
                    }
                }
            }
            LossKind::Cosine => {
                let flat_gt: Vec<f64> = gt[range.clone()].iter().flatten().copied().collect();
                let slice = &pred[i * k * 3..(i + 1) * k * 3];
                let (cos, g) = cosine_with_grad(slice, &flat_gt);
                per_patch.push(1.0 - cos);
                for (j, gv) in g.into_iter().enumerate() {
                    grad[i * k * 3 + j] = -gv / n as f64;
                }
            }
        }
    }
    (per_patch, grad)
}

/// Mean per-patch loss of a prediction (`n·k` points, patch-major) against
/// ground-truth patches.
pub fn patch_loss(pred: &[Point], gt: &[Point], k: usize, kind: LossKind) -> Result<(f64, Vec<f64>), LossError> {
    check_patches(pred.len() * 3, gt, k)?;
    let flat: Vec<f64> = pred.iter().flatten().copied().collect();
    let (per_patch, _) = patch_terms(&flat, gt, k, kind);
    let mean = per_patch.iter().sum::<f64>() / per_patch.len() as f64;
    Ok((mean, per_patch))
}

fn check_patches(pred_values: usize, gt: &[Point], k: usize) -> Result<(), LossError> {
    if gt.is_empty() || k == 0 {
        return Err(LossError::Empty);
    }
    if pred_values != gt.len() * 3 || !gt.len().is_multiple_of(k) {
        return Err(LossError::Shape {
            pred: pred_values,
            gt: gt.len() * 3,
        });
    }
    Ok(())
}

/// Graph node for the mean per-patch loss of `pred` (any shape holding
/// `n·k·3` values) against constant ground truth. Also returns the per-patch
/// values.
pub fn patch_loss_node(
    g: &mut Graph,
    pred: NodeId,
    gt: &[Point],
    k: usize,
    kind: LossKind,
) -> Result<(NodeId, Vec<f64>), LossError> {
    let values = g.value(pred).data().to_vec();
    check_patches(values.len(), gt, k)?;
    let (per_patch, grad) = patch_terms(&values, gt, k, kind);
    let mean = per_patch.iter().sum::<f64>() / per_patch.len() as f64;
    let node = g.custom(
        &[pred],
        Tensor::scalar(mean),
        Box::new(move |up: &[f64]| vec![Some(grad.iter().map(|v| v * up[0]).collect())]),
    );
    Ok((node, per_patch))
}

/// Both reconstruction directions of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Loss on view 2 reconstructed from view 1. Zero when not computed
    /// (single-direction training).
    pub l_1to2: f64,
    /// Loss on view 1 reconstructed from view 2.
    pub l_2to1: f64,
    pub per_patch_1to2: Vec<f64>,
    pub per_patch_2to1: Vec<f64>,
}

/// Cross-reconstruction objective. `pred1`/`gt1` are view-1 patches
/// predicted from view 2 (the `2→1` direction). With `siamese = false` only
/// that direction contributes.
pub fn cross_loss(
    pred1: &[Point],
    gt1: &[Point],
    pred2: &[Point],
    gt2: &[Point],
    k: usize,
    kind: LossKind,
    siamese: bool,
) -> Result<LossReport, LossError> {
    let (l_2to1, per_patch_2to1) = patch_loss(pred1, gt1, k, kind)?;
    let (l_1to2, per_patch_1to2) = if siamese {
        patch_loss(pred2, gt2, k, kind)?
    } else {
        (0.0, Vec::new())
    };
    Ok(LossReport {
        total: l_1to2 + l_2to1,
        l_1to2,
        l_2to1,
        per_patch_1to2,
        per_patch_2to1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chamfer_reference_values() {
        let a = [[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]];
        assert_eq!(chamfer_l2(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer_l1(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer_l2(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        assert_eq!(chamfer_l1(&[[0.0; 3]], &[[3.0, 4.0, 0.0]]).unwrap(), 10.0);
        assert_eq!(chamfer_l2(&[], &a), Err(LossError::Empty));
        assert_eq!(chamfer_l1(&a, &[]), Err(LossError::Empty));
    }

    #[test]
    fn cosine_reference_values() {
        let gt = [1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let neg: Vec<f64> = gt.iter().map(|v| -v).collect();
        assert!(cosine_loss(&gt, &gt, 3).unwrap().abs() < 1e-15);
        assert!((cosine_loss(&neg, &gt, 3).unwrap() - 2.0).abs() < 1e-15);
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 1.0, 0.0];
        assert_eq!(cosine_loss(&a, &b, 3).unwrap(), 1.0);
        assert_eq!(cosine_loss(&[0.0; 3], &b, 3).unwrap(), 1.0);
        assert!(cosine_loss(&a, &gt, 3).is_err());
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("cd_l2".parse::<LossKind>().unwrap(), LossKind::ChamferL2);
        assert_eq!("cos".parse::<LossKind>().unwrap().to_string(), "cos");
        assert!(matches!("emd".parse::<LossKind>(), Err(LossError::UnknownKind(_))));
    }

    #[test]
    fn cross_loss_composition() {
        let gt1 = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.2, 0.0], [0.0, 0.0, 0.3]];
        let gt2 = [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.1, 0.1, 0.1], [0.2, 0.0, 0.2]];
        let zero = cross_loss(&gt1, &gt1, &gt2, &gt2, 2, LossKind::ChamferL2, true).unwrap();
        assert_eq!(zero.total, 0.0);

        let p1 = [[0.0; 3]; 4];
        let p2 = [[0.1; 3]; 4];
        let r = cross_loss(&p1, &gt1, &p2, &gt2, 2, LossKind::ChamferL2, true).unwrap();
        assert_eq!(r.total, r.l_1to2 + r.l_2to1);
        assert_eq!(r.per_patch_1to2.len(), 2);
        let direct = (chamfer_l2(&p1[..2], &gt1[..2]).unwrap()
            + chamfer_l2(&p1[2..], &gt1[2..]).unwrap())
            / 2.0;
        assert!((r.l_2to1 - direct).abs() < 1e-15);

        let single = cross_loss(&p1, &gt1, &p2, &gt2, 2, LossKind::ChamferL2, false).unwrap();
        assert_eq!(single.total, r.l_2to1);
        assert_eq!(single.l_1to2, 0.0);
    }

    #[test]
    fn patch_node_gradient_matches_finite_difference() {
        let gt = [[0.0, 0.0, 0.0], [0.3, -0.1, 0.2], [0.5, 0.5, 0.0], [-0.2, 0.1, 0.4]];
        let pred = vec![0.05, 0.02, -0.01, 0.31, -0.12, 0.15, 0.4, 0.45, 0.05, -0.25, 0.05, 0.35];
        for kind in [LossKind::ChamferL2, LossKind::ChamferL1, LossKind::Cosine] {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(&[4, 3], pred.clone()).unwrap());
            let (l, _) = patch_loss_node(&mut g, x, &gt, 2, kind).unwrap();
            g.backward(l).unwrap();
            let analytic = g.grad(x).unwrap();
            let h = 1e-6;
            for j in 0..pred.len() {
                let eval = |delta: f64| {
                    let mut p = pred.clone();
                    p[j] += delta;
                    let pts: Vec<Point> = p.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                    patch_loss(&pts, &gt, 2, kind).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(
                    (fd - analytic.data()[j]).abs() < 1e-6,
                    "{kind} coord {j}: fd {fd} vs {}",
                    analytic.data()[j]
                );
            }
        }
    }
}
