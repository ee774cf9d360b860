//! Cross-reconstruction export for visual inspection.

use std::fs;
use std::path::Path;

use super::{Result, TrainError};
use crate::data::{stream_rng, write_ply, write_ply_pair, DataError};
use crate::geometry::{add, Point, PointCloud};
use crate::loss::{patch_loss, LossKind};
use crate::model::{ModelState, PairSample};
use crate::viewgen::{generate_view_pair_with_ratios, relative_displacement, PatchSet, ViewConfig};

/// Files written by [`reconstruct_pair`], in order.
pub const RECONSTRUCT_FILES: [&str; 5] = [
    "view1.ply",
    "view2.ply",
    "recon_2to1.ply",
    "recon_1to2.ply",
    "metrics.csv",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructReport {
    pub r1: f64,
    pub r2: f64,
    /// Patch chamfer (L2) of view 2 predicted from view 1.
    pub chamfer_1to2: f64,
    pub chamfer_2to1: f64,
}

const TAG_RECON: u64 = 0x5245_434f;

fn absolute(pred: &[f64], target: &PatchSet) -> Vec<Point> {
    pred.chunks(3)
        .enumerate()
        .map(|(j, p)| add(&[p[0], p[1], p[2]], &target.centers[j / target.k]))
        .collect()
}

fn absolute_all(p: &PatchSet) -> Vec<Point> {
    (0..p.n).flat_map(|i| p.absolute_patch(i)).collect()
}

/// Cuts two views at ratios `r1`, `r2`, reconstructs each from the other
/// and writes the files in [`RECONSTRUCT_FILES`] under `out_dir`.
pub fn reconstruct_pair(
    model: &ModelState,
    cloud: &PointCloud,
    r1: f64,
    r2: f64,
    seed: u64,
    view: &ViewConfig,
    out_dir: &Path,
) -> Result<ReconstructReport> {
    for r in [r1, r2] {
        if !(r > 0.0 && r <= 1.0) {
            return Err(TrainError::Invalid(format!("crop ratio {r} must be in (0, 1]")));
        }
    }
    let cfg = model.config;
    let mut rng = stream_rng(seed, TAG_RECON, 0, 0);
    let pair = generate_view_pair_with_ratios(cloud, view, r1, r2, &mut rng, 0)?;
    let sample = PairSample::from_pair(&pair, cfg.n_patches, cfg.patch_size, &mut rng)?;
    let (rl_1to2, rl_2to1) = relative_displacement(&pair);

    let mut sess = model.frozen_session();
    let h1 = sess.encode(&sample.patches1)?;
    let h2 = sess.encode(&sample.patches2)?;
    let pred1 = sess.reconstruct(h2, &sample.patches1, rl_2to1)?;
    let pred2 = sess.reconstruct(h1, &sample.patches2, rl_1to2)?;
    let pred1 = sess.value(pred1).data().to_vec();
    let pred2 = sess.value(pred2).data().to_vec();

    let rel = |v: &[f64]| -> Vec<Point> { v.chunks(3).map(|p| [p[0], p[1], p[2]]).collect() };
    let k = cfg.patch_size;
    let (chamfer_2to1, _) = patch_loss(&rel(&pred1), &sample.patches1.patches, k, LossKind::ChamferL2)?;
    let (chamfer_1to2, _) = patch_loss(&rel(&pred2), &sample.patches2.patches, k, LossKind::ChamferL2)?;

    fs::create_dir_all(out_dir).map_err(|source| DataError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let [v1, v2, rec21, rec12, metrics] = RECONSTRUCT_FILES.map(|f| out_dir.join(f));
    write_ply(&pair.view1, &v1)?;
    write_ply(&pair.view2, &v2)?;
    write_ply_pair(&absolute(&pred1, &sample.patches1), &absolute_all(&sample.patches1), &rec21)?;
    write_ply_pair(&absolute(&pred2, &sample.patches2), &absolute_all(&sample.patches2), &rec12)?;
    let report = ReconstructReport {
        r1,
        r2,
        chamfer_1to2,
        chamfer_2to1,
    };
    let text = format!(
        "r1,r2,chamfer_1to2,chamfer_2to1\n{:?},{:?},{:?},{:?}\n",
        r1, r2, chamfer_1to2, chamfer_2to1
    );
    fs::write(&metrics, text).map_err(|source| DataError::Io { path: metrics, source })?;
    Ok(report)
}
