//! Decoupled view pairs and patch grouping.
//!
//! A view pair is two nearest-set crops of one cloud around distinct seed
//! points, each normalized about its own centroid and independently
//! augmented. The crop centroids are recorded in the source frame before any
//! normalization so the inter-view displacement survives decoupling.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{
    self, add, crop, fps, knn_group, minmax_normalize, random_rotation, sub, FpsStart,
    GeometryError, Point, PointCloud, Rotation,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ViewError {
    #[error("view generation needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("minimum crop ratio {0} outside (0, 1]")]
    MinRatio(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// View generation switches. Defaults follow the pretraining recipe:
/// crop, normalize, rotate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewConfig {
    pub r_min: f64,
    pub normalize: bool,
    pub rotate: bool,
    pub scale: bool,
    pub translate: bool,
    pub jitter: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            r_min: 0.6,
            normalize: true,
            rotate: true,
            scale: false,
            translate: false,
            jitter: false,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<(), ViewError> {
        if !(self.r_min > 0.0 && self.r_min <= 1.0) {
            return Err(ViewError::MinRatio(self.r_min));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view1: PointCloud,
    pub view2: PointCloud,
    /// Crop centroids in the source frame.
    pub center1: Point,
    pub center2: Point,
    pub ratio1: f64,
    pub ratio2: f64,
    pub rot1: Rotation,
    pub rot2: Rotation,
    /// Source indices of the crop seed points.
    pub seed1: usize,
    pub seed2: usize,
    pub source_id: usize,
}

const SCALE_RANGE: (f64, f64) = (2.0 / 3.0, 1.5);
const TRANSLATE_RANGE: f64 = 0.2;
const JITTER_STD: f64 = 0.01;
const JITTER_CLIP: f64 = 0.05;

fn augment<R: Rng>(
    cloud: &PointCloud,
    cfg: &ViewConfig,
    rng: &mut R,
) -> (PointCloud, Rotation) {
    let mut out = if cfg.normalize {
        minmax_normalize(cloud)
    } else {
        cloud.clone()
    };
    let rot = if cfg.rotate {
        random_rotation(rng)
    } else {
        Rotation::IDENTITY
    };
    if cfg.rotate {
        out = rot.rotate(&out);
    }
    if cfg.scale {
        let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1));
        out = out.map(|p| [p[0] * s[0], p[1] * s[1], p[2] * s[2]]);
    }
    if cfg.translate {
        let t: Point = std::array::from_fn(|_| rng.random_range(-TRANSLATE_RANGE..TRANSLATE_RANGE));
        out = out.map(|p| add(p, &t));
    }
    if cfg.jitter {
        let normal = Normal::new(0.0, JITTER_STD).expect("valid std");
        let pts = out
            .points()
            .iter()
            .map(|p| {
                std::array::from_fn(|a| {
                    p[a] + normal.sample(rng).clamp(-JITTER_CLIP, JITTER_CLIP)
                })
            })
            .collect();
        out = PointCloud::new(pts).expect("finite jitter");
    }
    (out, rot)
}

/// Draws ratios uniformly from `[r_min, 1]` and two distinct seed points,
/// then crops and augments each view independently.
pub fn generate_view_pair<R: Rng>(
    cloud: &PointCloud,
    cfg: &ViewConfig,
    rng: &mut R,
    source_id: usize,
) -> Result<ViewPair, ViewError> {
    cfg.validate()?;
    let r1 = sample_ratio(cfg.r_min, rng);
    let r2 = sample_ratio(cfg.r_min, rng);
    generate_view_pair_with_ratios(cloud, cfg, r1, r2, rng, source_id)
}

fn sample_ratio<R: Rng>(r_min: f64, rng: &mut R) -> f64 {
    if r_min >= 1.0 {
        1.0
    } else {
        rng.random_range(r_min..=1.0)
    }
}

/// Same as [`generate_view_pair`] with caller-chosen crop ratios.
pub fn generate_view_pair_with_ratios<R: Rng>(
    cloud: &PointCloud,
    cfg: &ViewConfig,
    r1: f64,
    r2: f64,
    rng: &mut R,
    source_id: usize,
) -> Result<ViewPair, ViewError> {
    let p = cloud.len();
    if p < 2 {
        return Err(ViewError::TooFewPoints(p));
    }
    let seed1 = rng.random_range(0..p);
    let mut seed2 = rng.random_range(0..p - 1);
    if seed2 >= seed1 {
        seed2 += 1;
    }
    let crop1 = crop(cloud, &cloud.points()[seed1], r1)?;
    let crop2 = crop(cloud, &cloud.points()[seed2], r2)?;
    let (view1, rot1) = augment(&crop1.cloud, cfg, rng);
    let (view2, rot2) = augment(&crop2.cloud, cfg, rng);
    Ok(ViewPair {
        view1,
        view2,
        center1: crop1.center,
        center2: crop2.center,
        ratio1: r1,
        ratio2: r2,
        rot1,
        rot2,
        seed1,
        seed2,
        source_id,
    })
}

/// `(RL₁→₂, RL₂→₁) = (L₁ − L₂, L₂ − L₁)`.
pub fn relative_displacement(pair: &ViewPair) -> (Point, Point) {
    (
        sub(&pair.center1, &pair.center2),
        sub(&pair.center2, &pair.center1),
    )
}

/// `n` FPS group centers and, for each, its `k` nearest points stored
/// relative to the center.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    /// `n·k` points, patch-major, center-relative.
    pub patches: Vec<Point>,
    pub center_indices: Vec<usize>,
    pub n: usize,
    pub k: usize,
}

impl PatchSet {
    pub fn patch(&self, i: usize) -> &[Point] {
        &self.patches[i * self.k..(i + 1) * self.k]
    }

    /// Patch `i` translated back to the view frame.
    pub fn absolute_patch(&self, i: usize) -> Vec<Point> {
        self.patch(i).iter().map(|p| add(p, &self.centers[i])).collect()
    }

    /// Flattened `(n·k)×3` row-major coordinates.
    pub fn patch_values(&self) -> Vec<f64> {
        self.patches.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn center_values(&self) -> Vec<f64> {
        self.centers.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

pub fn patchify<R: Rng>(
    view: &PointCloud,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<PatchSet, ViewError> {
    patchify_from(view, n, k, FpsStart::Random(rng))
}

pub fn patchify_from<R: Rng>(
    view: &PointCloud,
    n: usize,
    k: usize,
    start: FpsStart<'_, R>,
) -> Result<PatchSet, ViewError> {
    if k > view.len() {
        return Err(GeometryError::TooMany {
            what: "patch points",
            requested: k,
            available: view.len(),
        }
        .into());
    }
    let center_indices = fps(view, n, start)?;
    let centers: Vec<Point> = center_indices.iter().map(|&i| view.points()[i]).collect();
    let groups = knn_group(view, &centers, k)?;
    let mut patches = Vec::with_capacity(n * k);
    for (c, group) in centers.iter().zip(&groups) {
        patches.extend(group.iter().map(|&j| geometry::sub(&view.points()[j], c)));
    }
    Ok(PatchSet {
        centers,
        patches,
        center_indices,
        n,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, p: usize) -> PointCloud {
        PointCloud::new(
            (0..p)
                .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn full_ratio_views_share_the_cloud_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let src = cloud(&mut rng, 64);
        let cfg = ViewConfig {
            r_min: 1.0,
            ..Default::default()
        };
        let pair = generate_view_pair(&src, &cfg, &mut rng, 0).unwrap();
        assert_eq!(pair.view1.len(), 64);
        assert_eq!(pair.view2.len(), 64);
        assert_eq!(pair.center1, src.centroid());
        assert_eq!(pair.center2, src.centroid());
        assert_ne!(pair.seed1, pair.seed2);
    }

    #[test]
    fn paper_scale_view_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = cloud(&mut rng, 1024);
        let cfg = ViewConfig::default();
        for _ in 0..10 {
            let pair = generate_view_pair(&src, &cfg, &mut rng, 0).unwrap();
            for v in [&pair.view1, &pair.view2] {
                assert!((614..=1024).contains(&v.len()), "{}", v.len());
            }
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let src = cloud(&mut ChaCha8Rng::seed_from_u64(2), 100);
        let a = generate_view_pair(&src, &ViewConfig::default(), &mut ChaCha8Rng::seed_from_u64(7), 3);
        let b = generate_view_pair(&src, &ViewConfig::default(), &mut ChaCha8Rng::seed_from_u64(7), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_tiny_clouds_and_bad_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = PointCloud::new(vec![[0.0; 3]]).unwrap();
        assert_eq!(
            generate_view_pair(&one, &ViewConfig::default(), &mut rng, 0),
            Err(ViewError::TooFewPoints(1))
        );
        let two = cloud(&mut rng, 5);
        let bad = ViewConfig {
            r_min: 1.5,
            ..Default::default()
        };
        assert_eq!(
            generate_view_pair(&two, &bad, &mut rng, 0),
            Err(ViewError::MinRatio(1.5))
        );
    }

    #[test]
    fn all_augmentations_off_reproduces_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = cloud(&mut rng, 40);
        let cfg = ViewConfig {
            r_min: 1.0,
            normalize: false,
            rotate: false,
            ..Default::default()
        };
        let pair = generate_view_pair(&src, &cfg, &mut rng, 0).unwrap();
        assert_eq!(pair.view1, src);
        assert_eq!(pair.view2, src);
    }

    #[test]
    fn displacement_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = cloud(&mut rng, 10);
        let mut pair = generate_view_pair(&src, &ViewConfig::default(), &mut rng, 0).unwrap();
        pair.center1 = [1.0, 0.0, 0.0];
        pair.center2 = [0.0, 1.0, 0.0];
        assert_eq!(relative_displacement(&pair), ([1.0, -1.0, 0.0], [-1.0, 1.0, 0.0]));
        pair.center2 = pair.center1;
        assert_eq!(relative_displacement(&pair), ([0.0; 3], [0.0; 3]));
    }

    #[test]
    fn single_point_patch_is_origin() {
        let view = PointCloud::new(vec![[0.3, -0.2, 0.9]]).unwrap();
        let ps = patchify(&view, 1, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ps.patches, vec![[0.0, 0.0, 0.0]]);
        assert_eq!(ps.centers, vec![[0.3, -0.2, 0.9]]);
    }

    #[test]
    fn patches_reassemble_to_selected_neighbours() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let view = cloud(&mut rng, 60);
        let ps = patchify(&view, 8, 5, &mut rng).unwrap();
        let diameter = view.diameter();
        for i in 0..ps.n {
            // First neighbour of a center is the center itself.
            assert_eq!(ps.patch(i)[0], [0.0; 3]);
            for p in ps.absolute_patch(i) {
                assert!(view.points().iter().any(|q| geometry::dist(q, &p) < 1e-12));
            }
            for p in ps.patch(i) {
                assert!(geometry::dist(p, &[0.0; 3]) <= diameter);
            }
        }
        assert!(patchify(&view, 61, 5, &mut rng).is_err());
        assert!(patchify(&view, 4, 61, &mut rng).is_err());
    }

    #[test]
    fn full_count_centers_cover_every_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let view = cloud(&mut rng, 25);
        let ps = patchify(&view, 25, 1, &mut rng).unwrap();
        let mut idx = ps.center_indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..25).collect::<Vec<_>>());
    }
}
