//! Brute-force point-cloud kernels: farthest-point sampling, k-nearest
//! grouping, nearest-set cropping, normalization and random rotation.
//!
//! Every kernel breaks distance ties by the lowest original index so outputs
//! are a pure function of the inputs and the caller's RNG state.

use std::cmp::Ordering;

use rand::Rng;

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("point cloud must contain at least one point")]
    Empty,
    #[error("point {index} has a non-finite coordinate {point:?}")]
    NonFinite { index: usize, point: Point },
    #[error("requested {requested} {what} from a cloud of {available} points")]
    TooMany {
        what: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("{what} must be at least 1")]
    Zero { what: &'static str },
    #[error("crop ratio {0} outside (0, 1]")]
    Ratio(f64),
    #[error("index {index} out of range for {len} points")]
    Index { index: usize, len: usize },
}

pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn dist(a: &Point, b: &Point) -> f64 {
    sq_dist(a, b).sqrt()
}

pub fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: &Point, b: &Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Non-empty ordered set of finite 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::Empty);
        }
        if let Some((index, point)) = points
            .iter()
            .enumerate()
            .find(|(_, p)| p.iter().any(|c| !c.is_finite()))
        {
            return Err(GeometryError::NonFinite {
                index,
                point: *point,
            });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.max(sq_dist(a, b));
            }
        }
        best.sqrt()
    }

    pub fn map(&self, f: impl Fn(&Point) -> Point) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(f).collect(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// How farthest-point sampling picks its first point.
pub enum FpsStart<'a, R: Rng> {
    /// Uniformly at random from the given generator.
    Random(&'a mut R),
    Index(usize),
}

/// Greedy farthest-point sampling of `n` indices in selection order.
///
/// Each new point maximizes the minimum squared distance to the points
/// already chosen, with ties going to the lowest index.
pub fn fps<R: Rng>(
    cloud: &PointCloud,
    n: usize,
    start: FpsStart<'_, R>,
) -> Result<Vec<usize>, GeometryError> {
    let p = cloud.len();
    if n == 0 {
        return Err(GeometryError::Zero { what: "sample count" });
    }
    if n > p {
        return Err(GeometryError::TooMany {
            what: "fps samples",
            requested: n,
            available: p,
        });
    }
    let first = match start {
        FpsStart::Random(rng) => rng.random_range(0..p),
        FpsStart::Index(i) if i < p => i,
        FpsStart::Index(index) => return Err(GeometryError::Index { index, len: p }),
    };
    let pts = cloud.points();
    let mut min_d = vec![f64::INFINITY; p];
    let mut chosen = Vec::with_capacity(n);
    let mut current = first;
    loop {
        chosen.push(current);
        // Selected points drop out of the argmax.
        min_d[current] = f64::NEG_INFINITY;
        if chosen.len() == n {
            break;
        }
        let c = pts[current];
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, pt) in pts.iter().enumerate() {
            let d = sq_dist(pt, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}

/// Indices of all points sorted by (squared distance to `target`, index).
fn nearest_order(cloud: &PointCloud, target: &Point) -> Vec<usize> {
    let d: Vec<f64> = cloud.points().iter().map(|p| sq_dist(p, target)).collect();
    let mut idx: Vec<usize> = (0..cloud.len()).collect();
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    idx
}

/// For every center, the indices of the `k` nearest cloud points, nearest
/// first.
pub fn knn_group(
    cloud: &PointCloud,
    centers: &[Point],
    k: usize,
) -> Result<Vec<Vec<usize>>, GeometryError> {
    if k == 0 {
        return Err(GeometryError::Zero { what: "k" });
    }
    if k > cloud.len() {
        return Err(GeometryError::TooMany {
            what: "neighbours",
            requested: k,
            available: cloud.len(),
        });
    }
    Ok(centers
        .iter()
        .map(|c| {
            let mut order = nearest_order(cloud, c);
            order.truncate(k);
            order
        })
        .collect())
}

/// Number of points kept by a crop: `round(ratio · p)` rounded half up,
/// never below one.
pub fn crop_count(ratio: f64, p: usize) -> usize {
    ((ratio * p as f64 + 0.5).floor() as usize).clamp(1, p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub cloud: PointCloud,
    /// Original indices of the kept points, ascending.
    pub indices: Vec<usize>,
    /// Centroid of the kept points in the source frame.
    pub center: Point,
}

/// Keeps the `crop_count(ratio, p)` points nearest to `center` (in original
/// order) and reports their centroid.
pub fn crop(cloud: &PointCloud, center: &Point, ratio: f64) -> Result<Crop, GeometryError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(GeometryError::Ratio(ratio));
    }
    let m = crop_count(ratio, cloud.len());
    let mut indices = nearest_order(cloud, center);
    indices.truncate(m);
    indices.sort_unstable();
    let kept = cloud.select(&indices);
    let center = kept.centroid();
    Ok(Crop {
        cloud: kept,
        indices,
        center,
    })
}

/// Shifts the centroid to the origin and scales so the largest absolute
/// coordinate is 1. Zero-extent clouds are only translated.
pub fn minmax_normalize(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let centered = cloud.map(|p| sub(p, &c));
    let extent = centered
        .points()
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if extent == 0.0 {
        return centered;
    }
    centered.map(|p| [p[0] / extent, p[1] / extent, p[2] / extent])
}

/// Proper rotation of 3D space, stored as a row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    pub matrix: [[f64; 3]; 3],
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Rotation for a unit quaternion `(w, x, y, z)`.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let [w, x, y, z] = q;
        Rotation {
            matrix: [
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                ],
                [
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                ],
                [
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ],
        }
    }

    pub fn apply(&self, p: &Point) -> Point {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ]
    }

    pub fn transpose(&self) -> Rotation {
        let m = &self.matrix;
        let mut t = [[0.0; 3]; 3];
        for (r, row) in t.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[c][r];
            }
        }
        Rotation { matrix: t }
    }

    pub fn rotate(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map(|p| self.apply(p))
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest entry of |RᵀR − I|.
    pub fn orthogonality_error(&self) -> f64 {
        let m = &self.matrix;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Rotation distributed uniformly over SO(3), via a uniform unit quaternion
/// (Shoemake's subgroup algorithm).
pub fn random_rotation<R: Rng>(rng: &mut R) -> Rotation {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let u3: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    Rotation::from_quaternion([a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos()])
}

/// Lexicographic comparison used when points must be sorted as a multiset.
pub fn cmp_points(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Fixed<'a> = FpsStart<'a, ChaCha8Rng>;

    fn random_cloud(rng: &mut ChaCha8Rng, p: usize) -> PointCloud {
        PointCloud::new(
            (0..p)
                .map(|_| {
                    [
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cloud_rejects_empty_and_non_finite() {
        assert_eq!(PointCloud::new(vec![]), Err(GeometryError::Empty));
        assert!(matches!(
            PointCloud::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]),
            Err(GeometryError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn fps_full_count_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(&mut rng, 20);
        let mut idx = fps(&cloud, 20, FpsStart::Random(&mut rng)).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn fps_colinear_picks_far_end() {
        let cloud = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(fps(&cloud, 2, Fixed::Index(0)).unwrap(), vec![0, 3]);
        assert_eq!(fps(&cloud, 3, Fixed::Index(0)).unwrap(), vec![0, 3, 2]);
    }

    #[test]
    fn fps_rejects_oversampling() {
        let cloud = PointCloud::new(vec![[0.0; 3]; 3]).unwrap();
        assert!(matches!(
            fps(&cloud, 4, Fixed::Index(0)),
            Err(GeometryError::TooMany { requested: 4, .. })
        ));
    }

    #[test]
    fn fps_duplicate_points_still_yield_distinct_indices() {
        let cloud = PointCloud::new(vec![[1.0, 1.0, 1.0]; 5]).unwrap();
        assert_eq!(fps(&cloud, 5, Fixed::Index(2)).unwrap(), vec![2, 0, 1, 3, 4]);
    }

    #[test]
    fn knn_self_and_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = random_cloud(&mut rng, 12);
        let c = cloud.points()[7];
        assert_eq!(knn_group(&cloud, &[c], 1).unwrap(), vec![vec![7]]);
        let all = knn_group(&cloud, &[c], 12).unwrap().remove(0);
        let d: Vec<f64> = all.iter().map(|&i| sq_dist(&cloud.points()[i], &c)).collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
        assert!(knn_group(&cloud, &[c], 13).is_err());
    }

    #[test]
    fn crop_counts_and_centroid() {
        assert_eq!(crop_count(0.6, 1024), 614);
        assert_eq!(crop_count(1.0, 7), 7);
        assert_eq!(crop_count(1e-9, 7), 1);
        assert_eq!(crop_count(0.5, 5), 3); // 2.5 rounds up

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 50);
        let full = crop(&cloud, &cloud.points()[0], 1.0).unwrap();
        assert_eq!(full.cloud, cloud);
        assert_eq!(full.center, cloud.centroid());
        assert!(crop(&cloud, &cloud.points()[0], 0.0).is_err());
        assert!(crop(&cloud, &cloud.points()[0], 1.5).is_err());
    }

    #[test]
    fn normalize_reference_cases() {
        let mut corners = Vec::new();
        for x in [-1.0, 1.0] {
            for y in [-1.0, 1.0] {
                for z in [-1.0, 1.0] {
                    corners.push([x, y, z]);
                }
            }
        }
        let cube = PointCloud::new(corners).unwrap();
        assert_eq!(minmax_normalize(&cube), cube);

        let two = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(
            minmax_normalize(&two).points(),
            &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
        );

        let flat = PointCloud::new(vec![[3.0, 4.0, 5.0]; 3]).unwrap();
        assert_eq!(minmax_normalize(&flat).points(), &[[0.0; 3]; 3]);
    }

    #[test]
    fn rotation_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_rotation(&mut rng);
        assert!(r.orthogonality_error() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        let cloud = random_cloud(&mut rng, 10);
        let back = r.transpose().rotate(&r.rotate(&cloud));
        for (a, b) in back.points().iter().zip(cloud.points()) {
            assert!(dist(a, b) < 1e-12);
        }
    }

    #[test]
    fn rotation_is_seed_deterministic() {
        let a = random_rotation(&mut ChaCha8Rng::seed_from_u64(11));
        let b = random_rotation(&mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }
}
