//! Analytic shape classes sampled uniformly by surface area.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{stream_rng, DataError, Dataset, Result, Sample};
use crate::geometry::{random_rotation, Point, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Plane,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Torus,
        ShapeClass::Plane,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Cube => "cube",
            Self::Cylinder => "cylinder",
            Self::Torus => "torus",
            Self::Plane => "plane",
        }
    }
}

impl FromStr for ShapeClass {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| DataError::UnknownClass(s.to_owned()))
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: Vec<ShapeClass>,
    pub clouds_per_class: usize,
    pub points_per_cloud: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Four classes, 100 clouds each.
    fn default() -> Self {
        Self {
            classes: ShapeClass::ALL[..4].to_vec(),
            clouds_per_class: 100,
            points_per_cloud: 256,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(DataError::Spec("at least one class is required".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(DataError::Spec(format!("class {c} listed twice")));
            }
        }
        if self.clouds_per_class == 0 || self.points_per_cloud == 0 {
            return Err(DataError::Spec("counts must be at least 1".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(DataError::Spec(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        Ok(())
    }

    /// Reads `key = value` lines: `classes` (comma list), `clouds_per_class`,
    /// `points_per_cloud`, `noise_std`, `seed`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (line, key, value) in super::parse_kv(text)? {
            let bad = |msg: String| DataError::Config { line, msg };
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("{key}: not a count: {v:?}")));
            match key.as_str() {
                "classes" => {
                    spec.classes = value
                        .split(',')
                        .map(|c| c.trim().parse())
                        .collect::<Result<_>>()?
                }
                "clouds_per_class" => spec.clouds_per_class = num(&value)?,
                "points_per_cloud" => spec.points_per_cloud = num(&value)?,
                "noise_std" => {
                    spec.noise_std = value
                        .parse()
                        .map_err(|_| bad(format!("noise_std: not a number: {value:?}")))?
                }
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| bad(format!("seed: not an integer: {value:?}")))?
                }
                _ => return Err(bad(format!("unknown key {key:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

const TAG_SYNTH: u64 = 0x5359_4e54;

fn unit_sphere<R: Rng>(rng: &mut R) -> Point {
    loop {
        let v: Point = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn sample_shape<R: Rng>(class: ShapeClass, p: usize, rng: &mut R) -> Vec<Point> {
    match class {
        ShapeClass::Sphere => (0..p).map(|_| unit_sphere(rng)).collect(),
        ShapeClass::Cube => {
            let half: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
            let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
            let total: f64 = areas.iter().sum();
            (0..p)
                .map(|_| {
                    let mut u = rng.random_range(0.0..total);
                    let mut axis = 0;
                    while axis < 2 && u >= areas[axis] {
                        u -= areas[axis];
                        axis += 1;
                    }
                    let mut q: Point = std::array::from_fn(|a| rng.random_range(-half[a]..half[a]));
                    q[axis] = if rng.random_bool(0.5) { half[axis] } else { -half[axis] };
                    q
                })
                .collect()
        }
        ShapeClass::Cylinder => {
            let r = rng.random_range(0.4..0.8);
            let h = rng.random_range(1.0..2.0);
            let lateral = 2.0 * PI * r * h;
            let cap = PI * r * r;
            (0..p)
                .map(|_| {
                    let t = rng.random_range(0.0..2.0 * PI);
                    if rng.random_range(0.0..lateral + 2.0 * cap) < lateral {
                        [r * t.cos(), r * t.sin(), rng.random_range(-h / 2.0..h / 2.0)]
                    } else {
                        let rho = r * rng.random::<f64>().sqrt();
                        let z = if rng.random_bool(0.5) { h / 2.0 } else { -h / 2.0 };
                        [rho * t.cos(), rho * t.sin(), z]
                    }
                })
                .collect()
        }
        ShapeClass::Torus => {
            let big = rng.random_range(0.6..0.8);
            let small = rng.random_range(0.15..0.3);
            (0..p)
                .map(|_| {
                    let theta = rng.random_range(0.0..2.0 * PI);
                    let phi = loop {
                        let phi = rng.random_range(0.0..2.0 * PI);
                        if rng.random_range(0.0..big + small) < big + small * phi.cos() {
                            break phi;
                        }
                    };
                    let ring = big + small * phi.cos();
                    [ring * theta.cos(), ring * theta.sin(), small * phi.sin()]
                })
                .collect()
        }
        ShapeClass::Plane => {
            let a = rng.random_range(0.6..1.0);
            let b = rng.random_range(0.3..1.0);
            (0..p)
                .map(|_| [rng.random_range(-a..a), rng.random_range(-b..b), 0.0])
                .collect()
        }
    }
}

/// Labeled clouds ordered class by class; label `i` is `spec.classes[i]`.
/// Every non-sphere cloud gets a random orientation, then Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| DataError::Spec(e.to_string()))?;
    let mut samples = Vec::with_capacity(spec.classes.len() * spec.clouds_per_class);
    for (label, &class) in spec.classes.iter().enumerate() {
        for j in 0..spec.clouds_per_class {
            let mut rng = stream_rng(spec.seed, TAG_SYNTH, class as u64, j as u64);
            let mut points = sample_shape(class, spec.points_per_cloud, &mut rng);
            if class != ShapeClass::Sphere {
                let rot = random_rotation(&mut rng);
                points.iter_mut().for_each(|q| *q = rot.apply(q));
            }
            if spec.noise_std > 0.0 {
                for q in &mut points {
                    for v in q.iter_mut() {
                        *v += noise.sample(&mut rng);
                    }
                }
            }
            samples.push(Sample {
                cloud: PointCloud::new(points)?,
                label,
            });
        }
    }
    Ok(Dataset {
        class_names: spec.classes.iter().map(|c| c.name().to_owned()).collect(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sq_dist;

    fn spec(classes: &[ShapeClass], per: usize, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            classes: classes.to_vec(),
            clouds_per_class: per,
            points_per_cloud: 200,
            noise_std: noise,
            seed: 7,
        }
    }

    #[test]
    fn clean_sphere_is_on_unit_sphere() {
        let ds = generate_synthetic(&spec(&[ShapeClass::Sphere], 3, 0.0)).unwrap();
        for s in &ds.samples {
            for p in s.cloud.points() {
                assert!((sq_dist(p, &[0.0; 3]).sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn counts_labels_and_determinism() {
        let s = SyntheticSpec {
            points_per_cloud: 32,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&s).unwrap();
        assert_eq!(a.len(), 400);
        assert_eq!(a.class_names, ["sphere", "cube", "cylinder", "torus"]);
        for l in 0..4 {
            assert_eq!(a.samples.iter().filter(|x| x.label == l).count(), 100);
        }
        let b = generate_synthetic(&s).unwrap();
        let bytes = |d: &Dataset| -> Vec<u64> {
            d.samples
                .iter()
                .flat_map(|x| x.cloud.points().iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(bytes(&a), bytes(&b));
        let c = generate_synthetic(&SyntheticSpec { seed: 8, ..s }).unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn surfaces_satisfy_their_equations() {
        let mut rng = stream_rng(1, 2, 3, 4);
        for p in sample_shape(ShapeClass::Plane, 100, &mut rng) {
            assert_eq!(p[2], 0.0);
        }
        for p in sample_shape(ShapeClass::Cube, 100, &mut rng) {
            let on_face = p.iter().filter(|v| v.abs() >= 0.5).count() >= 1;
            assert!(on_face && p.iter().all(|v| v.abs() <= 1.0));
        }
        let pts = sample_shape(ShapeClass::Torus, 100, &mut rng);
        let z_max = pts.iter().map(|p| p[2].abs()).fold(0.0, f64::max);
        assert!(z_max <= 0.3);
    }

    #[test]
    fn spec_errors() {
        assert!(matches!("cone".parse::<ShapeClass>(), Err(DataError::UnknownClass(_))));
        let dup = spec(&[ShapeClass::Cube, ShapeClass::Cube], 1, 0.0);
        assert!(generate_synthetic(&dup).is_err());
        assert!(generate_synthetic(&spec(&[ShapeClass::Cube], 1, -1.0)).is_err());
        let parsed = SyntheticSpec::parse("classes = sphere, plane\nclouds_per_class = 5 # few\nseed=3").unwrap();
        assert_eq!(parsed.classes, [ShapeClass::Sphere, ShapeClass::Plane]);
        assert_eq!((parsed.clouds_per_class, parsed.seed), (5, 3));
        assert!(SyntheticSpec::parse("classes = cone").is_err());
        assert!(matches!(
            SyntheticSpec::parse("sed = 3"),
            Err(DataError::Config { line: 1, .. })
        ));
    }
}
