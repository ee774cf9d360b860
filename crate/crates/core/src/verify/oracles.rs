//! Brute-force references and invariant sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Outcome;
use crate::data::{decode_checkpoint, encode_checkpoint, generate_synthetic, Dataset, RunConfig, ShapeClass, SyntheticSpec};
use crate::geometry::{
    crop, fps, knn_group, minmax_normalize, random_rotation, sq_dist, FpsStart, Point, PointCloud,
};
use crate::loss::{chamfer_l1, chamfer_l2};
use crate::model::ModelConfig;
use crate::trainer::{StepRecord, Trainer};
use crate::vrpe::{build_relpos, sincos_embed, RelPos};

fn random_cloud(rng: &mut ChaCha8Rng, p: usize) -> PointCloud {
    let pts = (0..p)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0)))
        .collect();
    PointCloud::new(pts).expect("finite points")
}

/// Greedy farthest-point selection recomputing every distance from scratch
/// at each step: O(p·n) per step.
pub fn reference_fps(points: &[Point], n: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < n {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| sq_dist(p, &points[c])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        chosen.push(best.expect("n <= p"));
    }
    chosen
}

/// `k` nearest indices to `center` by sorting every (distance, index) pair.
pub fn reference_knn(points: &[Point], center: &Point, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2);
            (d, i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// All-pairs chamfer: `(l2, l1)`.
pub fn reference_chamfer(a: &[Point], b: &[Point]) -> (f64, f64) {
    let one_way = |x: &[Point], y: &[Point]| {
        let mut sq = 0.0;
        let mut eu = 0.0;
        for p in x {
            let d = y
                .iter()
                .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                .fold(f64::INFINITY, f64::min);
            sq += d;
            eu += d.sqrt();
        }
        (sq / x.len() as f64, eu / x.len() as f64)
    };
    let (f2, f1) = one_way(a, b);
    let (b2, b1) = one_way(b, a);
    (f2 + b2, f1 + b1)
}

pub fn fps_oracle(trials: usize, seed: u64) -> Outcome {
    let mut o = Outcome::new("oracle/fps", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x66_7073);
    for t in 0..trials {
        let p = rng.random_range(1..=64);
        let n = rng.random_range(1..=p);
        let start = rng.random_range(0..p);
        let cloud = random_cloud(&mut rng, p);
        let got = fps::<ChaCha8Rng>(&cloud, n, FpsStart::Index(start));
        let want = reference_fps(cloud.points(), n, start);
        o.expect(got.as_ref() == Ok(&want), || format!("trial {t}: p={p} n={n}: {got:?} vs {want:?}"));
    }
    o
}

pub fn knn_oracle(trials: usize, seed: u64) -> Outcome {
    let mut o = Outcome::new("oracle/knn", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b_6e6e);
    for t in 0..trials {
        let p = rng.random_range(1..=64);
        let k = rng.random_range(1..=p);
        let mut cloud = random_cloud(&mut rng, p).into_points();
        // Duplicates force index tie-breaking.
        if p > 2 {
            cloud[p - 1] = cloud[0];
        }
        let cloud = PointCloud::new(cloud).expect("finite");
        let centers: Vec<Point> = (0..4).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
        match knn_group(&cloud, &centers, k) {
            Ok(groups) => {
                for (c, g) in centers.iter().zip(&groups) {
                    let want = reference_knn(cloud.points(), c, k);
                    o.expect(*g == want, || format!("trial {t}: p={p} k={k}: {g:?} vs {want:?}"));
                }
            }
            Err(e) => o.expect(false, || format!("trial {t}: {e}")),
        }
    }
    o
}

pub fn chamfer_oracle(trials: usize, seed: u64) -> Outcome {
    let mut o = Outcome::new("oracle/chamfer", 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x63_6466);
    for t in 0..trials {
        let a = random_cloud(&mut rng, 8).into_points();
        let b = random_cloud(&mut rng, 8).into_points();
        let (w2, w1) = reference_chamfer(&a, &b);
        match (chamfer_l2(&a, &b), chamfer_l1(&a, &b)) {
            (Ok(l2), Ok(l1)) => {
                o.measure((l2 - w2).abs(), || format!("trial {t}: l2 {l2} vs {w2}"));
                o.measure((l1 - w1).abs(), || format!("trial {t}: l1 {l1} vs {w1}"));
            }
            (r2, r1) => o.expect(false, || format!("trial {t}: {r2:?} {r1:?}")),
        }
    }
    o
}

/// Crop cardinality and nearest-set property, normalization bounds and
/// rotation orthogonality over random clouds.
pub fn geometry_trials(trials: usize, seed: u64) -> Outcome {
    const TOL: f64 = 1e-9;
    let mut o = Outcome::new("invariants/geometry", TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x67_656f);
    for t in 0..trials {
        let p = rng.random_range(2..=128);
        let cloud = random_cloud(&mut rng, p);
        let ratio = 1.0 - rng.random::<f64>();
        let center = cloud.points()[rng.random_range(0..p)];
        let c = match crop(&cloud, &center, ratio) {
            Ok(c) => c,
            Err(e) => {
                o.expect(false, || format!("trial {t}: crop: {e}"));
                continue;
            }
        };
        let expected = ((ratio * p as f64).round() as usize).clamp(1, p);
        // round() is half away from zero, matching half-up for positive values.
        o.expect(c.cloud.len() == expected && c.indices.len() == expected, || {
            format!("trial {t}: kept {} of {p} at ratio {ratio}, expected {expected}", c.cloud.len())
        });
        o.expect(c.indices.windows(2).all(|w| w[0] < w[1]), || format!("trial {t}: indices not ascending"));
        let kept_max = c.indices.iter().map(|&i| sq_dist(&cloud.points()[i], &center)).fold(0.0, f64::max);
        let dropped_min = (0..p)
            .filter(|i| c.indices.binary_search(i).is_err())
            .map(|i| sq_dist(&cloud.points()[i], &center))
            .fold(f64::INFINITY, f64::min);
        o.expect(kept_max <= dropped_min, || {
            format!("trial {t}: kept point at {kept_max} beyond dropped point at {dropped_min}")
        });

        let n = minmax_normalize(&c.cloud);
        let coords = n.points().iter().flat_map(|q| q.iter().copied());
        let max_abs = coords.fold(0.0f64, |m, v| m.max(v.abs()));
        let spread = c.cloud.points().iter().any(|q| *q != c.cloud.points()[0]);
        o.measure((max_abs - if spread { 1.0 } else { 0.0 }).abs(), || {
            format!("trial {t}: normalized max |coord| {max_abs}")
        });
        let centroid = n.centroid();
        o.measure(centroid.iter().fold(0.0f64, |m, v| m.max(v.abs())), || {
            format!("trial {t}: normalized centroid {centroid:?}")
        });

        let r = random_rotation(&mut rng);
        o.measure(r.orthogonality_error(), || format!("trial {t}: RᵀR − I"));
        o.measure((r.determinant() - 1.0).abs(), || format!("trial {t}: det {}", r.determinant()));
        let a = &n.points()[0];
        let b = &n.points()[n.len() - 1];
        o.measure((sq_dist(&r.apply(a), &r.apply(b)) - sq_dist(a, b)).abs(), || {
            format!("trial {t}: rotation changed a distance")
        });
    }
    o
}

/// Direct evaluation of one embedding entry.
fn expected_entry(rp: &[f64; 6], width: usize, col: usize) -> f64 {
    let block = width / 6;
    let (channel, within) = (col / block, col % block);
    let j = within / 2;
    let omega = 1.0 / 10000f64.powf(j as f64 / (width / 12) as f64);
    let x = omega * rp[channel];
    if within % 2 == 0 {
        x.sin()
    } else {
        x.cos()
    }
}

pub fn vrpe_identities(rows: usize, seed: u64) -> Outcome {
    let mut o = Outcome::new("identities/vrpe", 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76_7270);
    const WIDTHS: [usize; 5] = [12, 24, 48, 96, 384];
    for r in 0..rows {
        let row: [f64; 6] = [0; 6].map(|_| rng.random_range(-2.0..2.0));
        let width = WIDTHS[r % WIDTHS.len()];
        let e = match sincos_embed(&RelPos { rows: vec![row] }, width) {
            Ok(e) => e,
            Err(err) => {
                o.expect(false, || format!("row {r}: {err}"));
                continue;
            }
        };
        let v = e.data();
        for pair in v.chunks(2) {
            o.measure((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs(), || format!("row {r}: sin²+cos²"));
        }
        for (col, &x) in v.iter().enumerate() {
            let want = expected_entry(&row, width, col);
            o.measure((x - want).abs(), || format!("row {r} width {width} col {col}: {x} vs {want}"));
        }
    }
    let zero = build_relpos(&[[0.0; 3]; 3], [0.0; 3]).expect("non-empty");
    match sincos_embed(&zero, 48) {
        Ok(e) => {
            let exact = e.data().chunks(2).all(|p| p[0] == 0.0 && p[1] == 1.0);
            o.expect(exact, || "zero relative position is not [0, 1, 0, 1, ..]".into());
        }
        Err(err) => o.expect(false, || err.to_string()),
    }
    for bad in [50, 18, 0] {
        let rp = RelPos { rows: vec![[0.1; 6]] };
        o.expect(sincos_embed(&rp, bad).is_err(), || format!("width {bad} accepted"));
    }
    o
}

fn tiny_setup(seed: u64) -> (RunConfig, Dataset) {
    let ds = generate_synthetic(&SyntheticSpec {
        classes: vec![ShapeClass::Sphere, ShapeClass::Cube],
        clouds_per_class: 3,
        points_per_cloud: 48,
        noise_std: 0.01,
        seed,
    })
    .expect("valid spec");
    let cfg = RunConfig {
        model: ModelConfig::tiny(),
        epochs: 2,
        warmup_epochs: 1,
        batch: 4,
        seed,
        ..RunConfig::desk()
    };
    (cfg, ds)
}

/// Columns of a log row that must repeat exactly.
fn stable(r: &StepRecord) -> (u64, u64, u64, u64, u64, u64) {
    (
        r.step,
        r.epoch,
        r.lr.to_bits(),
        r.loss_total.to_bits(),
        r.loss_1to2.to_bits(),
        r.loss_2to1.to_bits(),
    )
}

fn trained(seed: u64) -> Result<(Vec<u8>, Vec<StepRecord>), String> {
    let (cfg, ds) = tiny_setup(seed);
    let mut t = Trainer::new(cfg.clone(), &ds).map_err(|e| e.to_string())?;
    t.run(None, None).map_err(|e| e.to_string())?;
    let bytes = encode_checkpoint(&t.model, &t.optimizer, t.step, &cfg.to_text());
    Ok((bytes, t.log.records))
}

/// Two identical-seed tiny runs must agree bit for bit.
pub fn run_determinism(seed: u64) -> Outcome {
    let mut o = Outcome::new("determinism/train", 0.0);
    match (trained(seed), trained(seed)) {
        (Ok((a, la)), Ok((b, lb))) => {
            o.expect(a == b, || "checkpoints differ".into());
            o.expect(la.len() == lb.len() && !la.is_empty(), || "log lengths differ".into());
            for (x, y) in la.iter().zip(&lb) {
                o.expect(stable(x) == stable(y), || format!("log row {} differs", x.step));
            }
        }
        (a, b) => o.expect(false, || format!("{:?} / {:?}", a.err(), b.err())),
    }
    o
}

/// Encode, decode and re-encode a trained tiny checkpoint.
pub fn checkpoint_round_trip(seed: u64) -> Outcome {
    let mut o = Outcome::new("serialization/ckpt", 0.0);
    let (bytes, _) = match trained(seed) {
        Ok(v) => v,
        Err(e) => {
            o.expect(false, || e);
            return o;
        }
    };
    match decode_checkpoint(&bytes) {
        Ok(ck) => {
            let again = encode_checkpoint(&ck.model, &ck.optimizer, ck.step, &ck.meta);
            o.expect(again == bytes, || "re-encoded bytes differ".into());
            o.expect(ck.model.params.all_finite(), || "non-finite parameters".into());
        }
        Err(e) => o.expect(false, || e.to_string()),
    }
    o
}
