//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test -p pqae --test acceptance [-- 1 5 9]` runs all criteria or the
//! listed ones. The process exits 0 unless `ACCEPTANCE_STRICT` is set, so a
//! failing criterion is reported without aborting the rest of the test run.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use pqae::data::{generate_synthetic, load_checkpoint, Dataset, RunConfig, ShapeClass, SyntheticSpec};
use pqae::model::ModelState;
use pqae::trainer::{init_seed, pretrain, probe, Protocol, Trainer, FINAL_CHECKPOINT, LOG_FILE};
use pqae::verify::{self, Outcome};

struct Verdict {
    id: u32,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn outcomes_pass(outcomes: &[Outcome]) -> (bool, String) {
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.to_string()).collect();
    let detail = outcomes
        .iter()
        .map(|o| format!("{} worst={:.2e}/tol={:.0e}", o.name, o.worst, o.tolerance))
        .collect::<Vec<_>>()
        .join("; ");
    if failed.is_empty() {
        (true, detail)
    } else {
        (false, failed.join(" | "))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let seeds = verify::seeds(0, 10);
    let ops = verify::gradcheck_ops(&seeds);
    let model = verify::gradcheck_model(&seeds);
    let elapsed = t.elapsed();
    let op_worst = ops.iter().map(|o| o.worst).fold(0.0, f64::max);
    let mut all = ops;
    all.push(model.clone());
    let (ok, detail) = outcomes_pass(&all);
    let in_time = elapsed < Duration::from_secs(120);
    Verdict {
        id: 1,
        title: "gradients",
        passed: ok && in_time,
        detail: if ok {
            format!(
                "10 seeds, per-op worst rel {op_worst:.2e} (< 1e-5), model worst rel {:.2e} (< 1e-4), {:.1}s (< 120s)",
                model.worst,
                elapsed.as_secs_f64()
            )
        } else {
            detail
        },
    }
}

fn oracles() -> Verdict {
    let all = [verify::fps_oracle(200, 1), verify::knn_oracle(200, 2), verify::chamfer_oracle(200, 3)];
    let (passed, detail) = outcomes_pass(&all);
    Verdict { id: 2, title: "kernel oracles", passed, detail }
}

fn geometry() -> Verdict {
    let (passed, detail) = outcomes_pass(&[verify::geometry_trials(1000, 4)]);
    Verdict { id: 3, title: "geometry invariants", passed, detail }
}

fn vrpe() -> Verdict {
    let (passed, detail) = outcomes_pass(&[verify::vrpe_identities(1000, 5)]);
    Verdict { id: 4, title: "positional encoding", passed, detail }
}

fn overfit() -> Verdict {
    let t = Instant::now();
    let ds = generate_synthetic(&SyntheticSpec {
        clouds_per_class: 2,
        points_per_cloud: 256,
        ..Default::default()
    })
    .expect("dataset");
    let cfg = RunConfig {
        epochs: 500,
        batch: 8,
        warmup_epochs: 0,
        lr: 1e-3,
        min_lr: 1e-3,
        overfit: true,
        ..RunConfig::desk()
    };
    let m = &cfg.model;
    let desk_shape = (m.dim, m.heads, m.enc_blocks, m.dec_blocks, m.n_patches, m.patch_size) == (48, 4, 3, 1, 16, 8);
    let mut tr = Trainer::new(cfg, &ds).expect("trainer");
    let mut losses = Vec::new();
    while !tr.is_done() {
        losses.push(tr.train_step().expect("step").loss_total);
    }
    let elapsed = t.elapsed();
    let ratio = losses[losses.len() - 1] / losses[0];
    Verdict {
        id: 5,
        title: "overfit one batch",
        passed: desk_shape && ds.len() == 8 && losses.len() == 500 && ratio < 0.1 && elapsed < Duration::from_secs(300),
        detail: format!(
            "8 clouds, {} steps: loss {:.5} -> {:.5} = {:.1}% of step 1 (< 10%), {:.0}s (< 300s)",
            losses.len(),
            losses[0],
            losses[losses.len() - 1],
            100.0 * ratio,
            elapsed.as_secs_f64()
        ),
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

/// Pretrains with `cfg` (seed set per run) and returns MlpLinear test accuracy.
fn pretrained_accuracy(cfg: &RunConfig, ds: &Dataset) -> f64 {
    let (model, _) = pretrain(cfg, ds, None).expect("pretrain");
    probe(Protocol::MlpLinear, &model, ds, cfg).expect("probe").accuracy
}

fn dataset(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec { seed, ..Default::default() }).expect("dataset")
}

fn probe_gain(baselines: &mut Vec<f64>) -> Verdict {
    let t = Instant::now();
    let mut gaps = Vec::new();
    let mut rows = Vec::new();
    for seed in SEEDS {
        let ds = dataset(seed);
        let cfg = RunConfig { seed, ..RunConfig::desk() };
        let random = ModelState::init(cfg.model, init_seed(seed)).expect("init");
        let r = probe(Protocol::MlpLinear, &random, &ds, &cfg).expect("probe").accuracy;
        let p = pretrained_accuracy(&cfg, &ds);
        baselines.push(p);
        gaps.push(100.0 * (p - r));
        rows.push(format!("seed {seed}: {:.1} vs {:.1}", 100.0 * p, 100.0 * r));
    }
    let gain = median(gaps);
    let elapsed = t.elapsed();
    Verdict {
        id: 6,
        title: "pretraining gain",
        passed: gain >= 10.0 && elapsed < Duration::from_secs(1800),
        detail: format!(
            "pretrained vs random MlpLinear accuracy [{}], median gain {gain:+.1} pts (>= +10), {:.0}s (< 1800s)",
            rows.join(", "),
            elapsed.as_secs_f64()
        ),
    }
}

fn ablations(baselines: &[f64]) -> Verdict {
    let variants: [(&str, &str, &str); 3] = [
        ("siamese", "false", "siamese >= single"),
        ("crop", "off", "crop >= no-crop"),
        ("vrpe_kind", "none", "sinusoid >= none"),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (key, value, label) in variants {
        let diffs: Vec<f64> = SEEDS
            .iter()
            .zip(baselines)
            .map(|(&seed, &base)| {
                let mut cfg = RunConfig { seed, ..RunConfig::desk() };
                cfg.set(key, value).expect("ablation key");
                100.0 * (base - pretrained_accuracy(&cfg, &dataset(seed)))
            })
            .collect();
        let d = median(diffs.clone());
        let holds = d >= -2.0;
        ok &= holds;
        let per_seed = diffs.iter().map(|x| format!("{x:+.1}")).collect::<Vec<_>>().join(" ");
        parts.push(format!("{label}: median {d:+.1} pts [{per_seed}] {}", if holds { "ok" } else { "REVERSED" }));
    }
    Verdict { id: 7, title: "ablation directions", passed: ok, detail: parts.join("; ") }
}

fn tiny_dataset() -> Dataset {
    generate_synthetic(&SyntheticSpec {
        classes: vec![ShapeClass::Sphere, ShapeClass::Torus],
        clouds_per_class: 4,
        points_per_cloud: 128,
        noise_std: 0.01,
        seed: 7,
    })
    .expect("dataset")
}

fn tiny_config(epochs: usize) -> RunConfig {
    RunConfig {
        epochs,
        warmup_epochs: 1,
        batch: 3,
        seed: 11,
        checkpoint_every: 1,
        ..RunConfig::desk()
    }
}

/// Log rows without the wall-clock column.
fn log_without_seconds(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .expect("log")
        .lines()
        .map(|l| match l.rsplit_once(',') {
            Some((head, _)) if !l.starts_with('#') => head.to_string(),
            _ => l.to_string(),
        })
        .collect()
}

fn directory_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .expect("dir")
        .map(|e| {
            let e = e.expect("entry");
            (e.file_name().into_string().expect("name"), fs::read(e.path()).expect("read"))
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Verdict {
    let ds = tiny_dataset();
    let tmp = tempfile::tempdir().expect("tempdir");
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        pretrain(&tiny_config(3), &ds, Some(d)).expect("pretrain");
    }
    let ckpts = |d: &Path| -> Vec<(String, Vec<u8>)> {
        directory_files(d).into_iter().filter(|(n, _)| n.ends_with(".ckpt")).collect()
    };
    let (ca, cb) = (ckpts(&dirs[0]), ckpts(&dirs[1]));
    let same_ckpt = ca == cb && ca.len() == 4;
    let (la, lb) = (log_without_seconds(&dirs[0].join(LOG_FILE)), log_without_seconds(&dirs[1].join(LOG_FILE)));
    let same_log = la == lb && la.len() > 3;
    Verdict {
        id: 8,
        title: "run determinism",
        passed: same_ckpt && same_log,
        detail: format!(
            "{} checkpoints byte-identical: {same_ckpt}; {} log lines identical (seconds column excluded): {same_log}",
            ca.len(),
            la.len()
        ),
    }
}

fn resume() -> Verdict {
    let ds = tiny_dataset();
    let tmp = tempfile::tempdir().expect("tempdir");
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    pretrain(&tiny_config(4), &ds, Some(&full)).expect("full run");

    let mut tr = Trainer::new(tiny_config(4), &ds).expect("trainer");
    let half = 2 * tr.steps_per_epoch();
    tr.run(Some(half), Some(&part)).expect("first half");
    let mid = tmp.path().join("mid.ckpt");
    tr.save(&mid).expect("save");
    let bytes = fs::read(&mid).expect("read");
    let ck = load_checkpoint(&mid).expect("load");
    let reencoded = pqae::data::encode_checkpoint(&ck.model, &ck.optimizer, ck.step, &ck.meta);
    let round_trip = reencoded == bytes && ck.step == half;

    let mut resumed = Trainer::resume(tiny_config(4), &ds, ck).expect("resume");
    resumed.run(None, Some(&part)).expect("second half");
    let lr = |d: &Path| -> Vec<String> {
        log_without_seconds(&d.join(LOG_FILE))
            .into_iter()
            .filter(|l| !l.starts_with('#') && !l.starts_with("step"))
            .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
            .collect()
    };
    let (lf, lp) = (lr(&full), lr(&part));
    let same_lr = lf == lp && !lf.is_empty();
    let same_final = fs::read(full.join(FINAL_CHECKPOINT)).expect("a") == fs::read(part.join(FINAL_CHECKPOINT)).expect("b");
    Verdict {
        id: 9,
        title: "checkpoint and resume",
        passed: round_trip && same_lr && same_final,
        detail: format!(
            "round trip bit-exact: {round_trip}; resumed lr schedule matches over {} steps: {same_lr}; final checkpoint identical: {same_final}",
            lf.len()
        ),
    }
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: u32| wanted.is_empty() || wanted.contains(&id);
    let mut verdicts = Vec::new();
    let mut report = |v: Verdict| {
        println!("{} [{}] {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.id, v.title, v.detail);
        verdicts.push(v.passed);
    };
    if want(1) {
        report(gradients());
    }
    if want(2) {
        report(oracles());
    }
    if want(3) {
        report(geometry());
    }
    if want(4) {
        report(vrpe());
    }
    if want(5) {
        report(overfit());
    }
    let mut baselines = Vec::new();
    if want(6) || want(7) {
        let v = probe_gain(&mut baselines);
        if want(6) {
            report(v);
        }
    }
    if want(7) {
        report(ablations(&baselines));
    }
    if want(8) {
        report(determinism());
    }
    if want(9) {
        report(resume());
    }
    let failed = verdicts.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
