use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 8] = [
    "gen-data",
    "pretrain",
    "reconstruct",
    "embed",
    "probe",
    "ablate",
    "gradcheck",
    "selftest",
];

fn pqae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pqae"))
        .args(args)
        .output()
        .expect("spawn pqae")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 12] = [
    "--set", "epochs=2", "--set", "warmup_epochs=1", "--set", "batch=3", "--set", "D=12", "--set", "heads=2",
    "--set", "enc_blocks=1",
];

fn gen_tiny(dir: &Path, seed: &str) {
    let o = pqae(&[
        "gen-data",
        "--set",
        "classes=sphere,cube",
        "--set",
        "clouds_per_class=3",
        "--set",
        "points_per_cloud=96",
        "--seed",
        seed,
        "--out",
        path(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn pretrain_tiny(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pretrain", "--data", path(data), "--out", path(out)];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    pqae(&args)
}

#[test]
fn help_documents_every_subcommand() {
    let top = pqae(&["--help"]);
    assert_eq!(code(&top), 0);
    for sub in SUBCOMMANDS {
        assert!(stdout(&top).contains(sub), "top-level help lacks {sub}");
        let o = pqae(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub} --help");
        let text = stdout(&o);
        assert!(text.contains("Usage: pqae"), "{sub}");
        assert!(text.contains("--seed"), "{sub} help lacks --seed");
    }
    let r = stdout(&pqae(&["reconstruct", "--help"]));
    assert!(r.contains("[default: 0.6]"));
    let p = stdout(&pqae(&["pretrain", "--help"]));
    assert!(p.contains("r_min = 0.6") && p.contains("epochs = 30"));
}

#[test]
fn unknown_flags_are_user_errors_with_usage() {
    for args in [
        &["--frobnicate"][..],
        &["selftest", "--frobnicate"],
        &["pretrain", "--data", "d", "--out", "o", "--nope", "1"],
        &["nonexistent-command"],
    ] {
        let o = pqae(args);
        assert_eq!(code(&o), 1, "{args:?}");
        assert!(stderr(&o).contains("Usage:"), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn missing_files_are_user_errors() {
    let o = pqae(&["embed", "--ckpt", "/nonexistent/x.ckpt", "--data", "/nonexistent", "--out", "f.csv"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn crop_ratio_above_one_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "0");
    let o = pretrain_tiny(&data, &tmp.path().join("run"), &["--set", "r_min=1.5"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("r_min"), "{}", stderr(&o));

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "r_min = 1.5\n").unwrap();
    let o = pqae(&["pretrain", "--config", path(&cfg), "--data", path(&data), "--out", "unused"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("r_min"));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "0");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "epochs = 1\nr_min = 1.5\n").unwrap();
    let out = tmp.path().join("run");
    let mut args = vec!["pretrain", "--config", path(&cfg), "--data", path(&data), "--out", path(&out)];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(&["--set", "r_min=0.7"]);
    let o = pqae(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.contains("r_min = 0.7"), "{log}");
    assert!(log.contains("epochs = 2"));
}

#[test]
fn pipeline_reconstruct_embed_probe() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "3");
    let run = tmp.path().join("run");
    let o = pretrain_tiny(&data, &run, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists());

    let rec = tmp.path().join("rec");
    let input = data.join("cloud_00000.xyz");
    let o = pqae(&[
        "reconstruct", "--ckpt", path(&ckpt), "--input", path(&input), "--r1", "0.6", "--r2", "0.6", "--out",
        path(&rec),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(&rec)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".ply")).count(), 4);
    assert_eq!(names.len(), 5, "{names:?}");
    let metrics = fs::read_to_string(rec.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("r1,r2,"));

    let o = pqae(&["reconstruct", "--ckpt", path(&ckpt), "--input", path(&input), "--r1", "0", "--out", path(&rec)]);
    assert_eq!(code(&o), 1);

    let feats = tmp.path().join("features.csv");
    let o = pqae(&["embed", "--ckpt", path(&ckpt), "--data", path(&data), "--out", path(&feats)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(&feats).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0].split(',').count(), 2 + 2 * 12);

    for extra in [&[][..], &["--random-init"]] {
        let mut args = vec!["probe", "--ckpt", path(&ckpt), "--data", path(&data), "--protocol", "mlp-linear"];
        args.extend_from_slice(&["--set", "probe_epochs=3"]);
        args.extend_from_slice(extra);
        let o = pqae(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("accuracy"));
    }
    let o = pqae(&["probe", "--ckpt", path(&ckpt), "--data", path(&data), "--protocol", "knn"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn same_seed_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2, d3) = (tmp.path().join("d1"), tmp.path().join("d2"), tmp.path().join("d3"));
    gen_tiny(&d1, "5");
    gen_tiny(&d2, "5");
    gen_tiny(&d3, "6");
    let a = fs::read(d1.join("cloud_00000.xyz")).unwrap();
    assert_eq!(a, fs::read(d2.join("cloud_00000.xyz")).unwrap());
    assert_ne!(a, fs::read(d3.join("cloud_00000.xyz")).unwrap());

    let runs: Vec<_> = ["11", "11", "12"]
        .iter()
        .enumerate()
        .map(|(i, seed)| {
            let out = tmp.path().join(format!("r{i}"));
            let o = pretrain_tiny(&d1, &out, &["--seed", seed]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            fs::read(out.join("final.ckpt")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_ne!(runs[0], runs[2]);
}

#[test]
fn resume_continues_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "0");
    let full = tmp.path().join("full");
    assert_eq!(code(&pretrain_tiny(&data, &full, &[])), 0);
    let part = tmp.path().join("part");
    assert_eq!(code(&pretrain_tiny(&data, &part, &["--set", "epochs=1"])), 0);
    let ck = part.join("final.ckpt");
    let o = pqae(&["pretrain", "--resume", path(&ck), "--set", "epochs=2", "--data", path(&data), "--out", path(&part)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(full.join("final.ckpt")).unwrap(), fs::read(ck).unwrap());
}

#[test]
fn ablate_prints_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "0");
    let table = tmp.path().join("ablation.csv");
    let mut args = vec!["ablate", "--axis", "loss_kind", "--values", "cd_l2,cos", "--data", path(&data)];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(&["--set", "probe_epochs=2", "--out", path(&table)]);
    let o = pqae(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(&table).unwrap();
    assert_eq!(csv, stdout(&o));
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("cos,"));
    let o = pqae(&["ablate", "--axis", "colour", "--data", path(&data)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn verification_commands_pass() {
    let o = pqae(&["selftest", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.starts_with("PASS ")).count() >= 25);
    assert!(!out.contains("FAIL "));
    let o = pqae(&["gradcheck", "--seeds", "2", "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("grad/model"));
    assert_eq!(code(&pqae(&["gradcheck", "--seeds", "0"])), 1);
}
