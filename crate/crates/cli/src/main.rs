//! `pqae`: data generation, pretraining, reconstruction export, probing,
//! ablations and the verification suites.
//!
//! Exit status is 0 on success, 1 for user errors (bad flags, files or
//! settings) and 2 for internal failures (diverged training, failed
//! verification, panics).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pqae::data::{
    generate_synthetic, load_checkpoint, parse_kv, read_xyz, Dataset, RunConfig, SyntheticSpec,
};
use pqae::model::{extract_feature, ModelState};
use pqae::trainer::{
    ablation_csv, checkpoint_config, init_seed, probe, reconstruct_pair, run_ablation, AblationAxis, Protocol,
    TrainError, Trainer, FINAL_CHECKPOINT, LOG_FILE,
};
use pqae::verify::{self, Outcome};

#[derive(Parser)]
#[command(name = "pqae", version, about = "Positional-query cross-reconstruction pretraining for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic shape dataset.
    GenData(GenData),
    /// Pretrain the autoencoder by cross-view reconstruction.
    Pretrain(Pretrain),
    /// Cut two views of a cloud, reconstruct each from the other, export PLY.
    Reconstruct(Reconstruct),
    /// Write one encoder feature vector per cloud to CSV.
    Embed(Embed),
    /// Train a classifier on encoder features and report test accuracy.
    Probe(ProbeCmd),
    /// Pretrain and probe once per value of one configuration axis.
    Ablate(Ablate),
    /// Finite-difference gradient suite (every op and the end-to-end model).
    Gradcheck(Gradcheck),
    /// Run every oracle, invariant and gradient suite.
    Selftest(Selftest),
}

#[derive(Args)]
struct Overrides {
    /// Run config file of `key = value` lines (built-in desk defaults when absent).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenData {
    /// Dataset spec file of `key = value` lines (classes, clouds_per_class,
    /// points_per_cloud, noise_std, seed); defaults: sphere,cube,cylinder,torus
    /// x 100 clouds x 256 points, noise 0.01.
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
    /// Override one spec key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Generator seed; overrides the spec's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (cloud_NNNNN.xyz files plus labels.csv).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
#[command(after_help = config_help())]
struct Pretrain {
    #[command(flatten)]
    overrides: Overrides,
    /// Dataset directory written by gen-data.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory for train_log.csv and checkpoints.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Continue from a checkpoint; its stored config is the base that
    /// --config and --set modify.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Reconstruct {
    /// Pretrained checkpoint.
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    /// Input cloud in XYZ format.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Crop ratio of view 1.
    #[arg(long, default_value_t = 0.6)]
    r1: f64,
    /// Crop ratio of view 2.
    #[arg(long, default_value_t = 0.6)]
    r2: f64,
    /// Seed for crop centers, rotations and patch sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (view1.ply, view2.ply, recon_2to1.ply, recon_1to2.ply, metrics.csv).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct Embed {
    /// Pretrained checkpoint.
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output CSV: index,label,f0,f1,...
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Accepted like on every command; extraction itself draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
#[command(after_help = config_help())]
struct ProbeCmd {
    /// Checkpoint providing the encoder and the base run config.
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Evaluation protocol: full, mlp-linear or mlp-3.
    #[arg(long, default_value = "mlp-linear")]
    protocol: String,
    /// Probe a freshly initialized encoder of the same architecture instead.
    #[arg(long)]
    random_init: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
#[command(after_help = config_help())]
struct Ablate {
    /// Axis: vrpe_kind, augmentation, crop, loss_kind, siamese or r_min.
    #[arg(long)]
    axis: String,
    /// Comma-separated values (default: every value of the axis).
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[command(flatten)]
    overrides: Overrides,
    /// Dataset directory written by gen-data.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Probe protocol used for every row.
    #[arg(long, default_value = "mlp-linear")]
    protocol: String,
    /// Also write the table to this CSV file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    /// Number of seeds.
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Selftest {
    /// Base seed for every suite.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure that is not the user's fault.
#[derive(Debug)]
struct Internal(String);

impl fmt::Display for Internal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Internal {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let internal = err.chain().any(|e| {
        e.downcast_ref::<Internal>().is_some() || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. }))
    });
    if internal {
        2
    } else {
        1
    }
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for e in err.chain() {
        let msg = e.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

/// Help epilogue listing every config key with its built-in default.
fn config_help() -> String {
    let mut s = String::from("Config keys (--config file or --set) and built-in defaults:\n");
    for line in RunConfig::desk().to_text().lines() {
        s.push_str("  ");
        s.push_str(line);
        s.push('\n');
    }
    s.push_str("  (`preset = paper` switches to the full-size configuration)");
    s
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .with_context(|| format!("--set {s:?}: expected KEY=VALUE"))
}

/// Built-in defaults (or a checkpoint's config), then the config file, then
/// each `--set`, then `--seed`. A file replaces the defaults wholesale; on top
/// of a checkpoint config only the keys it names are applied.
fn resolve(base: Option<RunConfig>, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = base.clone().unwrap_or_else(RunConfig::desk);
    if let Some(path) = &o.config {
        let text = read(path)?;
        let ctx = || format!("config {}", path.display());
        if base.is_some() {
            for (_, k, v) in parse_kv(&text).with_context(ctx)? {
                cfg.set(&k, &v).map_err(anyhow::Error::msg).with_context(ctx)?;
            }
        } else {
            cfg = RunConfig::parse(&text).with_context(ctx)?;
        }
    }
    for s in &o.set {
        let (k, v) = split_kv(s)?;
        cfg.set(k, v).map_err(anyhow::Error::msg).with_context(|| format!("--set {s}"))?;
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn gen_data(a: &GenData) -> Result<()> {
    let mut text = match &a.spec {
        Some(p) => read(p)?,
        None => String::new(),
    };
    for s in &a.set {
        let (k, v) = split_kv(s)?;
        text.push_str(&format!("\n{k} = {v}"));
    }
    let mut spec = SyntheticSpec::parse(&text)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let ds = generate_synthetic(&spec)?;
    ds.save(&a.out)?;
    println!(
        "wrote {} clouds ({} classes) to {}",
        ds.len(),
        ds.num_classes(),
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: &Pretrain) -> Result<()> {
    let ds = load_data(&a.data)?;
    let resumed = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let base = match &resumed {
        Some(ck) => Some(checkpoint_config(ck)?),
        None => None,
    };
    let cfg = resolve(base, &a.overrides)?;
    let mut t = match resumed {
        Some(ck) => Trainer::resume(cfg, &ds, ck)?,
        None => Trainer::new(cfg, &ds)?,
    };
    let spe = t.steps_per_epoch();
    let epochs = t.config.epochs;
    while !t.is_done() {
        let epoch = t.step / spe;
        t.run(Some((epoch + 1) * spe), Some(&a.out))?;
        let mean = t.log.epoch_mean(epoch).unwrap_or(f64::NAN);
        eprintln!("epoch {:>4}/{epochs}  loss {mean:.6}  lr {:.3e}", epoch + 1, t.schedule.at(t.step - 1));
    }
    println!(
        "wrote {} and {} to {}",
        LOG_FILE,
        FINAL_CHECKPOINT,
        a.out.display()
    );
    Ok(())
}

fn reconstruct(a: &Reconstruct) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let cfg = checkpoint_config(&ck)?;
    let cloud = read_xyz(&a.input)?;
    let r = reconstruct_pair(&ck.model, &cloud, a.r1, a.r2, a.seed, &cfg.view, &a.out)?;
    println!(
        "chamfer_1to2 {:.6}  chamfer_2to1 {:.6}  -> {}",
        r.chamfer_1to2,
        r.chamfer_2to1,
        a.out.display()
    );
    Ok(())
}

fn embed(a: &Embed) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let ds = load_data(&a.data)?;
    let mut out = String::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let f = extract_feature(&s.cloud, &ck.model)?;
        if i == 0 {
            out.push_str("index,label");
            (0..f.len()).for_each(|j| out.push_str(&format!(",f{j}")));
            out.push('\n');
        }
        out.push_str(&format!("{i},{}", s.label));
        f.iter().for_each(|v| out.push_str(&format!(",{v:?}")));
        out.push('\n');
    }
    fs::write(&a.out, out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} feature rows to {}", ds.len(), a.out.display());
    Ok(())
}

fn probe_cmd(a: &ProbeCmd) -> Result<()> {
    let protocol: Protocol = a.protocol.parse()?;
    let ck = load_checkpoint(&a.ckpt)?;
    let cfg = resolve(Some(checkpoint_config(&ck)?), &a.overrides)?;
    let ds = load_data(&a.data)?;
    let model = if a.random_init {
        ModelState::init(ck.model.config, init_seed(cfg.seed))?
    } else {
        ck.model
    };
    let r = probe(protocol, &model, &ds, &cfg)?;
    println!(
        "{protocol} accuracy {:.4} (train {}, test {}, {} epochs)",
        r.accuracy, r.train_size, r.test_size, r.epochs
    );
    for (c, acc) in r.per_class.iter().enumerate() {
        let name = ds.class_names.get(c).map_or("?", String::as_str);
        println!("  class {c} {name}: {acc:.4}");
    }
    Ok(())
}

fn ablate(a: &Ablate) -> Result<()> {
    let axis: AblationAxis = a.axis.parse()?;
    let protocol: Protocol = a.protocol.parse()?;
    let base = resolve(None, &a.overrides)?;
    let ds = load_data(&a.data)?;
    let values = if a.values.is_empty() {
        axis.default_values()
    } else {
        a.values.clone()
    };
    let rows = run_ablation(axis, &values, &base, &ds, protocol)?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    if let Some(path) = &a.out {
        fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn report(outcomes: &[Outcome]) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    for o in outcomes {
        writeln!(stdout, "{o}")?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    writeln!(stdout, "{} suites, {failed} failed", outcomes.len())?;
    if failed > 0 {
        return Err(Internal(format!("{failed} verification suite(s) failed")).into());
    }
    Ok(())
}

fn gradcheck(a: &Gradcheck) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let seeds = verify::seeds(a.seed, a.seeds);
    let mut outcomes = verify::gradcheck_ops(&seeds);
    outcomes.push(verify::gradcheck_model(&seeds));
    report(&outcomes)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Embed(a) => embed(a),
        Command::Probe(a) => probe_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Selftest(a) => report(&verify::selftest(a.seed)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(2),
    }
}
