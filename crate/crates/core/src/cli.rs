//! Command-line front end.
//!
//! Every run-producing command resolves its configuration from three
//! layers (defaults, then an optional config file, then flags), prints the
//! effective configuration, snapshots it into the run directory, and only
//! then executes. Re-running a command from its snapshot reproduces the
//! run bitwise in the same precision mode.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::ckpt;
use crate::datagen::{
    load_manifest, DataSide, DatasetSpec, LabeledSet, PairSet, SceneSpec, SplitCounts,
    TransformSpec,
};
use crate::error::{Error, Result};
use crate::inversion::{self, InversionConfig};
use crate::metrics::{dataset_distance, ReferenceScore, SegScores};
use crate::netpbm;
use crate::nn::{Checkpoint, NetworkConfig};
use crate::optim::SgdConfig;
use crate::tensor::{Scalar, Tensor};
use crate::transfer::{self, FeatureSelection, LossRecord};

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 1 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[derive(Parser)]
#[command(
    name = "featreg",
    version,
    about = "Annotation-free cross-domain adaptation for segmentation networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a paired two-domain shape corpus
    Gen(GenArgs),
    /// Train a network from pixel labels
    TrainSup(TrainSupArgs),
    /// Adapt a teacher to the shifted domain from image pairs alone
    TrainTransfer(TrainTransferArgs),
    /// Score a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Normalized degradation between two (acc, miou) score pairs
    Distance(DistanceArgs),
    /// Rebuild an image whose features match a reference's
    Invert(InvertArgs),
    /// Collect run results into summary tables
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::TrainSup(a) => cmd_train_sup(a),
        Cmd::TrainTransfer(a) => cmd_train_transfer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Distance(a) => cmd_distance(a),
        Cmd::Invert(a) => cmd_invert(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

/// Later layers win; `None` falls through to the next layer.
macro_rules! overlay {
    ($flags:expr, $file:expr; $($f:ident),* $(,)?) => {{
        let mut merged = $flags;
        let file = $file;
        $( if merged.$f.is_none() { merged.$f = file.$f; } )*
        merged
    }};
}

fn require<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::invalid(format!("--{flag} is required (flag or config file)")))
}

fn read_args_file<T: for<'de> Deserialize<'de>>(path: &Path, command: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if let Some(tag) = table.get("command").and_then(|v| v.as_str()) {
        if tag != command {
            return Err(Error::invalid(format!(
                "config {} belongs to `{tag}`, not `{command}`",
                path.display()
            )));
        }
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::format(path, e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Exclusive claim on a run directory, dropped on completion. A leftover
/// lock from a crashed run must be removed by hand.
struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn claim_run_dir(dir: &Path) -> Result<RunLock> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(".lock");
    match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
        Ok(mut f) => {
            let _ = writeln!(f, "{}", std::process::id());
            Ok(RunLock { path })
        }
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::invalid(format!(
            "run directory {} is owned by another process; remove {} if stale",
            dir.display(),
            path.display()
        ))),
        Err(e) => Err(Error::io(&path, e)),
    }
}

fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("iter,lr,loss\n");
    for r in history {
        s.push_str(&format!("{},{:.8e},{:.8e}\n", r.iter, r.lr, r.loss));
    }
    s
}

fn progress(total: u64) -> impl FnMut(&LossRecord) {
    let every = (total / 20).max(1);
    move |r: &LossRecord| {
        if r.iter % every == 0 || r.iter + 1 == total {
            println!("iter {:>6}/{}  lr {:.3e}  loss {:.6e}", r.iter + 1, total, r.lr, r.loss);
        }
    }
}

fn parse_side(s: &str) -> Result<DataSide> {
    match s {
        "d1" => Ok(DataSide::D1),
        "d2" => Ok(DataSide::D2),
        other => Err(Error::invalid(format!("data side must be d1 or d2, got {other:?}"))),
    }
}

fn parse_score_pair(s: &str) -> Result<ReferenceScore> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(Error::invalid(format!("expected ACC,MIOU, got {s:?}")));
    }
    let acc = parts[0]
        .parse::<f64>()
        .map_err(|_| Error::invalid(format!("bad score {:?}", parts[0])))?;
    let miou = parts[1]
        .parse::<f64>()
        .map_err(|_| Error::invalid(format!("bad score {:?}", parts[1])))?;
    ReferenceScore::new(acc, miou)
}

fn image_from_ppm<E: Scalar>(path: &Path) -> Result<Tensor<E>> {
    let (w, h, rgb) = netpbm::read_ppm(path)?;
    let plane = w * h;
    let mut data = vec![E::zero(); 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = E::from_f64(rgb[p * 3 + c] as f64 / 255.0);
        }
    }
    Tensor::new(data, &[1, 3, h, w])
}

fn image_to_ppm<E: Scalar>(t: &Tensor<E>, path: &Path) -> Result<()> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let mut rgb = vec![0u8; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let v = t.data()[c * plane + p].as_f64().clamp(0.0, 1.0);
            rgb[p * 3 + c] = (v * 255.0).round() as u8;
        }
    }
    netpbm::write_ppm(path, w, h, &rgb)
}

/// Written by eval into its run directory; the report command collects
/// these.
#[derive(Debug, Serialize, Deserialize)]
struct RunSummary {
    command: String,
    run_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    role: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ablation: Option<String>,
    transform: String,
    data: String,
    split: String,
    acc: f64,
    miou: f64,
}

// ---------------------------------------------------------------- gen --

#[derive(Args, Debug, Default)]
struct GenArgs {
    /// Manifest to start from (.json or .toml); flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// none | photocopy | ripple | cubism
    #[arg(long)]
    transform: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Canvas size in pixels (square)
    #[arg(long)]
    size: Option<usize>,
    /// Number of classes including background
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    contrast: Option<f64>,
    #[arg(long)]
    grain: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    wavelength: Option<f64>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    max_offset: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
}

fn default_transform(kind: &str) -> Result<TransformSpec> {
    Ok(match kind {
        "none" => TransformSpec::None,
        "photocopy" => TransformSpec::photocopy_default(),
        "ripple" => TransformSpec::ripple_default(),
        "cubism" => TransformSpec::cubism_default(),
        other => {
            return Err(Error::invalid(format!(
                "unknown transform {other:?}; choose none, photocopy, ripple or cubism"
            )))
        }
    })
}

fn apply_transform_flags(t: &mut TransformSpec, a: &GenArgs) -> Result<()> {
    let misfit = |flag: &str, kind: &str| {
        Err(Error::invalid(format!("--{flag} does not apply to the {kind} transform")))
    };
    match t {
        TransformSpec::None => {
            for (set, flag) in [
                (a.contrast.is_some(), "contrast"),
                (a.grain.is_some(), "grain"),
                (a.amplitude.is_some(), "amplitude"),
                (a.wavelength.is_some(), "wavelength"),
                (a.cells.is_some(), "cells"),
                (a.max_offset.is_some(), "max-offset"),
                (a.jitter.is_some(), "jitter"),
            ] {
                if set {
                    return misfit(flag, "none");
                }
            }
        }
        TransformSpec::Photocopy { contrast, grain } => {
            if let Some(v) = a.contrast {
                *contrast = v;
            }
            if let Some(v) = a.grain {
                *grain = v;
            }
            for (set, flag) in [
                (a.amplitude.is_some(), "amplitude"),
                (a.wavelength.is_some(), "wavelength"),
                (a.cells.is_some(), "cells"),
                (a.max_offset.is_some(), "max-offset"),
                (a.jitter.is_some(), "jitter"),
            ] {
                if set {
                    return misfit(flag, "photocopy");
                }
            }
        }
        TransformSpec::Ripple { amplitude, wavelength } => {
            if let Some(v) = a.amplitude {
                *amplitude = v;
            }
            if let Some(v) = a.wavelength {
                *wavelength = v;
            }
            for (set, flag) in [
                (a.contrast.is_some(), "contrast"),
                (a.grain.is_some(), "grain"),
                (a.cells.is_some(), "cells"),
                (a.max_offset.is_some(), "max-offset"),
                (a.jitter.is_some(), "jitter"),
            ] {
                if set {
                    return misfit(flag, "ripple");
                }
            }
        }
        TransformSpec::Cubism { cells, max_offset, jitter } => {
            if let Some(v) = a.cells {
                *cells = v;
            }
            if let Some(v) = a.max_offset {
                *max_offset = v;
            }
            if let Some(v) = a.jitter {
                *jitter = v;
            }
            for (set, flag) in [
                (a.contrast.is_some(), "contrast"),
                (a.grain.is_some(), "grain"),
                (a.amplitude.is_some(), "amplitude"),
                (a.wavelength.is_some(), "wavelength"),
            ] {
                if set {
                    return misfit(flag, "cubism");
                }
            }
        }
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let out = require(a.out.clone(), "out")?;
    let base: DatasetSpec = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
            } else {
                toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
            }
        }
        None => DatasetSpec {
            seed: 0,
            scene: SceneSpec::default(),
            transform: TransformSpec::None,
            counts: SplitCounts::desk_default(),
        },
    };

    let mut transform = match &a.transform {
        Some(kind) if *kind != base.transform.kind_name() => default_transform(kind)?,
        _ => base.transform,
    };
    apply_transform_flags(&mut transform, &a)?;

    let spec = DatasetSpec {
        seed: a.seed.unwrap_or(base.seed),
        scene: SceneSpec {
            size: a.size.unwrap_or(base.scene.size),
            class_count: a.classes.unwrap_or(base.scene.class_count),
            ..base.scene
        },
        transform,
        counts: SplitCounts {
            train: a.train.unwrap_or(base.counts.train),
            val: a.val.unwrap_or(base.counts.val),
            test: a.test.unwrap_or(base.counts.test),
        },
    };
    let manifest = serde_json::to_string_pretty(&spec)
        .map_err(|e| Error::internal(format!("manifest serialization: {e}")))?;
    println!("{manifest}");
    crate::datagen::build_dataset(&out, &spec)?;
    let total = spec.counts.train + spec.counts.val + spec.counts.test;
    println!("wrote {total} scene pairs under {}", out.display());
    Ok(())
}

// ---------------------------------------------------------- train-sup --

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainSupArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which domain to train on: d1 or d2
    #[arg(long)]
    data: Option<String>,
    /// "random" or a checkpoint path to start from
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    power: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    precision: Option<Precision>,
}

#[derive(Serialize, Deserialize)]
struct TrainSupConfig {
    command: String,
    run_id: String,
    precision: Precision,
    dataset: PathBuf,
    out: PathBuf,
    data: String,
    init: String,
    seed: u64,
    iters: u64,
    batch: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    power: f64,
}

impl TrainSupConfig {
    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            base_lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            power: self.power,
            max_iter: self.iters,
            batch_size: self.batch,
        }
    }
}

fn cmd_train_sup(flags: TrainSupArgs) -> Result<()> {
    let a = match &flags.config {
        Some(p) => {
            let file: TrainSupArgs = read_args_file(p, "train-sup")?;
            overlay!(flags, file; dataset, out, data, init, iters, batch, lr, momentum,
                     weight_decay, power, seed, run_id, precision)
        }
        None => flags,
    };
    let d = SgdConfig::supervised_default(3000);
    let seed = a.seed.unwrap_or(0);
    let cfg = TrainSupConfig {
        command: "train-sup".into(),
        run_id: a.run_id.unwrap_or_else(|| format!("train-sup-{seed}")),
        precision: a.precision.unwrap_or(Precision::F32),
        dataset: require(a.dataset, "dataset")?,
        out: require(a.out, "out")?,
        data: a.data.unwrap_or_else(|| "d1".into()),
        init: a.init.unwrap_or_else(|| "random".into()),
        seed,
        iters: a.iters.unwrap_or(d.max_iter),
        batch: a.batch.unwrap_or(d.batch_size),
        lr: a.lr.unwrap_or(d.base_lr),
        momentum: a.momentum.unwrap_or(d.momentum),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        power: a.power.unwrap_or(d.power),
    };
    let snapshot = toml::to_string_pretty(&cfg)
        .map_err(|e| Error::internal(format!("config serialization: {e}")))?;
    print!("{snapshot}");
    let _lock = claim_run_dir(&cfg.out)?;
    write_text(&cfg.out.join("config.toml"), &snapshot)?;
    match cfg.precision {
        Precision::F32 => run_train_sup::<f32>(&cfg),
        Precision::F64 => run_train_sup::<f64>(&cfg),
    }
}

fn run_train_sup<E: Scalar>(cfg: &TrainSupConfig) -> Result<()> {
    let side = parse_side(&cfg.data)?;
    let data = LabeledSet::load(&cfg.dataset, "train", side)?;
    let mut net: Checkpoint<E> = if cfg.init == "random" {
        let manifest = load_manifest(&cfg.dataset)?;
        Checkpoint::init(NetworkConfig::desk_default(manifest.scene.class_count), cfg.seed)?
    } else {
        ckpt::load(Path::new(&cfg.init))?
    };
    let history = transfer::train_supervised(&mut net, &data, &cfg.sgd(), cfg.seed, progress(cfg.iters))?;
    write_text(&cfg.out.join("loss.csv"), &loss_csv(&history))?;
    let ckpt_path = cfg.out.join("ckpt.fbck");
    ckpt::save(&net, &ckpt_path)?;
    println!("saved {}", ckpt_path.display());
    Ok(())
}

// ----------------------------------------------------- train-transfer --

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainTransferArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Frozen teacher checkpoint trained on the source domain
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma list of taps, or a named strategy: w_inc, w_dec
    #[arg(long)]
    taps: Option<String>,
    /// Comma list of per-tap weights; defaults to 1.0 each
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    power: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    precision: Option<Precision>,
}

#[derive(Serialize, Deserialize)]
struct TrainTransferConfig {
    command: String,
    run_id: String,
    precision: Precision,
    dataset: PathBuf,
    teacher: PathBuf,
    out: PathBuf,
    taps: String,
    weights: String,
    seed: u64,
    iters: u64,
    batch: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    power: f64,
}

impl TrainTransferConfig {
    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            base_lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            power: self.power,
            max_iter: self.iters,
            batch_size: self.batch,
        }
    }
}

fn cmd_train_transfer(flags: TrainTransferArgs) -> Result<()> {
    let a = match &flags.config {
        Some(p) => {
            let file: TrainTransferArgs = read_args_file(p, "train-transfer")?;
            overlay!(flags, file; dataset, teacher, out, taps, weights, iters, batch, lr,
                     momentum, weight_decay, power, seed, run_id, precision)
        }
        None => flags,
    };
    let d = SgdConfig::transfer_default(2000);
    let seed = a.seed.unwrap_or(0);
    let taps = a.taps.unwrap_or_else(|| "pool_5".into());
    let weights = match a.weights {
        Some(w) => w,
        None if taps == "w_inc" || taps == "w_dec" => String::new(),
        None => vec!["1.0"; taps.split(',').count()].join(","),
    };
    let cfg = TrainTransferConfig {
        command: "train-transfer".into(),
        run_id: a.run_id.unwrap_or_else(|| format!("train-transfer-{seed}")),
        precision: a.precision.unwrap_or(Precision::F32),
        dataset: require(a.dataset, "dataset")?,
        teacher: require(a.teacher, "teacher")?,
        out: require(a.out, "out")?,
        taps,
        weights,
        seed,
        iters: a.iters.unwrap_or(d.max_iter),
        batch: a.batch.unwrap_or(d.batch_size),
        lr: a.lr.unwrap_or(d.base_lr),
        momentum: a.momentum.unwrap_or(d.momentum),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        power: a.power.unwrap_or(d.power),
    };
    let snapshot = toml::to_string_pretty(&cfg)
        .map_err(|e| Error::internal(format!("config serialization: {e}")))?;
    print!("{snapshot}");
    let _lock = claim_run_dir(&cfg.out)?;
    write_text(&cfg.out.join("config.toml"), &snapshot)?;
    match cfg.precision {
        Precision::F32 => run_train_transfer::<f32>(&cfg),
        Precision::F64 => run_train_transfer::<f64>(&cfg),
    }
}

fn run_train_transfer<E: Scalar>(cfg: &TrainTransferConfig) -> Result<()> {
    let sel = FeatureSelection::parse(&cfg.taps, &cfg.weights)?;
    let teacher: Checkpoint<E> = ckpt::load(&cfg.teacher)?;
    let pairs = PairSet::load(&cfg.dataset, "train")?;
    let (student, history) =
        transfer::train_transfer(&teacher, &pairs, &sel, &cfg.sgd(), cfg.seed, progress(cfg.iters))?;
    write_text(&cfg.out.join("loss.csv"), &loss_csv(&history))?;
    let ckpt_path = cfg.out.join("ckpt.fbck");
    ckpt::save(&student, &ckpt_path)?;
    println!("saved {} (selection {})", ckpt_path.display(), sel.label());
    Ok(())
}

// ---------------------------------------------------------------- eval --

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Which domain to score on: d1 or d2
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Protocol role for the report: b0, b1, b2 or our
    #[arg(long)]
    role: Option<String>,
    /// Ablation row for the report: pool_1..pool_5, w_inc or w_dec
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    precision: Option<Precision>,
}

#[derive(Serialize, Deserialize)]
struct EvalConfig {
    command: String,
    run_id: String,
    precision: Precision,
    ckpt: PathBuf,
    dataset: PathBuf,
    data: String,
    split: String,
    batch: usize,
    out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    role: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ablation: Option<String>,
}

fn cmd_eval(flags: EvalArgs) -> Result<()> {
    let a = match &flags.config {
        Some(p) => {
            let file: EvalArgs = read_args_file(p, "eval")?;
            overlay!(flags, file; ckpt, dataset, data, split, batch, out, role, ablation,
                     run_id, precision)
        }
        None => flags,
    };
    let data = a.data.unwrap_or_else(|| "d2".into());
    let split = a.split.unwrap_or_else(|| "test".into());
    if let Some(role) = &a.role {
        if !["b0", "b1", "b2", "our"].contains(&role.as_str()) {
            return Err(Error::invalid(format!("--role must be b0, b1, b2 or our, got {role:?}")));
        }
    }
    if let Some(ab) = &a.ablation {
        let ok = crate::nn::TAP_NAMES.contains(&ab.as_str()) || ab == "w_inc" || ab == "w_dec";
        if !ok {
            return Err(Error::invalid(format!(
                "--ablation must be pool_1..pool_5, w_inc or w_dec, got {ab:?}"
            )));
        }
    }
    let cfg = EvalConfig {
        command: "eval".into(),
        run_id: a.run_id.unwrap_or_else(|| format!("eval-{data}-{split}")),
        precision: a.precision.unwrap_or(Precision::F32),
        ckpt: require(a.ckpt, "ckpt")?,
        dataset: require(a.dataset, "dataset")?,
        data,
        split,
        batch: a.batch.unwrap_or(8),
        out: require(a.out, "out")?,
        role: a.role,
        ablation: a.ablation,
    };
    let snapshot = toml::to_string_pretty(&cfg)
        .map_err(|e| Error::internal(format!("config serialization: {e}")))?;
    print!("{snapshot}");
    let _lock = claim_run_dir(&cfg.out)?;
    write_text(&cfg.out.join("config.toml"), &snapshot)?;
    match cfg.precision {
        Precision::F32 => run_eval::<f32>(&cfg),
        Precision::F64 => run_eval::<f64>(&cfg),
    }
}

fn run_eval<E: Scalar>(cfg: &EvalConfig) -> Result<()> {
    let net: Checkpoint<E> = ckpt::load(&cfg.ckpt)?;
    let side = parse_side(&cfg.data)?;
    let data = LabeledSet::load(&cfg.dataset, &cfg.split, side)?;
    let (scores, _) = transfer::evaluate(&net, &data, cfg.batch)?;
    let mut csv = SegScores::csv_header(net.config.class_count);
    csv.push('\n');
    csv.push_str(&scores.csv_row(&cfg.run_id, &cfg.split));
    csv.push('\n');
    write_text(&cfg.out.join("scores.csv"), &csv)?;
    let manifest = load_manifest(&cfg.dataset)?;
    let summary = RunSummary {
        command: "eval".into(),
        run_id: cfg.run_id.clone(),
        role: cfg.role.clone(),
        ablation: cfg.ablation.clone(),
        transform: manifest.transform.kind_name().into(),
        data: cfg.data.clone(),
        split: cfg.split.clone(),
        acc: scores.mean_class_acc,
        miou: scores.miou,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::internal(format!("summary serialization: {e}")))?;
    write_text(&cfg.out.join("run.json"), &json)?;
    println!("acc {:.2}  miou {:.2}", scores.mean_class_acc, scores.miou);
    Ok(())
}

// ------------------------------------------------------------ distance --

#[derive(Args, Debug)]
struct DistanceArgs {
    /// Reference scores as ACC,MIOU
    #[arg(long = "ref", value_name = "ACC,MIOU")]
    reference: String,
    /// Scores on the shifted domain as ACC,MIOU
    #[arg(long, value_name = "ACC,MIOU")]
    scores: String,
}

fn cmd_distance(a: DistanceArgs) -> Result<()> {
    let reference = parse_score_pair(&a.reference)?;
    let shifted = parse_score_pair(&a.scores)?;
    let d = dataset_distance(&reference, &shifted)?;
    println!("{d:.2}");
    Ok(())
}

// -------------------------------------------------------------- invert --

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct InvertArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Reference image (binary PPM, sides divisible by 8)
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma list of content taps; empty for none
    #[arg(long)]
    content: Option<String>,
    #[arg(long)]
    content_weights: Option<String>,
    /// Comma list of style taps; empty for none
    #[arg(long)]
    style: Option<String>,
    #[arg(long)]
    style_weights: Option<String>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    precision: Option<Precision>,
}

#[derive(Serialize, Deserialize)]
struct InvertConfig {
    command: String,
    run_id: String,
    precision: Precision,
    ckpt: PathBuf,
    image: PathBuf,
    out: PathBuf,
    content: String,
    content_weights: String,
    style: String,
    style_weights: String,
    iters: u64,
    step: f64,
    seed: u64,
}

fn parse_terms(taps: &str, weights: &str, kind: &str) -> Result<Vec<(String, f64)>> {
    if taps.trim().is_empty() {
        if !weights.trim().is_empty() {
            return Err(Error::invalid(format!("{kind} weights given without taps")));
        }
        return Ok(vec![]);
    }
    let names: Vec<&str> = taps.split(',').map(str::trim).collect();
    let ws: Vec<f64> = weights
        .split(',')
        .map(str::trim)
        .map(|s| s.parse::<f64>().map_err(|_| Error::invalid(format!("bad {kind} weight {s:?}"))))
        .collect::<Result<_>>()?;
    if names.len() != ws.len() {
        return Err(Error::invalid(format!(
            "{} {kind} taps but {} weights",
            names.len(),
            ws.len()
        )));
    }
    Ok(names.into_iter().map(str::to_string).zip(ws).collect())
}

fn cmd_invert(flags: InvertArgs) -> Result<()> {
    let a = match &flags.config {
        Some(p) => {
            let file: InvertArgs = read_args_file(p, "invert")?;
            overlay!(flags, file; ckpt, image, out, content, content_weights, style,
                     style_weights, iters, step, seed, run_id, precision)
        }
        None => flags,
    };
    let seed = a.seed.unwrap_or(0);
    let content = a.content.unwrap_or_else(|| "pool_5".into());
    let content_weights = match a.content_weights {
        Some(w) => w,
        None if content.trim().is_empty() => String::new(),
        None => vec!["1.0"; content.split(',').count()].join(","),
    };
    let style = a.style.unwrap_or_else(|| "pool_1,pool_2,pool_3".into());
    let style_weights = match a.style_weights {
        Some(w) => w,
        None if style.trim().is_empty() => String::new(),
        None => vec!["1.0"; style.split(',').count()].join(","),
    };
    let cfg = InvertConfig {
        command: "invert".into(),
        run_id: a.run_id.unwrap_or_else(|| format!("invert-{seed}")),
        precision: a.precision.unwrap_or(Precision::F32),
        ckpt: require(a.ckpt, "ckpt")?,
        image: require(a.image, "image")?,
        out: require(a.out, "out")?,
        content,
        content_weights,
        style,
        style_weights,
        iters: a.iters.unwrap_or(2000),
        step: a.step.unwrap_or(1.0),
        seed,
    };
    let snapshot = toml::to_string_pretty(&cfg)
        .map_err(|e| Error::internal(format!("config serialization: {e}")))?;
    print!("{snapshot}");
    let _lock = claim_run_dir(&cfg.out)?;
    write_text(&cfg.out.join("config.toml"), &snapshot)?;
    match cfg.precision {
        Precision::F32 => run_invert::<f32>(&cfg),
        Precision::F64 => run_invert::<f64>(&cfg),
    }
}

fn run_invert<E: Scalar>(cfg: &InvertConfig) -> Result<()> {
    let net: Checkpoint<E> = ckpt::load(&cfg.ckpt)?;
    let reference = image_from_ppm::<E>(&cfg.image)?;
    let icfg = InversionConfig {
        content: parse_terms(&cfg.content, &cfg.content_weights, "content")?,
        style: parse_terms(&cfg.style, &cfg.style_weights, "style")?,
        iterations: cfg.iters,
        step: cfg.step,
        seed: cfg.seed,
    };
    let (content_norms, style_norms) = inversion::term_normalizers(&net, &reference, &icfg)?;
    let term = |((tap, w), (_, norm)): (&(String, f64), &(String, f64))| {
        serde_json::json!({"tap": tap, "weight": w, "normalization": norm})
    };
    let meta = serde_json::json!({
        "run_id": cfg.run_id,
        "command": cfg.command,
        "content_terms": icfg.content.iter().zip(&content_norms).map(term).collect::<Vec<_>>(),
        "style_terms": icfg.style.iter().zip(&style_norms).map(term).collect::<Vec<_>>(),
    });
    let meta_text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::internal(format!("metadata serialization: {e}")))?;
    write_text(&cfg.out.join("metadata.json"), &meta_text)?;
    let (image, history) = inversion::invert(&net, &reference, &icfg, progress(cfg.iters))?;
    write_text(&cfg.out.join("loss.csv"), &loss_csv(&history))?;
    let out_img = cfg.out.join("output.ppm");
    image_to_ppm(&image, &out_img)?;
    println!("wrote {}", out_img.display());
    Ok(())
}

// -------------------------------------------------------------- report --

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory whose immediate subdirectories are runs
    #[arg(long)]
    runs: PathBuf,
    /// Where to write the tables (defaults to the runs directory)
    #[arg(long)]
    out: Option<PathBuf>,
}

const MISSING_CELL: &str = "—";

fn table(
    title: &str,
    rows: &[(&str, &str)],
    columns: &[String],
    cell: impl Fn(&str, &str) -> Option<String>,
) -> (String, String) {
    let mut md = format!("## {title}\n\n|   |");
    for c in columns {
        md.push_str(&format!(" {c} |"));
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(columns.len()));
    md.push('\n');
    let mut csv = String::from("row");
    for c in columns {
        csv.push(',');
        csv.push_str(c);
    }
    csv.push('\n');
    for (key, label) in rows {
        md.push_str(&format!("| {label} |"));
        csv.push_str(label);
        for c in columns {
            let v = cell(key, c).unwrap_or_else(|| MISSING_CELL.to_string());
            md.push_str(&format!(" {v} |"));
            csv.push(',');
            csv.push_str(&v);
        }
        md.push('\n');
        csv.push('\n');
    }
    (md, csv)
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| a.runs.clone());
    let mut dirs: Vec<PathBuf> = fs::read_dir(&a.runs)
        .map_err(|e| Error::io(&a.runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut summaries: Vec<RunSummary> = Vec::new();
    for dir in dirs {
        let path = dir.join("run.json");
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let s: RunSummary =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        summaries.push(s);
    }
    if summaries.is_empty() {
        return Err(Error::invalid(format!(
            "no completed runs with scores under {}",
            a.runs.display()
        )));
    }

    let known = ["photocopy", "ripple", "cubism", "none"];
    let mut columns: Vec<String> = known
        .iter()
        .filter(|k| summaries.iter().any(|s| s.transform == **k))
        .map(|s| s.to_string())
        .collect();
    let mut extra: Vec<String> = summaries
        .iter()
        .map(|s| s.transform.clone())
        .filter(|t| !known.contains(&t.as_str()))
        .collect();
    extra.sort();
    extra.dedup();
    columns.extend(extra);

    let fmt = |s: &RunSummary| format!("{:.2}-{:.2}", s.acc, s.miou);
    let baseline_rows = [("b0", "B0"), ("b1", "B1"), ("b2", "B2"), ("our", "Our")];
    let (md1, csv1) = table("Baselines", &baseline_rows, &columns, |role, transform| {
        summaries
            .iter()
            .filter(|s| s.role.as_deref() == Some(role) && s.transform == transform)
            .next_back()
            .map(fmt)
    });
    let ablation_rows = [
        ("pool_1", "pool_1"),
        ("pool_2", "pool_2"),
        ("pool_3", "pool_3"),
        ("pool_4", "pool_4"),
        ("pool_5", "pool_5"),
        ("w_inc", "W_inc"),
        ("w_dec", "W_dec"),
    ];
    let (md2, csv2) = table("Per-tap ablation", &ablation_rows, &columns, |tap, transform| {
        summaries
            .iter()
            .filter(|s| s.ablation.as_deref() == Some(tap) && s.transform == transform)
            .next_back()
            .map(fmt)
    });

    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let md = format!("{md1}\n{md2}");
    write_text(&out.join("report.md"), &md)?;
    write_text(&out.join("baselines.csv"), &csv1)?;
    write_text(&out.join("ablation.csv"), &csv2)?;
    print!("{md}");
    println!("wrote report.md, baselines.csv, ablation.csv under {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_pair_parsing() {
        let p = parse_score_pair("79.92,69.22").unwrap();
        assert_eq!((p.acc, p.miou), (79.92, 69.22));
        assert!(parse_score_pair("79.92").is_err());
        assert!(parse_score_pair("a,b").is_err());
        assert!(parse_score_pair("120,50").is_err());
    }

    #[test]
    fn transform_flag_guard() {
        let mut t = TransformSpec::ripple_default();
        let args = GenArgs { contrast: Some(2.0), ..GenArgs::default() };
        assert!(apply_transform_flags(&mut t, &args).is_err());
        let args = GenArgs { amplitude: Some(1.0), ..GenArgs::default() };
        apply_transform_flags(&mut t, &args).unwrap();
        assert_eq!(t, TransformSpec::Ripple { amplitude: 1.0, wavelength: 16.0 });
    }

    #[test]
    fn dataset_spec_round_trips_through_toml() {
        let spec = DatasetSpec {
            seed: 3,
            scene: SceneSpec::default(),
            transform: TransformSpec::cubism_default(),
            counts: SplitCounts { train: 4, val: 2, test: 2 },
        };
        let text = toml::to_string_pretty(&spec).unwrap();
        let back: DatasetSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn run_lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = claim_run_dir(dir.path()).unwrap();
        assert!(claim_run_dir(dir.path()).is_err());
        drop(lock);
        let again = claim_run_dir(dir.path()).unwrap();
        drop(again);
    }

    #[test]
    fn terms_parsing() {
        assert_eq!(parse_terms("", "", "content").unwrap(), vec![]);
        assert_eq!(
            parse_terms("pool_1,pool_2", "1,0.5", "style").unwrap(),
            vec![("pool_1".to_string(), 1.0), ("pool_2".to_string(), 0.5)]
        );
        assert!(parse_terms("pool_1", "1,2", "content").is_err());
        assert!(parse_terms("", "1.0", "style").is_err());
    }
}
