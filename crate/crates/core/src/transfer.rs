//! Teacher training, annotation-free student adaptation, and the baseline
//! protocol around them.
//!
//! The adaptation step regresses the student's pooled feature maps onto a
//! frozen teacher's over content-aligned image pairs. The teacher forward
//! runs on plain tensors (no tape), so it contributes no gradient and
//! cannot drift. Student layers deeper than the deepest selected tap are
//! frozen and never even executed.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{child_seed, DataSide, LabeledSet, PairSet};
use crate::error::{Error, Result};
use crate::kernels::argmax_channels;
use crate::metrics::{ConfusionMatrix, SegScores};
use crate::nn::{run_net, Checkpoint, FeatureTaps, NetSpan, TAP_NAMES};
use crate::optim::{poly_lr, Sgd, SgdConfig};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// Per-tap weights rising with depth; the reverse ordering is `W_DEC`.
pub const W_INC: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 0.9];

/// Which feature taps feed the regression loss, with their weights.
/// Entries keep insertion order, names are unique, weights positive.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSelection {
    entries: Vec<(String, f64)>,
}

impl FeatureSelection {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("feature selection needs at least one tap"));
        }
        for (name, weight) in &entries {
            if !TAP_NAMES.contains(&name.as_str()) {
                return Err(Error::invalid(format!(
                    "unknown tap {name:?}; taps are {}",
                    TAP_NAMES.join(", ")
                )));
            }
            if !(*weight > 0.0) {
                return Err(Error::invalid(format!("tap {name} has non-positive weight {weight}")));
            }
            if entries.iter().filter(|(n, _)| n == name).count() > 1 {
                return Err(Error::invalid(format!("tap {name} selected twice")));
            }
        }
        Ok(FeatureSelection { entries })
    }

    pub fn single(tap: &str, weight: f64) -> Result<Self> {
        FeatureSelection::new(vec![(tap.to_string(), weight)])
    }

    /// All five taps, weights rising with depth.
    pub fn increasing() -> Self {
        let entries = TAP_NAMES.iter().zip(W_INC).map(|(n, w)| (n.to_string(), w)).collect();
        FeatureSelection { entries }
    }

    /// All five taps, weights falling with depth.
    pub fn decreasing() -> Self {
        let entries =
            TAP_NAMES.iter().zip(W_INC.iter().rev()).map(|(n, &w)| (n.to_string(), w)).collect();
        FeatureSelection { entries }
    }

    /// Parses CLI-style selections: either a named strategy (`w_inc`,
    /// `w_dec`) with no weights, or a comma list of taps plus a matching
    /// comma list of weights.
    pub fn parse(taps: &str, weights: &str) -> Result<Self> {
        match taps {
            "w_inc" | "w_dec" => {
                if !weights.is_empty() {
                    return Err(Error::invalid(format!(
                        "{taps} fixes its own weights; drop the explicit weight list"
                    )));
                }
                Ok(if taps == "w_inc" {
                    FeatureSelection::increasing()
                } else {
                    FeatureSelection::decreasing()
                })
            }
            _ => {
                let names: Vec<&str> = taps.split(',').map(str::trim).collect();
                let ws: Vec<f64> = weights
                    .split(',')
                    .map(str::trim)
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| Error::invalid(format!("bad weight {s:?}")))
                    })
                    .collect::<Result<_>>()?;
                if names.len() != ws.len() {
                    return Err(Error::invalid(format!(
                        "{} taps but {} weights",
                        names.len(),
                        ws.len()
                    )));
                }
                FeatureSelection::new(
                    names.into_iter().map(str::to_string).zip(ws).collect(),
                )
            }
        }
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    /// 1-based index of the deepest selected tap; gradients stop there.
    pub fn deepest_block(&self) -> usize {
        self.entries
            .iter()
            .map(|(n, _)| TAP_NAMES.iter().position(|t| t == n).expect("validated") + 1)
            .max()
            .expect("non-empty")
    }

    pub fn label(&self) -> String {
        self.entries
            .iter()
            .map(|(n, w)| format!("{n}:{w}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// One optimizer iteration as recorded in loss history CSVs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn check_finite(iter: u64, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged { iter, loss });
    }
    Ok(())
}

/// Pixel-wise cross-entropy training. Used for the teacher on the source
/// domain and for the labeled baselines on the shifted domain.
pub fn train_supervised<E: Scalar>(
    ckpt: &mut Checkpoint<E>,
    data: &LabeledSet,
    cfg: &SgdConfig,
    seed: u64,
    mut on_iter: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if data.class_count() != ckpt.config.class_count {
        return Err(Error::invalid(format!(
            "network predicts {} classes, dataset has {}",
            ckpt.config.class_count,
            data.class_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd = Sgd::new(cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.max_iter as usize);
    for iter in 0..cfg.max_iter {
        let indices = sample_indices(&mut rng, data.len(), cfg.batch_size);
        let (x, y) = data.batch::<E>(&indices)?;
        let mut tape = Tape::new();
        let handles = ckpt.watched_handles(&mut tape, |_| true);
        let out = run_net(&mut tape, &ckpt.config, &handles, &x, NetSpan::Full)?;
        let logits = out.logits.expect("full span produces logits");
        let loss = tape.cross_entropy(&logits, &y)?;
        let loss_val = loss.item()?.as_f64();
        check_finite(iter, loss_val)?;
        let mut grads = tape.backward(&loss)?;
        sgd.step(ckpt, iter, |name| handles.get(name).and_then(|t| grads.take(t)))?;
        let rec = LossRecord { iter, lr: poly_lr(cfg, iter)?, loss: loss_val };
        on_iter(&rec);
        history.push(rec);
    }
    ckpt.iterations += cfg.max_iter;
    Ok(history)
}

/// Weighted sum of squared tap differences: Σ_l w_l·‖F¹_l − F²_l‖².
/// Squared norms are plain sums over elements, not means; the weights
/// carry any scale. Only the student side may be tape-tracked.
pub fn feature_regression_loss<E: Scalar>(
    tape: &mut Tape<E>,
    teacher_taps: &FeatureTaps<E>,
    student_taps: &FeatureTaps<E>,
    sel: &FeatureSelection,
) -> Result<Tensor<E>> {
    let mut total: Option<Tensor<E>> = None;
    for (name, weight) in sel.entries() {
        let t = teacher_taps
            .get(name)
            .ok_or_else(|| Error::invalid(format!("teacher features missing tap {name}")))?;
        let s = student_taps
            .get(name)
            .ok_or_else(|| Error::invalid(format!("student features missing tap {name}")))?;
        if t.shape() != s.shape() {
            return Err(Error::invalid(format!(
                "tap {name}: teacher shape {:?} vs student shape {:?}",
                t.shape(),
                s.shape()
            )));
        }
        let diff = tape.sub(s, t)?;
        let sq = tape.sum_sq(&diff);
        let weighted = tape.scale(&sq, E::from_f64(*weight));
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(&acc, &weighted)?,
        });
    }
    total.ok_or_else(|| Error::invalid("feature selection is empty"))
}

fn deeper_than_block(name: &str, block: usize) -> bool {
    if name.starts_with("head.") {
        return true;
    }
    name.strip_prefix("block")
        .and_then(|rest| rest.split('.').next())
        .and_then(|d| d.parse::<usize>().ok())
        .map(|b| b > block)
        .unwrap_or(false)
}

/// Adapts a copy of the teacher to the shifted domain using image pairs
/// alone. Ground truth never enters: `PairSet` cannot read label files.
pub fn train_transfer<E: Scalar>(
    teacher: &Checkpoint<E>,
    pairs: &PairSet,
    sel: &FeatureSelection,
    cfg: &SgdConfig,
    seed: u64,
    mut on_iter: impl FnMut(&LossRecord),
) -> Result<(Checkpoint<E>, Vec<LossRecord>)> {
    cfg.validate()?;
    teacher.config.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("cannot adapt on an empty pair set"));
    }
    let depth = sel.deepest_block();
    let mut student = teacher.clone();
    student.set_frozen(|name| deeper_than_block(name, depth));

    let teacher_handles = teacher.handles();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd = Sgd::new(cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.max_iter as usize);
    for iter in 0..cfg.max_iter {
        let indices = sample_indices(&mut rng, pairs.len(), cfg.batch_size);
        let (x1, x2) = pairs.batch::<E>(&indices)?;
        let mut tape = Tape::new();
        // Plain handles and plain input: this forward records nothing.
        let teacher_out =
            run_net(&mut tape, &teacher.config, &teacher_handles, &x1, NetSpan::UpToBlock(depth))?;
        let student_handles = student.watched_handles(&mut tape, |_| true);
        let student_out =
            run_net(&mut tape, &student.config, &student_handles, &x2, NetSpan::UpToBlock(depth))?;
        let loss = feature_regression_loss(&mut tape, &teacher_out.taps, &student_out.taps, sel)?;
        let loss_val = loss.item()?.as_f64();
        check_finite(iter, loss_val)?;
        let mut grads = tape.backward(&loss)?;
        sgd.step(&mut student, iter, |name| {
            student_handles.get(name).and_then(|t| grads.take(t))
        })?;
        let rec = LossRecord { iter, lr: poly_lr(cfg, iter)?, loss: loss_val };
        on_iter(&rec);
        history.push(rec);
    }
    student.iterations += cfg.max_iter;
    Ok((student, history))
}

/// Scores a checkpoint over a labeled split, aggregating one confusion
/// matrix across the whole split.
pub fn evaluate<E: Scalar>(
    ckpt: &Checkpoint<E>,
    data: &LabeledSet,
    batch_size: usize,
) -> Result<(SegScores, ConfusionMatrix)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if data.class_count() != ckpt.config.class_count {
        return Err(Error::invalid(format!(
            "network predicts {} classes, dataset has {}",
            ckpt.config.class_count,
            data.class_count()
        )));
    }
    let mut cm = ConfusionMatrix::new(ckpt.config.class_count)?;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size) {
        let (x, y) = data.batch::<E>(chunk)?;
        let mut tape = Tape::new();
        let (logits, _) = ckpt.forward_with_taps(&mut tape, &x)?;
        let pred = argmax_channels(logits.shape(), logits.data());
        cm.accumulate(&pred, &y.data)?;
    }
    let scores = cm.scores()?;
    Ok((scores, cm))
}

/// The comparison points every experiment needs.
#[derive(Debug, Clone)]
pub struct BaselineScores {
    /// Teacher on its own domain's eval split; reference for the distance.
    pub teacher_on_d1: SegScores,
    /// Teacher applied to the shifted domain unchanged.
    pub b0: SegScores,
    /// Trained from scratch on the shifted domain with labels.
    pub b1: SegScores,
    /// Fine-tuned from the teacher on the shifted domain with labels.
    pub b2: SegScores,
}

/// Runs the full baseline protocol on one corpus. B1 and B2 consume
/// shifted-domain labels; that is the point of them being upper bounds.
pub fn run_baselines<E: Scalar>(
    teacher: &Checkpoint<E>,
    root: &Path,
    cfg: &SgdConfig,
    split: &str,
    seed: u64,
) -> Result<BaselineScores> {
    let d1_eval = LabeledSet::load(root, split, DataSide::D1)?;
    let d2_eval = LabeledSet::load(root, split, DataSide::D2)?;
    let d2_train = LabeledSet::load(root, "train", DataSide::D2)?;

    let (teacher_on_d1, _) = evaluate(teacher, &d1_eval, cfg.batch_size)?;
    let (b0, _) = evaluate(teacher, &d2_eval, cfg.batch_size)?;

    let mut scratch = Checkpoint::<E>::init(teacher.config.clone(), child_seed(seed, 1))?;
    train_supervised(&mut scratch, &d2_train, cfg, child_seed(seed, 2), |_| {})?;
    let (b1, _) = evaluate(&scratch, &d2_eval, cfg.batch_size)?;

    let mut tuned = teacher.clone();
    train_supervised(&mut tuned, &d2_train, cfg, child_seed(seed, 3), |_| {})?;
    let (b2, _) = evaluate(&tuned, &d2_eval, cfg.batch_size)?;

    Ok(BaselineScores { teacher_on_d1, b0, b1, b2 })
}
