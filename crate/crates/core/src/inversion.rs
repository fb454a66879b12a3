//! Feature inversion: optimize an image from noise until its feature maps
//! match a reference image's, through a fixed network. Content terms match
//! features directly; style terms match Gram matrices, which forget where
//! in the image activations happened.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{run_net, Checkpoint, NetSpan, TAP_NAMES};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::transfer::LossRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    /// (tap, α) pairs for direct feature matching.
    pub content: Vec<(String, f64)>,
    /// (tap, β) pairs for Gram matching.
    pub style: Vec<(String, f64)>,
    pub iterations: u64,
    pub step: f64,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            content: vec![("pool_5".into(), 1.0)],
            style: vec![("pool_1".into(), 1.0), ("pool_2".into(), 1.0), ("pool_3".into(), 1.0)],
            iterations: 2000,
            step: 1.0,
            seed: 0,
        }
    }
}

fn check_terms(kind: &str, terms: &[(String, f64)]) -> Result<()> {
    for (name, weight) in terms {
        if !TAP_NAMES.contains(&name.as_str()) {
            return Err(Error::invalid(format!(
                "unknown {kind} tap {name:?}; taps are {}",
                TAP_NAMES.join(", ")
            )));
        }
        if !(*weight > 0.0) {
            return Err(Error::invalid(format!(
                "{kind} tap {name} has non-positive weight {weight}"
            )));
        }
        if terms.iter().filter(|(n, _)| n == name).count() > 1 {
            return Err(Error::invalid(format!("{kind} tap {name} listed twice")));
        }
    }
    Ok(())
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.content.is_empty() && self.style.is_empty() {
            return Err(Error::invalid("need at least one content or style tap"));
        }
        check_terms("content", &self.content)?;
        check_terms("style", &self.style)?;
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if !(self.step > 0.0) {
            return Err(Error::invalid(format!("step must be > 0, got {}", self.step)));
        }
        Ok(())
    }

    fn deepest_block(&self) -> usize {
        self.content
            .iter()
            .chain(&self.style)
            .map(|(n, _)| TAP_NAMES.iter().position(|t| t == n).expect("validated") + 1)
            .max()
            .expect("non-empty")
    }
}

/// ½‖target − current‖². Only the current side may be tracked.
pub fn content_loss<E: Scalar>(
    tape: &mut Tape<E>,
    target: &Tensor<E>,
    current: &Tensor<E>,
) -> Result<Tensor<E>> {
    if target.shape() != current.shape() {
        return Err(Error::invalid(format!(
            "content shapes differ: {:?} vs {:?}",
            target.shape(),
            current.shape()
        )));
    }
    let diff = tape.sub(current, target)?;
    let sq = tape.sum_sq(&diff);
    Ok(tape.scale(&sq, E::from_f64(0.5)))
}

/// ‖G(target) − G(current)‖² / (4·C²·(H·W)²) over a single feature map.
pub fn style_loss<E: Scalar>(
    tape: &mut Tape<E>,
    target: &Tensor<E>,
    current: &Tensor<E>,
) -> Result<Tensor<E>> {
    if target.shape() != current.shape() {
        return Err(Error::invalid(format!(
            "style shapes differ: {:?} vs {:?}",
            target.shape(),
            current.shape()
        )));
    }
    let gt = tape.gram(target)?;
    let gc = tape.gram(current)?;
    let c = gt.shape()[0];
    let spatial = target.numel() / c;
    let diff = tape.sub(&gc, &gt)?;
    let sq = tape.sum_sq(&diff);
    let norm = 1.0 / (4.0 * (c * c) as f64 * (spatial * spatial) as f64);
    Ok(tape.scale(&sq, E::from_f64(norm)))
}

/// The size normalizations applied to each term of the objective at the
/// shapes this reference produces: 1/(H·W) per content tap and the constant
/// 1/(4·C²·(H·W)²) baked into style_loss per style tap. Reported alongside
/// a run so the scale of its terms is auditable from the artifacts.
pub fn term_normalizers<E: Scalar>(
    ckpt: &Checkpoint<E>,
    reference: &Tensor<E>,
    cfg: &InversionConfig,
) -> Result<(Vec<(String, f64)>, Vec<(String, f64)>)> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let taps = run_net(
        &mut tape,
        &ckpt.config,
        &ckpt.handles(),
        reference,
        NetSpan::UpToBlock(cfg.deepest_block()),
    )?
    .taps;
    let tap = |name: &str| {
        taps.get(name).ok_or_else(|| Error::internal(format!("tap {name} missing from forward")))
    };
    let content = cfg
        .content
        .iter()
        .map(|(name, _)| {
            let t = tap(name)?;
            let c = if t.shape().len() == 4 { t.shape()[1] } else { t.shape()[0] };
            Ok((name.clone(), (c as f64) / t.numel() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let style = cfg
        .style
        .iter()
        .map(|(name, _)| {
            let t = tap(name)?;
            let shape = t.shape();
            let c = if shape.len() == 4 { shape[1] } else { shape[0] };
            let spatial = t.numel() / c;
            Ok((name.clone(), 1.0 / (4.0 * (c * c) as f64 * (spatial * spatial) as f64)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((content, style))
}

/// Gradient descent on pixels only. The network stays fixed; the image is
/// clamped to [0,1] after every step. Aborts when the loss goes non-finite.
pub fn invert<E: Scalar>(
    ckpt: &Checkpoint<E>,
    reference: &Tensor<E>,
    cfg: &InversionConfig,
    mut on_iter: impl FnMut(&LossRecord),
) -> Result<(Tensor<E>, Vec<LossRecord>)> {
    cfg.validate()?;
    let shape = reference.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::invalid(format!(
            "reference must be a single (1,C,H,W) image, got {shape:?}"
        )));
    }
    let depth = cfg.deepest_block();
    let handles = ckpt.handles();

    // Reference features, computed once; constants from here on.
    let mut warm = Tape::new();
    let target =
        run_net(&mut warm, &ckpt.config, &handles, reference, NetSpan::UpToBlock(depth))?.taps;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pixels: Vec<E> =
        (0..reference.numel()).map(|_| E::from_f64(rng.random_range(0.4..0.6))).collect();
    let step = E::from_f64(cfg.step);

    let mut history = Vec::with_capacity(cfg.iterations as usize);
    for iter in 0..cfg.iterations {
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::new(pixels.clone(), &shape)?);
        let current = run_net(&mut tape, &ckpt.config, &handles, &x, NetSpan::UpToBlock(depth))?.taps;

        let mut total: Option<Tensor<E>> = None;
        let add_term = |tape: &mut Tape<E>, term: Tensor<E>, total: &mut Option<Tensor<E>>| {
            *total = Some(match total.take() {
                None => term,
                Some(acc) => tape.add(&acc, &term).expect("scalar shapes"),
            });
        };
        for (name, alpha) in &cfg.content {
            let t = &target[name];
            let l = content_loss(&mut tape, t, &current[name])?;
            // Averaged over spatial positions so one step size serves every
            // tap depth; the style term carries its own normalization already.
            let positions = t.numel() / t.shape()[1];
            let scaled = tape.scale(&l, E::from_f64(*alpha / positions as f64));
            add_term(&mut tape, scaled, &mut total);
        }
        for (name, beta) in &cfg.style {
            let l = style_loss(&mut tape, &target[name], &current[name])?;
            let scaled = tape.scale(&l, E::from_f64(*beta));
            add_term(&mut tape, scaled, &mut total);
        }
        let loss = total.expect("validated non-empty");
        let loss_val = loss.item()?.as_f64();
        if !loss_val.is_finite() {
            return Err(Error::Diverged { iter, loss: loss_val });
        }

        let grads = tape.backward(&loss)?;
        if let Some(g) = grads.wrt(&x) {
            for (p, &gi) in pixels.iter_mut().zip(g) {
                *p = (*p - step * gi).clamp(E::zero(), E::one());
            }
        }
        let rec = LossRecord { iter, lr: cfg.step, loss: loss_val };
        on_iter(&rec);
        history.push(rec);
    }
    Ok((Tensor::new(pixels, &shape)?, history))
}
