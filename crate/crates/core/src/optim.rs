//! SGD with momentum, weight decay, and polynomial learning-rate decay.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Checkpoint;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: u64,
    pub batch_size: usize,
}

impl SgdConfig {
    /// Schedule used when training a network from labels. The rate is sized
    /// for from-scratch training of the small default network; fine-tuning
    /// an already-trained checkpoint tolerates it too because of the decay.
    pub fn supervised_default(max_iter: u64) -> Self {
        SgdConfig {
            base_lr: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            power: 0.9,
            max_iter,
            batch_size: 8,
        }
    }

    /// Schedule used when regressing features onto a frozen teacher. The
    /// student starts from already-trained weights and the per-tap losses
    /// are raw sums of squares over whole batches, so the step is tiny and
    /// decay is off to leave unreached layers strictly alone.
    pub fn transfer_default(max_iter: u64) -> Self {
        SgdConfig {
            base_lr: 2.5e-7,
            momentum: 0.9,
            weight_decay: 0.0,
            power: 0.9,
            max_iter,
            batch_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) {
            return Err(Error::invalid(format!("base_lr must be >= 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.power > 0.0) {
            return Err(Error::invalid(format!("power must be > 0, got {}", self.power)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter/max_iter)^power`
pub fn poly_lr(cfg: &SgdConfig, iter: u64) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::invalid(format!(
            "iteration {iter} exceeds the schedule length {}",
            cfg.max_iter
        )));
    }
    let frac = 1.0 - iter as f64 / cfg.max_iter as f64;
    Ok(cfg.base_lr * frac.powf(cfg.power))
}

/// Optimizer state: one velocity buffer per parameter, created lazily and
/// never serialized.
pub struct Sgd<E: Scalar> {
    cfg: SgdConfig,
    velocity: IndexMap<String, Vec<E>>,
}

impl<E: Scalar> Sgd<E> {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd { cfg, velocity: IndexMap::new() })
    }

    pub fn cfg(&self) -> &SgdConfig {
        &self.cfg
    }

    /// One update: `v <- momentum*v + grad + wd*param; param <- param - lr*v`
    /// with the poly rate at `iter`. Weight decay applies to conv weights
    /// only, never biases. Frozen parameters are not touched at all; a
    /// trainable parameter without a gradient is an internal error.
    ///
    /// `grad_of` yields (and gives up) the gradient buffer for a parameter
    /// name, or None when the loss did not reach that parameter.
    pub fn step(
        &mut self,
        ckpt: &mut Checkpoint<E>,
        iter: u64,
        mut grad_of: impl FnMut(&str) -> Option<Vec<E>>,
    ) -> Result<()> {
        let lr = E::from_f64(poly_lr(&self.cfg, iter)?);
        let momentum = E::from_f64(self.cfg.momentum);
        let names: Vec<String> = ckpt.param_names().map(str::to_string).collect();
        for name in names {
            if ckpt.is_frozen(&name) {
                continue;
            }
            let grad = grad_of(&name).ok_or_else(|| {
                Error::internal(format!("trainable parameter {name} received no gradient"))
            })?;
            let wd = if name.ends_with(".bias") { E::zero() } else { E::from_f64(self.cfg.weight_decay) };
            let mut data = ckpt.get(&name)?.data().to_vec();
            if grad.len() != data.len() {
                return Err(Error::internal(format!(
                    "gradient for {name} has length {}, parameter has {}",
                    grad.len(),
                    data.len()
                )));
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![E::zero(); data.len()]);
            for i in 0..data.len() {
                v[i] = momentum * v[i] + grad[i] + wd * data[i];
                data[i] -= lr * v[i];
            }
            ckpt.set_data(&name, data)?;
        }
        Ok(())
    }
}
