//! The segmentation network: five conv blocks with pooling taps, a 1x1
//! classification head, and bilinear upsampling back to input resolution.
//!
//! Block b is conv3x3 -> relu -> conv3x3 -> relu -> maxpool2, with each
//! block's pool output exposed as the tap `pool_b`. Blocks that pool with
//! stride 1 keep spatial size and use dilated convolutions instead, so the
//! deepest taps stay spatially meaningful on small inputs.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

pub const TAP_NAMES: [&str; 5] = ["pool_1", "pool_2", "pool_3", "pool_4", "pool_5"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub pool_stride: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub class_count: usize,
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
}

impl NetworkConfig {
    /// The default desk-scale net: channels 16/32/48/64/64, blocks 1-3
    /// pool with stride 2, blocks 4-5 keep size and dilate by 2 and 4.
    /// Output stride 8.
    pub fn desk_default(class_count: usize) -> Self {
        NetworkConfig {
            class_count,
            in_channels: 3,
            blocks: vec![
                BlockSpec { channels: 16, pool_stride: 2, dilation: 1 },
                BlockSpec { channels: 32, pool_stride: 2, dilation: 1 },
                BlockSpec { channels: 48, pool_stride: 2, dilation: 1 },
                BlockSpec { channels: 64, pool_stride: 1, dilation: 2 },
                BlockSpec { channels: 64, pool_stride: 1, dilation: 4 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::invalid(format!("class_count must be >= 2, got {}", self.class_count)));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels must be positive"));
        }
        if self.blocks.len() != TAP_NAMES.len() {
            return Err(Error::invalid(format!(
                "network must have exactly {} blocks (one per tap), got {}",
                TAP_NAMES.len(),
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 {
                return Err(Error::invalid(format!("block {} has zero channels", i + 1)));
            }
            if b.pool_stride != 1 && b.pool_stride != 2 {
                return Err(Error::invalid(format!(
                    "block {} pool_stride must be 1 or 2, got {}",
                    i + 1,
                    b.pool_stride
                )));
            }
            if b.dilation == 0 {
                return Err(Error::invalid(format!("block {} dilation must be >= 1", i + 1)));
            }
        }
        Ok(())
    }

    /// Combined downsampling of the full stack, and the factor the head
    /// upsamples by.
    pub fn output_stride(&self) -> usize {
        self.blocks.iter().map(|b| b.pool_stride).product()
    }

    /// Cumulative downsampling at each tap, pool_1..pool_5.
    pub fn tap_strides(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .scan(1usize, |s, b| {
                *s *= b.pool_stride;
                Some(*s)
            })
            .collect()
    }

    /// Parameter names and shapes in definition order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_ch = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            for j in 1..=2usize {
                let src = if j == 1 { in_ch } else { b.channels };
                out.push((format!("block{}.conv{}.weight", i + 1, j), vec![b.channels, src, 3, 3]));
                out.push((format!("block{}.conv{}.bias", i + 1, j), vec![b.channels]));
            }
            in_ch = b.channels;
        }
        out.push(("head.weight".into(), vec![self.class_count, in_ch, 1, 1]));
        out.push(("head.bias".into(), vec![self.class_count]));
        out
    }
}

/// Network parameters plus the config they belong to and a little
/// provenance (how many optimizer iterations produced them, from which
/// seed). The `frozen` flag is runtime-only state used by the optimizer.
#[derive(Debug, Clone)]
pub struct Checkpoint<E: Scalar> {
    pub config: NetworkConfig,
    params: IndexMap<String, Param<E>>,
    pub iterations: u64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
struct Param<E: Scalar> {
    tensor: Tensor<E>,
    frozen: bool,
}

impl<E: Scalar> Checkpoint<E> {
    /// Fresh parameters: Kaiming fan-in normals for conv weights, zero
    /// biases. Values are drawn in f64 and cast, so every precision sees
    /// the same underlying draw.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for (name, shape) in config.param_specs() {
            let numel: usize = shape.iter().product();
            let data: Vec<E> = if name.ends_with(".bias") {
                vec![E::zero(); numel]
            } else {
                let fan_in: usize = shape[1] * shape[2] * shape[3];
                let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::internal(format!("bad init distribution: {e}")))?;
                (0..numel).map(|_| E::from_f64(normal.sample(&mut rng))).collect()
            };
            params.insert(name, Param { tensor: Tensor::new(data, &shape)?, frozen: false });
        }
        Ok(Checkpoint { config, params, iterations: 0, seed })
    }

    /// Rebuild from raw parts, checking names and shapes against the config.
    pub fn from_parts(
        config: NetworkConfig,
        tensors: IndexMap<String, Tensor<E>>,
        iterations: u64,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, config requires {}",
                tensors.len(),
                specs.len()
            )));
        }
        let mut params = IndexMap::new();
        for (name, shape) in specs {
            let t = tensors.get(&name).ok_or_else(|| {
                Error::invalid(format!("checkpoint is missing parameter {name}"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, config requires {:?}",
                    t.shape(),
                    shape
                )));
            }
            params.insert(name, Param { tensor: t.clone(), frozen: false });
        }
        Ok(Checkpoint { config, params, iterations, seed })
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::internal(format!("no parameter named {name}")))
    }

    pub fn set_data(&mut self, name: &str, data: Vec<E>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::internal(format!("no parameter named {name}")))?;
        if data.len() != p.tensor.numel() {
            return Err(Error::internal(format!(
                "new data for {name} has length {}, expected {}",
                data.len(),
                p.tensor.numel()
            )));
        }
        p.tensor = Tensor::new(data, &p.tensor.shape().to_vec())?;
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params.get(name).map(|p| p.frozen).unwrap_or(false)
    }

    /// Marks every parameter matching the predicate frozen (and unfreezes
    /// the rest).
    pub fn set_frozen(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.frozen = pred(name);
        }
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Plain (untracked) handles to every parameter, in definition order.
    pub fn handles(&self) -> IndexMap<String, Tensor<E>> {
        self.params.iter().map(|(n, p)| (n.clone(), p.tensor.clone())).collect()
    }

    /// Handles with the parameters selected by `trainable` watched on the
    /// tape; everything else stays constant.
    pub fn watched_handles(
        &self,
        tape: &mut Tape<E>,
        trainable: impl Fn(&str) -> bool,
    ) -> IndexMap<String, Tensor<E>> {
        self.params
            .iter()
            .map(|(n, p)| {
                let t = if trainable(n) && !p.frozen { tape.watch(&p.tensor) } else { p.tensor.clone() };
                (n.clone(), t)
            })
            .collect()
    }

    pub fn cast<F: Scalar>(&self) -> Checkpoint<F> {
        Checkpoint {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(n, p)| (n.clone(), Param { tensor: p.tensor.cast(), frozen: p.frozen }))
                .collect(),
            iterations: self.iterations,
            seed: self.seed,
        }
    }

    /// Full forward pass on untracked parameters.
    pub fn forward_with_taps(
        &self,
        tape: &mut Tape<E>,
        batch: &Tensor<E>,
    ) -> Result<(Tensor<E>, FeatureTaps<E>)> {
        let out = run_net(tape, &self.config, &self.handles(), batch, NetSpan::Full)?;
        let logits = out.logits.expect("full pass produces logits");
        Ok((logits, out.taps))
    }
}

/// Tap name -> feature map, ordered pool_1..pool_5 (possibly truncated
/// when the pass stopped early).
pub type FeatureTaps<E> = IndexMap<String, Tensor<E>>;

/// How much of the network to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetSpan {
    /// All blocks plus the classification head.
    Full,
    /// Blocks 1..=n only, no head. Saves both compute and tape nodes when
    /// only shallow taps are needed.
    UpToBlock(usize),
}

pub struct NetOutput<E: Scalar> {
    pub logits: Option<Tensor<E>>,
    pub taps: FeatureTaps<E>,
}

/// Runs the network described by `config` using the given parameter
/// handles. Handles may be tape-watched (training) or plain (inference);
/// gradient tracking follows automatically.
pub fn run_net<E: Scalar>(
    tape: &mut Tape<E>,
    config: &NetworkConfig,
    params: &IndexMap<String, Tensor<E>>,
    batch: &Tensor<E>,
    span: NetSpan,
) -> Result<NetOutput<E>> {
    config.validate()?;
    let s = batch.shape();
    if s.len() != 4 || s[1] != config.in_channels {
        return Err(Error::invalid(format!(
            "batch must be (N,{},H,W), got {:?}",
            config.in_channels, s
        )));
    }
    let stride = config.output_stride();
    if s[2] % stride != 0 || s[3] % stride != 0 {
        return Err(Error::invalid(format!(
            "input {}x{} not divisible by the output stride {}",
            s[2], s[3], stride
        )));
    }
    let n_blocks = match span {
        NetSpan::Full => config.blocks.len(),
        NetSpan::UpToBlock(n) => {
            if n == 0 || n > config.blocks.len() {
                return Err(Error::invalid(format!(
                    "block span {n} out of range 1..={}",
                    config.blocks.len()
                )));
            }
            n
        }
    };

    let get = |name: &str| -> Result<&Tensor<E>> {
        params.get(name).ok_or_else(|| Error::internal(format!("missing parameter handle {name}")))
    };

    let mut x = batch.clone();
    let mut taps = IndexMap::new();
    for (i, block) in config.blocks.iter().take(n_blocks).enumerate() {
        for j in 1..=2usize {
            let w = get(&format!("block{}.conv{}.weight", i + 1, j))?;
            let b = get(&format!("block{}.conv{}.bias", i + 1, j))?;
            x = tape.conv2d(&x, w, Some(b), 1, block.dilation)?;
            x = tape.relu(&x);
        }
        x = tape.maxpool2(&x, block.pool_stride)?;
        taps.insert(TAP_NAMES[i].to_string(), x.clone());
    }

    let logits = if matches!(span, NetSpan::Full) {
        let w = get("head.weight")?;
        let b = get("head.bias")?;
        let head = tape.conv2d(&x, w, Some(b), 1, 1)?;
        Some(tape.upsample(&head, stride)?)
    } else {
        None
    };

    Ok(NetOutput { logits, taps })
}
