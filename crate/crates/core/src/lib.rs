//! Annotation-free transfer of a segmentation network across visual domains.
//!
//! The pieces, bottom up: a small tensor type with reverse-mode
//! differentiation ([`tape`]), the convolutional network and its
//! checkpoints ([`nn`], [`ckpt`]), SGD with polynomial decay ([`optim`]),
//! synthetic paired-domain datasets ([`datagen`]), segmentation metrics
//! ([`metrics`]), the feature-regression transfer procedure itself
//! ([`transfer`]), and feature inversion for inspecting what a network
//! keeps ([`inversion`]).

pub mod ckpt;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod inversion;
pub mod kernels;
pub mod metrics;
pub mod netpbm;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape};
pub use tensor::{LabelMap, Scalar, Tensor, IGNORE_LABEL};
