//! Dense row-major tensors, rank 1–4, generic over element precision.
//!
//! `f32` is the working precision; `f64` is used by verification suites
//! that compare analytic gradients against finite differences.

use std::fmt::{Debug, Display};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` or `f64`.
///
/// `gemm` computes `c = alpha * a @ b + beta * c` for row-major matrices.
/// The implementation is single-threaded with a fixed reduction order, so
/// results are bitwise reproducible across calls.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Debug + Display + Send + Sync + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// `c += a @ b` with caller-chosen strides for `a` and `b`, so either
    /// operand can be consumed transposed without copying. `c` is row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    );
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    ) {
        assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                1.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    ) {
        assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                1.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Identifies the tape node a tensor was produced by, if any.
///
/// `epoch` disambiguates tapes: a tensor recorded on one tape is treated as
/// a plain constant by every other tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub epoch: u64,
    pub id: usize,
}

/// Dense n-dimensional array, row-major, rank 1–4. Values are immutable
/// after construction; cloning shares the underlying buffer.
#[derive(Debug, Clone)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    pub(crate) node: Option<NodeRef>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::invalid(format!("tensor rank must be 1..=4, got {}", shape.len())));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![E::zero(); numel], shape)
    }

    pub fn full(shape: &[usize], v: E) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![v; numel], shape)
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![v]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if !self.is_scalar() {
            return Err(Error::invalid(format!("item() on non-scalar tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Mutable access to the buffer. Copies if the buffer is shared, so
    /// tensors already recorded on a tape keep the values they were
    /// recorded with.
    pub fn make_mut(&mut self) -> &mut [E] {
        self.node = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Reinterpret the buffer under a new shape with the same numel.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} ({}) to {:?} ({})",
                self.shape,
                self.numel(),
                shape,
                numel
            )));
        }
        if shape.is_empty() || shape.len() > 4 || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("bad target shape {shape:?}")));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data), node: self.node })
    }

    /// Convert between precisions element by element.
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        let data: Vec<F> = self.data.iter().map(|v| F::from_f64(v.as_f64())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data), node: None }
    }

    /// Exact equality of shape and bits.
    pub fn bitwise_eq(&self, other: &Tensor<E>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// Label map with values in `[0, C)` plus the ignore value 255.
///
/// Shape is `(N, H, W)` with `n == 1` for single images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

/// Pixels carrying this value are excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::invalid(format!(
                "label data length {} does not match {}x{}x{}",
                data.len(),
                n,
                h,
                w
            )));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, v: u8) -> Self {
        LabelMap { n, h, w, data: vec![v; n * h * w] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Stack single-image maps into one batch.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::invalid("cannot stack zero label maps"));
        }
        let (h, w) = (maps[0].h, maps[0].w);
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if m.n != 1 || m.h != h || m.w != w {
                return Err(Error::invalid("label maps must be single-image and same-size to stack"));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(LabelMap { n: maps.len(), h, w, data })
    }
}
