//! Reverse-mode differentiation over a flat operation log.
//!
//! Each `Tape` owns a monotonically growing list of nodes. Operations take
//! input tensors by reference, compute the forward value with the kernels,
//! and append a node when at least one input is tracked. Inputs that carry
//! no node reference for this tape (plain tensors, or tensors recorded on a
//! different tape) behave as constants: their values are used but no
//! gradient is produced for them. That rule is what keeps a frozen network
//! out of the backward pass without any explicit no-grad mode.
//!
//! `backward` walks the log once in reverse, accumulating gradients with
//! `+=` so fan-out works. Node ids are topological by construction, which
//! makes the reverse scan sufficient.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::tensor::{LabelMap, NodeRef, Scalar, Tensor};

static NEXT_EPOCH: AtomicU64 = AtomicU64::new(1);

/// An input to a recorded operation: the value it was computed from, plus
/// the node id if that value is tracked on the same tape.
struct Src<E: Scalar> {
    value: Tensor<E>,
    id: Option<usize>,
}

enum Op<E: Scalar> {
    Leaf,
    Add { a: Option<usize>, b: Option<usize> },
    Sub { a: Option<usize>, b: Option<usize> },
    Mul { a: Src<E>, b: Src<E> },
    Scale { a: Option<usize>, factor: E },
    Sum { a: Option<usize>, numel: usize },
    SumSq { a: Src<E> },
    Relu { a: Src<E> },
    Conv2d { x: Src<E>, w: Src<E>, b: Option<usize>, spec: ConvSpec },
    MaxPool2 { a: Option<usize>, in_shape: [usize; 4], out_shape: [usize; 4], argmax: Vec<u32> },
    Upsample { a: Option<usize>, in_shape: [usize; 4], factor: usize },
    CrossEntropy { a: Src<E>, labels: LabelMap, n_valid: usize },
    Gram { a: Src<E>, c: usize, spatial: usize },
}

struct Node<E: Scalar> {
    op: Op<E>,
}

pub struct Tape<E: Scalar> {
    epoch: u64,
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { epoch: NEXT_EPOCH.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Returns a handle to the same values that participates in gradient
    /// computation as a leaf. Watching an already-tracked tensor is a no-op.
    pub fn watch(&mut self, t: &Tensor<E>) -> Tensor<E> {
        if let Some(r) = t.node {
            if r.epoch == self.epoch {
                return t.clone();
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf });
        let mut out = t.clone();
        out.node = Some(NodeRef { epoch: self.epoch, id });
        out
    }

    fn id_of(&self, t: &Tensor<E>) -> Option<usize> {
        t.node.and_then(|r| if r.epoch == self.epoch { Some(r.id) } else { None })
    }

    fn src(&self, t: &Tensor<E>) -> Src<E> {
        Src { value: t.clone(), id: self.id_of(t) }
    }

    fn push(&mut self, mut value: Tensor<E>, op: Op<E>) -> Tensor<E> {
        let id = self.nodes.len();
        self.nodes.push(Node { op });
        value.node = Some(NodeRef { epoch: self.epoch, id });
        value
    }

    fn binary_values(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch in elementwise op: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(data, a.shape())
    }

    pub fn add(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let out = Self::binary_values(a, b, |x, y| x + y)?;
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        if ia.is_none() && ib.is_none() {
            return Ok(out);
        }
        Ok(self.push(out, Op::Add { a: ia, b: ib }))
    }

    pub fn sub(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let out = Self::binary_values(a, b, |x, y| x - y)?;
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        if ia.is_none() && ib.is_none() {
            return Ok(out);
        }
        Ok(self.push(out, Op::Sub { a: ia, b: ib }))
    }

    pub fn mul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let out = Self::binary_values(a, b, |x, y| x * y)?;
        if self.id_of(a).is_none() && self.id_of(b).is_none() {
            return Ok(out);
        }
        let op = Op::Mul { a: self.src(a), b: self.src(b) };
        Ok(self.push(out, op))
    }

    pub fn scale(&mut self, a: &Tensor<E>, factor: E) -> Tensor<E> {
        let data = a.data().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(data, a.shape()).expect("same shape");
        match self.id_of(a) {
            None => out,
            ia @ Some(_) => self.push(out, Op::Scale { a: ia, factor }),
        }
    }

    pub fn sum(&mut self, a: &Tensor<E>) -> Tensor<E> {
        let mut acc = E::zero();
        for &v in a.data() {
            acc += v;
        }
        let out = Tensor::scalar(acc);
        match self.id_of(a) {
            None => out,
            ia @ Some(_) => self.push(out, Op::Sum { a: ia, numel: a.numel() }),
        }
    }

    /// Sum of squared entries, as a scalar.
    pub fn sum_sq(&mut self, a: &Tensor<E>) -> Tensor<E> {
        let mut acc = E::zero();
        for &v in a.data() {
            acc += v * v;
        }
        let out = Tensor::scalar(acc);
        if self.id_of(a).is_none() {
            return out;
        }
        let op = Op::SumSq { a: self.src(a) };
        self.push(out, op)
    }

    pub fn relu(&mut self, a: &Tensor<E>) -> Tensor<E> {
        let out = Tensor::new(kernels::relu_forward(a.data()), a.shape()).expect("same shape");
        if self.id_of(a).is_none() {
            return out;
        }
        let op = Op::Relu { a: self.src(a) };
        self.push(out, op)
    }

    /// Same-padded 2d convolution, kernel 1x1 or 3x3, NCHW.
    pub fn conv2d(
        &mut self,
        x: &Tensor<E>,
        w: &Tensor<E>,
        b: Option<&Tensor<E>>,
        stride: usize,
        dilation: usize,
    ) -> Result<Tensor<E>> {
        let spec = ConvSpec::resolve(x.shape(), w.shape(), stride, dilation)?;
        if let Some(b) = b {
            if b.shape() != [spec.c_out] {
                return Err(Error::invalid(format!(
                    "conv2d bias shape {:?} does not match {} output channels",
                    b.shape(),
                    spec.c_out
                )));
            }
        }
        let data = kernels::conv2d_forward(&spec, x.data(), w.data(), b.map(|b| b.data()));
        let out = Tensor::new(data, &spec.out_shape())?;
        let ib = b.and_then(|b| self.id_of(b));
        if self.id_of(x).is_none() && self.id_of(w).is_none() && ib.is_none() {
            return Ok(out);
        }
        let op = Op::Conv2d { x: self.src(x), w: self.src(w), b: ib, spec };
        Ok(self.push(out, op))
    }

    /// 2x2 max pooling with stride 1 or 2.
    pub fn maxpool2(&mut self, x: &Tensor<E>, stride: usize) -> Result<Tensor<E>> {
        let (data, argmax, out_shape) = kernels::maxpool2_forward(x.shape(), x.data(), stride)?;
        let out = Tensor::new(data, &out_shape)?;
        let ia = self.id_of(x);
        if ia.is_none() {
            return Ok(out);
        }
        let in_shape = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        Ok(self.push(out, Op::MaxPool2 { a: ia, in_shape, out_shape, argmax }))
    }

    /// Bilinear upsampling by an integer factor, align-corners convention.
    pub fn upsample(&mut self, x: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
        let (data, out_shape) = kernels::upsample_forward(x.shape(), x.data(), factor)?;
        let out = Tensor::new(data, &out_shape)?;
        let ia = self.id_of(x);
        if ia.is_none() {
            return Ok(out);
        }
        let in_shape = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        Ok(self.push(out, Op::Upsample { a: ia, in_shape, factor }))
    }

    /// Softmax cross-entropy over the channel axis, averaged over pixels
    /// whose label is not the ignore value. Scalar output.
    pub fn cross_entropy(&mut self, logits: &Tensor<E>, labels: &LabelMap) -> Result<Tensor<E>> {
        if logits.shape().len() != 4 {
            return Err(Error::invalid(format!(
                "cross_entropy expects NCHW logits, got {:?}",
                logits.shape()
            )));
        }
        let s = logits.shape();
        if labels.n != s[0] || labels.h != s[2] || labels.w != s[3] {
            return Err(Error::invalid(format!(
                "label shape {}x{}x{} does not match logits {:?}",
                labels.n, labels.h, labels.w, s
            )));
        }
        let (loss, n_valid) = kernels::cross_entropy_forward(s, logits.data(), &labels.data)?;
        let out = Tensor::scalar(loss);
        if self.id_of(logits).is_none() {
            return Ok(out);
        }
        let op = Op::CrossEntropy { a: self.src(logits), labels: labels.clone(), n_valid };
        Ok(self.push(out, op))
    }

    /// Channel co-occurrence matrix of a single feature map, shape (C, C).
    pub fn gram(&mut self, f: &Tensor<E>) -> Result<Tensor<E>> {
        let s = f.shape();
        let (c, spatial) = match s.len() {
            2 => (s[0], s[1]),
            3 => (s[0], s[1] * s[2]),
            4 if s[0] == 1 => (s[1], s[2] * s[3]),
            _ => {
                return Err(Error::invalid(format!(
                    "gram expects (C,HW), (C,H,W) or (1,C,H,W), got {s:?}"
                )))
            }
        };
        let out = Tensor::new(kernels::gram_forward(c, spatial, f.data()), &[c, c])?;
        if self.id_of(f).is_none() {
            return Ok(out);
        }
        let op = Op::Gram { a: self.src(f), c, spatial };
        Ok(self.push(out, op))
    }

    /// Gradient of a scalar tracked loss with respect to every tracked
    /// tensor that feeds it.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<Gradients<E>> {
        let lid = self.id_of(loss).ok_or_else(|| {
            Error::invalid("backward target is not recorded on this tape")
        })?;
        if !loss.is_scalar() {
            return Err(Error::invalid(format!(
                "backward target must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let mut slots: Vec<Option<Vec<E>>> = vec![None; lid + 1];
        slots[lid] = Some(vec![E::one()]);

        for id in (0..=lid).rev() {
            if slots[id].is_none() {
                continue;
            }
            let (lo, hi) = slots.split_at_mut(id);
            let g = hi[0].as_ref().expect("checked above");
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    if let Some(ia) = a {
                        let buf = acc_slot(lo, *ia, g.len());
                        for i in 0..g.len() {
                            buf[i] += g[i];
                        }
                    }
                    if let Some(ib) = b {
                        let buf = acc_slot(lo, *ib, g.len());
                        for i in 0..g.len() {
                            buf[i] += g[i];
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if let Some(ia) = a {
                        let buf = acc_slot(lo, *ia, g.len());
                        for i in 0..g.len() {
                            buf[i] += g[i];
                        }
                    }
                    if let Some(ib) = b {
                        let buf = acc_slot(lo, *ib, g.len());
                        for i in 0..g.len() {
                            buf[i] -= g[i];
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if let Some(ia) = a.id {
                        let bv = b.value.data();
                        let buf = acc_slot(lo, ia, g.len());
                        for i in 0..g.len() {
                            buf[i] += g[i] * bv[i];
                        }
                    }
                    if let Some(ib) = b.id {
                        let av = a.value.data();
                        let buf = acc_slot(lo, ib, g.len());
                        for i in 0..g.len() {
                            buf[i] += g[i] * av[i];
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    if let Some(ia) = a {
                        let f = *factor;
                        let buf = acc_slot(lo, *ia, g.len());
                        for i in 0..g.len() {
                            buf[i] += g[i] * f;
                        }
                    }
                }
                Op::Sum { a, numel } => {
                    if let Some(ia) = a {
                        let g0 = g[0];
                        let buf = acc_slot(lo, *ia, *numel);
                        for v in buf.iter_mut() {
                            *v += g0;
                        }
                    }
                }
                Op::SumSq { a } => {
                    if let Some(ia) = a.id {
                        let g0 = g[0];
                        let two = E::from_f64(2.0);
                        let av = a.value.data();
                        let buf = acc_slot(lo, ia, av.len());
                        for i in 0..av.len() {
                            buf[i] += two * av[i] * g0;
                        }
                    }
                }
                Op::Relu { a } => {
                    if let Some(ia) = a.id {
                        let av = a.value.data();
                        let buf = acc_slot(lo, ia, av.len());
                        kernels::relu_backward(av, g, buf);
                    }
                }
                Op::Conv2d { x, w, b, spec } => {
                    let mut dx = x.id.map(|_| vec![E::zero(); x.value.numel()]);
                    let mut dw = w.id.map(|_| vec![E::zero(); w.value.numel()]);
                    let mut db = b.map(|_| vec![E::zero(); spec.c_out]);
                    kernels::conv2d_backward(
                        spec,
                        x.value.data(),
                        w.value.data(),
                        g,
                        dx.as_mut(),
                        dw.as_mut(),
                        db.as_mut(),
                    );
                    if let (Some(ix), Some(dx)) = (x.id, dx) {
                        add_into(lo, ix, dx);
                    }
                    if let (Some(iw), Some(dw)) = (w.id, dw) {
                        add_into(lo, iw, dw);
                    }
                    if let (Some(ib), Some(db)) = (*b, db) {
                        add_into(lo, ib, db);
                    }
                }
                Op::MaxPool2 { a, in_shape, out_shape, argmax } => {
                    if let Some(ia) = a {
                        let numel = in_shape.iter().product();
                        let buf = acc_slot(lo, *ia, numel);
                        kernels::maxpool2_backward(in_shape, out_shape, argmax, g, buf);
                    }
                }
                Op::Upsample { a, in_shape, factor } => {
                    if let Some(ia) = a {
                        let numel = in_shape.iter().product();
                        let buf = acc_slot(lo, *ia, numel);
                        kernels::upsample_backward(in_shape, *factor, g, buf);
                    }
                }
                Op::CrossEntropy { a, labels, n_valid } => {
                    if let Some(ia) = a.id {
                        let shape = a.value.shape().to_vec();
                        let av = a.value.data();
                        let buf = acc_slot(lo, ia, av.len());
                        kernels::cross_entropy_backward(&shape, av, &labels.data, *n_valid, g[0], buf);
                    }
                }
                Op::Gram { a, c, spatial } => {
                    if let Some(ia) = a.id {
                        let av = a.value.data();
                        let buf = acc_slot(lo, ia, av.len());
                        kernels::gram_backward(*c, *spatial, av, g, buf);
                    }
                }
            }
        }
        Ok(Gradients { epoch: self.epoch, slots })
    }
}

fn acc_slot<E: Scalar>(slots: &mut [Option<Vec<E>>], id: usize, numel: usize) -> &mut Vec<E> {
    let slot = &mut slots[id];
    if slot.is_none() {
        *slot = Some(vec![E::zero(); numel]);
    }
    slot.as_mut().expect("just filled")
}

fn add_into<E: Scalar>(slots: &mut [Option<Vec<E>>], id: usize, buf: Vec<E>) {
    match &mut slots[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(buf) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(buf),
    }
}

/// Result of a backward pass. Gradients are addressed by the tensor handle
/// they belong to; tensors that never influenced the loss return `None`.
pub struct Gradients<E: Scalar> {
    epoch: u64,
    slots: Vec<Option<Vec<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn wrt(&self, t: &Tensor<E>) -> Option<&[E]> {
        let r = t.node?;
        if r.epoch != self.epoch {
            return None;
        }
        self.slots.get(r.id).and_then(|s| s.as_deref())
    }

    /// Move a gradient buffer out, leaving `None` behind.
    pub fn take(&mut self, t: &Tensor<E>) -> Option<Vec<E>> {
        let r = t.node?;
        if r.epoch != self.epoch {
            return None;
        }
        self.slots.get_mut(r.id).and_then(|s| s.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_produce_no_nodes() {
        let mut tape = Tape::<f32>::new();
        let a = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::new(vec![3.0, 4.0], &[2]).unwrap();
        let c = tape.add(&a, &b).unwrap();
        assert!(tape.is_empty());
        assert_eq!(c.data(), &[4.0, 6.0]);
    }

    #[test]
    fn watch_is_idempotent() {
        let mut tape = Tape::<f32>::new();
        let a = Tensor::new(vec![1.0], &[1]).unwrap();
        let w1 = tape.watch(&a);
        let w2 = tape.watch(&w1);
        assert_eq!(tape.len(), 1);
        assert_eq!(w1.node, w2.node);
    }

    #[test]
    fn cross_tape_tensor_is_constant() {
        let mut t1 = Tape::<f32>::new();
        let mut t2 = Tape::<f32>::new();
        let a = Tensor::new(vec![2.0], &[1]).unwrap();
        let a1 = t1.watch(&a);
        // On t2, a1 is untracked: the product records only the t2 leaf.
        let b2 = t2.watch(&a);
        let prod = t2.mul(&a1, &b2).unwrap();
        let grads = t2.backward(&prod).unwrap();
        assert!(grads.wrt(&a1).is_none());
        assert_eq!(grads.wrt(&b2).unwrap(), &[2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x ; dy/dx = 2x + 1 = 7 at x = 3
        let mut tape = Tape::<f64>::new();
        let x = tape.watch(&Tensor::scalar(3.0));
        let sq = tape.mul(&x, &x).unwrap();
        let y = tape.add(&sq, &x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_untracked() {
        let mut tape = Tape::<f32>::new();
        let x = tape.watch(&Tensor::new(vec![1.0, 2.0], &[2]).unwrap());
        let y = tape.relu(&x);
        assert!(tape.backward(&y).is_err());
        let constant = Tensor::scalar(1.0f32);
        assert!(tape.backward(&constant).is_err());
    }

    #[test]
    fn sub_routes_negative_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.watch(&Tensor::new(vec![5.0, 1.0], &[2]).unwrap());
        let b = tape.watch(&Tensor::new(vec![2.0, 2.0], &[2]).unwrap());
        let d = tape.sub(&a, &b).unwrap();
        let loss = tape.sum_sq(&d);
        assert_eq!(loss.item().unwrap(), 10.0);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&a).unwrap(), &[6.0, -2.0]);
        assert_eq!(grads.wrt(&b).unwrap(), &[-6.0, 2.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.watch(&Tensor::scalar(1.0));
        let unused = tape.watch(&Tensor::scalar(9.0));
        let y = tape.sum_sq(&x);
        let grads = tape.backward(&y).unwrap();
        assert!(grads.wrt(&unused).is_none());
        assert_eq!(grads.wrt(&x).unwrap(), &[2.0]);
    }
}
