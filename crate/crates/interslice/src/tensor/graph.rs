//! Reverse-mode autodiff tape.
//!
//! Ops execute eagerly and append a node to the tape; the tape is therefore
//! always topologically ordered. `backward` walks it once in reverse, then
//! clears it. One graph belongs to one training context; independent graphs
//! share nothing mutable.

use super::kernels;
use super::{par_add_assign, par_map, par_zip_map, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, padding: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Exp { a: NodeId },
    Tanh { a: NodeId },
    LeakyRelu { a: NodeId, alpha: f64 },
    Scale { a: NodeId, c: f64 },
    ChannelSlice { a: NodeId, from: usize, to: usize },
    ChannelConcat { a: NodeId, b: NodeId },
    PixelUnshuffle { a: NodeId, r: usize },
    PixelShuffle { a: NodeId, r: usize },
    Sum { a: NodeId },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation; see module docs.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    scratch: kernels::ConvScratch<T>,
}

/// Gradients returned by [`Graph::backward`], keyed by leaf `NodeId`.
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.by_node.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), scratch: kernels::ConvScratch::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf. Its `requires_grad` flag decides whether
    /// `backward` reports a gradient for it.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        let needs = t.requires_grad;
        self.push_unchecked(t, Op::Leaf, needs)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Clone the value out of the tape.
    pub fn detach(&self, id: NodeId) -> Tensor<T> {
        let mut t = self.nodes[id.0].value.clone();
        t.requires_grad = false;
        t.grad = None;
        t
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.is_all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    /// For ops that cannot produce non-finite values from finite inputs
    /// (permutations, copies, bounded maps); skips the finiteness scan.
    fn push_pure(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> NodeId {
        self.push_unchecked(value, op, needs_grad)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch { op, detail: format!("{sa:?} vs {sb:?} (no broadcasting)") });
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, padding: usize) -> Result<NodeId> {
        let y = kernels::conv2d_forward_with(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            padding,
            &mut self.scratch,
        )?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(y, Op::Conv2d { x, w, b, padding }, needs, "conv2d")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let v = par_zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.value(a).shape().to_vec(), v)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Add { a, b }, needs, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let v = par_zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.value(a).shape().to_vec(), v)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub { a, b }, needs, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let v = par_zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.value(a).shape().to_vec(), v)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul { a, b }, needs, "mul")
    }

    /// Elementwise exp. Inputs above the dtype-safe bound are an error:
    /// unbounded scales break invertibility in finite precision.
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let bound = T::EXP_INPUT_BOUND;
        for &v in self.value(a).data() {
            if v.to_f64() > bound {
                return Err(Error::ExpOverflow { value: v.to_f64(), bound });
            }
        }
        let v = par_map(self.value(a).data(), |x| x.exp());
        let t = Tensor::new(self.value(a).shape().to_vec(), v)?;
        let needs = self.needs(a);
        // bound check above caps the result below the dtype maximum
        Ok(self.push_pure(t, Op::Exp { a }, needs))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = par_map(self.value(a).data(), |x| x.tanh());
        let t = Tensor::new(self.value(a).shape().to_vec(), v)?;
        let needs = self.needs(a);
        Ok(self.push_pure(t, Op::Tanh { a }, needs))
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        let al = T::from_f64(alpha);
        let v = par_map(self.value(a).data(), |x| if x > T::zero() { x } else { x * al });
        let t = Tensor::new(self.value(a).shape().to_vec(), v)?;
        let needs = self.needs(a);
        Ok(self.push_pure(t, Op::LeakyRelu { a, alpha }, needs))
    }

    /// Multiply by a compile-time constant (not a tensor).
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cv = T::from_f64(c);
        let v = par_map(self.value(a).data(), |x| x * cv);
        let t = Tensor::new(self.value(a).shape().to_vec(), v)?;
        let needs = self.needs(a);
        self.push(t, Op::Scale { a, c }, needs, "scale")
    }

    /// Split an NCHW tensor into its first and second channel halves.
    pub fn channel_split(&mut self, x: NodeId) -> Result<(NodeId, NodeId)> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "channel_split",
                detail: format!("expected [N,C,H,W], got {s:?}"),
            });
        }
        let c = s[1];
        if c % 2 != 0 {
            return Err(Error::OddChannels { op: "channel_split", channels: c });
        }
        let lo = kernels::channel_slice(self.value(x), 0, c / 2)?;
        let hi = kernels::channel_slice(self.value(x), c / 2, c)?;
        let needs = self.needs(x);
        let a = self.push_pure(lo, Op::ChannelSlice { a: x, from: 0, to: c / 2 }, needs);
        let b = self.push_pure(hi, Op::ChannelSlice { a: x, from: c / 2, to: c }, needs);
        Ok((a, b))
    }

    /// Inverse of [`Graph::channel_split`].
    pub fn channel_concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::channel_concat(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_pure(v, Op::ChannelConcat { a, b }, needs))
    }

    pub fn pixel_unshuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let v = kernels::pixel_unshuffle(self.value(x), r)?;
        let needs = self.needs(x);
        Ok(self.push_pure(v, Op::PixelUnshuffle { a: x, r }, needs))
    }

    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let v = kernels::pixel_shuffle(self.value(x), r)?;
        let needs = self.needs(x);
        Ok(self.push_pure(v, Op::PixelShuffle { a: x, r }, needs))
    }

    /// Sum of all elements; the only reduction, producing a `[1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let mut acc = T::zero();
        for &v in self.value(a).data() {
            acc = acc + v;
        }
        let t = Tensor::new(vec![1], vec![acc])?;
        let needs = self.needs(a);
        self.push(t, Op::Sum { a }, needs, "sum")
    }

    /// Reverse-mode accumulation from a scalar loss. Visits each recorded op
    /// at most once, returns gradients for every `requires_grad` leaf, and
    /// clears the tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss { shape: self.value(loss).shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match self.nodes[idx].op.clone() {
                Op::Leaf => {
                    grads[idx] = Some(g); // keep for collection below
                }
                Op::Conv2d { x, w, b, padding } => {
                    let dy = Tensor::new(self.nodes[idx].value.shape().to_vec(), g)?;
                    let need_dx = self.nodes[x.0].needs_grad;
                    let out = kernels::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &self.nodes[b.0].value,
                        &dy,
                        padding,
                        need_dx,
                        &mut self.scratch,
                    )?;
                    if let Some(dx) = out.dx {
                        self.accumulate_owned(&mut grads, x, dx.into_data());
                    }
                    if self.needs(w) {
                        self.accumulate_owned(&mut grads, w, out.dw.into_data());
                    }
                    if self.needs(b) {
                        self.accumulate_owned(&mut grads, b, out.db.into_data());
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(a) && self.needs(b) {
                        self.accumulate(&mut grads, a, &g);
                        self.accumulate_owned(&mut grads, b, g);
                    } else if self.needs(a) {
                        self.accumulate_owned(&mut grads, a, g);
                    } else if self.needs(b) {
                        self.accumulate_owned(&mut grads, b, g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(b) {
                        let neg = par_map(&g, |v| -v);
                        self.accumulate_owned(&mut grads, b, neg);
                    }
                    if self.needs(a) {
                        self.accumulate_owned(&mut grads, a, g);
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da = par_zip_map(&g, self.value(b).data(), |g, b| g * b);
                        self.accumulate_owned(&mut grads, a, da);
                    }
                    if self.needs(b) {
                        let db = par_zip_map(&g, self.value(a).data(), |g, a| g * a);
                        self.accumulate_owned(&mut grads, b, db);
                    }
                }
                Op::Exp { a } => {
                    // d exp = exp(x) dx, reusing the stored output.
                    let da = par_zip_map(&g, self.nodes[idx].value.data(), |g, y| g * y);
                    self.accumulate_owned(&mut grads, a, da);
                }
                Op::Tanh { a } => {
                    let da = par_zip_map(&g, self.nodes[idx].value.data(), |g, y| g * (T::one() - y * y));
                    self.accumulate_owned(&mut grads, a, da);
                }
                Op::LeakyRelu { a, alpha } => {
                    let al = T::from_f64(alpha);
                    let da = par_zip_map(&g, self.value(a).data(), |g, x| {
                        if x > T::zero() {
                            g
                        } else {
                            g * al
                        }
                    });
                    self.accumulate_owned(&mut grads, a, da);
                }
                Op::Scale { a, c } => {
                    let cv = T::from_f64(c);
                    let da = par_map(&g, |g| g * cv);
                    self.accumulate_owned(&mut grads, a, da);
                }
                Op::ChannelSlice { a, from, to } => {
                    let shape = self.value(a).shape().to_vec();
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let hw = h * w;
                    let span = to - from;
                    let mut da = vec![T::zero(); n * c * hw];
                    for ni in 0..n {
                        da[(ni * c + from) * hw..(ni * c + to) * hw]
                            .copy_from_slice(&g[ni * span * hw..(ni + 1) * span * hw]);
                    }
                    self.accumulate_owned(&mut grads, a, da);
                }
                Op::ChannelConcat { a, b } => {
                    let sa = self.value(a).shape().to_vec();
                    let sb = self.value(b).shape().to_vec();
                    let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                    if self.needs(a) {
                        let mut da = vec![T::zero(); n * ca * hw];
                        for ni in 0..n {
                            da[ni * ca * hw..(ni + 1) * ca * hw].copy_from_slice(
                                &g[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw],
                            );
                        }
                        self.accumulate_owned(&mut grads, a, da);
                    }
                    if self.needs(b) {
                        let mut db = vec![T::zero(); n * cb * hw];
                        for ni in 0..n {
                            db[ni * cb * hw..(ni + 1) * cb * hw].copy_from_slice(
                                &g[ni * (ca + cb) * hw + ca * hw..(ni + 1) * (ca + cb) * hw],
                            );
                        }
                        self.accumulate_owned(&mut grads, b, db);
                    }
                }
                Op::PixelUnshuffle { a, r } => {
                    let gt = Tensor::new(self.nodes[idx].value.shape().to_vec(), g)?;
                    let da = kernels::pixel_shuffle(&gt, r)?;
                    self.accumulate_owned(&mut grads, a, da.into_data());
                }
                Op::PixelShuffle { a, r } => {
                    let gt = Tensor::new(self.nodes[idx].value.shape().to_vec(), g)?;
                    let da = kernels::pixel_unshuffle(&gt, r)?;
                    self.accumulate_owned(&mut grads, a, da.into_data());
                }
                Op::Sum { a } => {
                    let gv = g[0];
                    let da = vec![gv; self.value(a).numel()];
                    self.accumulate_owned(&mut grads, a, da);
                }
            }
        }

        let mut by_node: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let g = grads[idx].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                by_node[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        self.nodes.clear();
        Ok(Gradients { by_node })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, contribution: &[T]) {
        match &mut grads[id.0] {
            Some(existing) => par_add_assign(existing, contribution),
            slot @ None => *slot = Some(contribution.to_vec()),
        }
    }

    fn accumulate_owned(&self, grads: &mut [Option<Vec<T>>], id: NodeId, contribution: Vec<T>) {
        match &mut grads[id.0] {
            Some(existing) => par_add_assign(existing, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap().with_grad());
        let s = g.sum(x).unwrap();
        let mut grads = g.backward(s).unwrap();
        let gx = grads.take(x).unwrap();
        assert_eq!(gx.data(), &[1.0; 6]);
        assert!(g.is_empty(), "tape must be cleared after backward");
    }

    #[test]
    fn backward_of_sum_x_squared_is_2x() {
        let mut g = Graph::<f64>::new();
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let x = g.leaf(Tensor::new(vec![4], vals.clone()).unwrap().with_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let mut grads = g.backward(s).unwrap();
        let gx = grads.take(x).unwrap();
        for (gv, v) in gx.data().iter().zip(&vals) {
            assert_eq!(*gv, 2.0 * v);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn mul_by_exp_of_zero_is_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap());
        let z = g.leaf(Tensor::zeros(vec![3]));
        let e = g.exp(z).unwrap();
        let y = g.mul(x, e).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).data(), &[-0.2, 2.0]);
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![1], vec![100.0]).unwrap());
        assert!(matches!(g.exp(x), Err(Error::ExpOverflow { .. })));
    }

    #[test]
    fn binary_ops_require_equal_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(vec![2, 2]));
        let b = g.leaf(Tensor::zeros(vec![4]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn split_concat_roundtrip_on_tape() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![1, 2, 1, 1], vec![5.0, 7.0]).unwrap());
        let (a, b) = g.channel_split(x).unwrap();
        assert_eq!(g.value(a).data(), &[5.0]);
        assert_eq!(g.value(b).data(), &[7.0]);
        let y = g.channel_concat(a, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn odd_channel_split_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 3, 2, 2]));
        assert!(matches!(g.channel_split(x), Err(Error::OddChannels { .. })));
    }
}
