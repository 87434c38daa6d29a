//! Reverse-mode differentiation tape.
//!
//! Operations record the tensors they produce together with a backward rule.
//! [`Tape::backward`] replays the rules in reverse recording order, visiting
//! every recorded operation exactly once, and leaves a populated gradient on
//! every tensor registered as trainable. The tape is single-threaded and
//! single-use: one forward recording, one backward sweep.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

/// Gradient accumulator handed to backward rules.
pub struct GradSink<'a, T: Element> {
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Element> GradSink<'_, T> {
    /// Accumulates a gradient contribution for `id`.
    pub fn add(&mut self, id: ValueId, contrib: Vec<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                debug_assert_eq!(acc.len(), contrib.len());
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a = *a + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }
}

/// Chain-rule propagation for one recorded operation.
pub trait BackwardRule<T: Element> {
    /// Routes `out_grad` (gradient of the loss w.r.t. this op's output) to
    /// the op's inputs. `out` is the recorded output value and `values` the
    /// whole tape arena, indexed by [`ValueId`].
    fn backward(&self, out: &Tensor<T>, out_grad: &[T], values: &[Tensor<T>], sink: &mut GradSink<T>);
}

struct Node<T: Element> {
    rule: Option<Box<dyn BackwardRule<T>>>,
    trainable: bool,
}

/// Recording tape: an arena of tensors plus the backward rule of each
/// recorded operation.
pub struct Tape<T: Element = f32> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    ran_backward: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), nodes: Vec::new(), ran_backward: false }
    }

    /// Registers a constant input (no gradient retained).
    pub fn leaf(&mut self, t: Tensor<T>) -> ValueId {
        self.insert(t, None, false)
    }

    /// Registers a trainable parameter; backward always populates its grad.
    pub fn param(&mut self, t: Tensor<T>) -> ValueId {
        self.insert(t, None, true)
    }

    pub(crate) fn push(&mut self, t: Tensor<T>, rule: Box<dyn BackwardRule<T>>) -> ValueId {
        self.insert(t, Some(rule), false)
    }

    fn insert(&mut self, t: Tensor<T>, rule: Option<Box<dyn BackwardRule<T>>>, trainable: bool) -> ValueId {
        let id = ValueId(self.values.len());
        self.values.push(t);
        self.nodes.push(Node { rule, trainable });
        id
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Gradient of the last backward pass w.r.t. `id`, if one reached it.
    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.values[id.0].grad()
    }

    /// Propagates from a scalar root back through every recorded operation.
    ///
    /// After this returns, gradients are attached to the arena tensors;
    /// trainable tensors that no path reached hold explicit zeros.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        if self.ran_backward {
            return Err(Error::InvalidArg("tape already ran backward".into()));
        }
        if self.values[root.0].len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward root must be scalar, got shape {:?}",
                self.values[root.0].shape()
            )));
        }
        self.ran_backward = true;

        let n = self.values.len();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(rule) = self.nodes[i].rule.take() {
                let mut sink = GradSink { grads: &mut grads };
                rule.backward(&self.values[i], &g, &self.values, &mut sink);
                self.nodes[i].rule = Some(rule);
            }
            grads[i] = Some(g);
        }

        for i in 0..n {
            if let Some(g) = grads[i].take() {
                self.values[i].set_grad(g);
            } else if self.nodes[i].trainable {
                let len = self.values[i].len();
                self.values[i].set_grad(vec![T::zero(); len]);
            }
        }
        Ok(())
    }

    // ── Elementwise operations ──────────────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, |x, y| x + y, EwKind::Add)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, |x, y| x - y, EwKind::Sub)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(a, b, |x, y| x * y, EwKind::Mul)
    }

    pub fn neg(&mut self, a: ValueId) -> ValueId {
        let out = map_tensor(self.value(a), |x| -x);
        self.push(out, Box::new(NegRule { a }))
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        let out = map_tensor(self.value(a), |x| x.exp());
        self.push(out, Box::new(ExpRule { a }))
    }

    /// Multiplication by a compile-time constant (not differentiated through).
    pub fn scale(&mut self, a: ValueId, c: T) -> ValueId {
        let out = map_tensor(self.value(a), |x| x * c);
        self.push(out, Box::new(ScaleRule { a, c }))
    }

    fn binary(
        &mut self,
        a: ValueId,
        b: ValueId,
        f: fn(T, T) -> T,
        kind: EwKind,
    ) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "elementwise {kind:?}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.shape(), data).expect("same shape");
        Ok(self.push(out, Box::new(BinaryRule { a, b, kind })))
    }

    // ── Reductions and shape adaptation ─────────────────────────────────

    /// Sums along one axis; output rank drops by one (a rank-1 input yields
    /// a shape-`[1]` scalar). Backward broadcasts the gradient back along
    /// the reduced axis.
    pub fn reduce_sum(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArg(format!(
                "reduce_sum axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let data = t.data();
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] = out[obase + i] + data[base + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(out, Box::new(ReduceSumRule { a, outer, mid, inner })))
    }

    /// Sums every element into a shape-`[1]` scalar.
    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let t = self.value(a);
        let mut acc = T::zero();
        for &v in t.data() {
            acc = acc + v;
        }
        let len = t.len();
        self.push(Tensor::scalar(acc), Box::new(SumAllRule { a, len }))
    }

    /// Reinterprets the flat data under a new shape of equal element count.
    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push(out, Box::new(ReshapeRule { a })))
    }

    /// Tiles a trailing extent-1 channel axis to `copies` channels.
    /// Backward sums the copies back into the single slot.
    pub fn expand_channels(&mut self, a: ValueId, copies: usize) -> Result<ValueId> {
        let t = self.value(a);
        let shape = t.shape();
        if *shape.last().unwrap() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expand_channels needs trailing extent 1, got {shape:?}"
            )));
        }
        if copies == 0 {
            return Err(Error::InvalidArg("expand_channels to zero copies".into()));
        }
        let mut out = Vec::with_capacity(t.len() * copies);
        for &v in t.data() {
            for _ in 0..copies {
                out.push(v);
            }
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = copies;
        let out = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(out, Box::new(ExpandRule { a, copies })))
    }
}

fn map_tensor<T: Element>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    let data: Vec<T> = t.data().iter().map(|&x| f(x)).collect();
    Tensor::from_vec(t.shape(), data).expect("same shape")
}

#[derive(Clone, Copy, Debug)]
enum EwKind {
    Add,
    Sub,
    Mul,
}

struct BinaryRule {
    a: ValueId,
    b: ValueId,
    kind: EwKind,
}

impl<T: Element> BackwardRule<T> for BinaryRule {
    fn backward(&self, _out: &Tensor<T>, g: &[T], values: &[Tensor<T>], sink: &mut GradSink<T>) {
        match self.kind {
            EwKind::Add => {
                sink.add(self.a, g.to_vec());
                sink.add(self.b, g.to_vec());
            }
            EwKind::Sub => {
                sink.add(self.a, g.to_vec());
                sink.add(self.b, g.iter().map(|&v| -v).collect());
            }
            EwKind::Mul => {
                let (va, vb) = (values[self.a.0].data(), values[self.b.0].data());
                sink.add(self.a, g.iter().zip(vb).map(|(&gv, &y)| gv * y).collect());
                sink.add(self.b, g.iter().zip(va).map(|(&gv, &x)| gv * x).collect());
            }
        }
    }
}

struct NegRule {
    a: ValueId,
}

impl<T: Element> BackwardRule<T> for NegRule {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _values: &[Tensor<T>], sink: &mut GradSink<T>) {
        sink.add(self.a, g.iter().map(|&v| -v).collect());
    }
}

struct ExpRule {
    a: ValueId,
}

impl<T: Element> BackwardRule<T> for ExpRule {
    fn backward(&self, out: &Tensor<T>, g: &[T], _values: &[Tensor<T>], sink: &mut GradSink<T>) {
        sink.add(self.a, g.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect());
    }
}

struct ScaleRule<T> {
    a: ValueId,
    c: T,
}

impl<T: Element> BackwardRule<T> for ScaleRule<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _values: &[Tensor<T>], sink: &mut GradSink<T>) {
        sink.add(self.a, g.iter().map(|&v| v * self.c).collect());
    }
}

struct ReduceSumRule {
    a: ValueId,
    outer: usize,
    mid: usize,
    inner: usize,
}

impl<T: Element> BackwardRule<T> for ReduceSumRule {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _values: &[Tensor<T>], sink: &mut GradSink<T>) {
        let mut da = vec![T::zero(); self.outer * self.mid * self.inner];
        for o in 0..self.outer {
            for m in 0..self.mid {
                let base = (o * self.mid + m) * self.inner;
                let gbase = o * self.inner;
                for i in 0..self.inner {
                    da[base + i] = g[gbase + i];
                }
            }
        }
        sink.add(self.a, da);
    }
}

struct SumAllRule {
    a: ValueId,
    len: usize,
}

impl<T: Element> BackwardRule<T> for SumAllRule {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _values: &[Tensor<T>], sink: &mut GradSink<T>) {
        sink.add(self.a, vec![g[0]; self.len]);
    }
}

struct ReshapeRule {
    a: ValueId,
}

impl<T: Element> BackwardRule<T> for ReshapeRule {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _values: &[Tensor<T>], sink: &mut GradSink<T>) {
        sink.add(self.a, g.to_vec());
    }
}

struct ExpandRule {
    a: ValueId,
    copies: usize,
}

impl<T: Element> BackwardRule<T> for ExpandRule {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _values: &[Tensor<T>], sink: &mut GradSink<T>) {
        let mut da = Vec::with_capacity(g.len() / self.copies);
        for chunk in g.chunks(self.copies) {
            let mut acc = T::zero();
            for &v in chunk {
                acc = acc + v;
            }
            da.push(acc);
        }
        sink.add(self.a, da);
    }
}
