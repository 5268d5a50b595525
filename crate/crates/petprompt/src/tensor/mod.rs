//! Reverse-mode automatic differentiation over dense nd-arrays.
//!
//! All differentiable building blocks in this crate (prompt generation,
//! cross-attention fusion, transposed attention, the U-shape backbone) are
//! expressed as operations on a [`Tape`]. Each op computes its value eagerly
//! and records a closure that scatters the upstream gradient to its parents,
//! so a single `backward` pass yields analytic gradients for every parameter.
//!
//! The engine is generic over [`Elem`] (`f32` for training throughput, `f64`
//! for finite-difference verification). Everything is single-threaded and
//! allocation order is fixed, so repeated runs are bit-identical.

mod conv;
mod ops;
mod resize;

pub mod gradcheck;

pub use conv::{conv3d_shape, Conv3dSpec};

use ndarray::{ArrayD, NdFloat};
use num_traits::FromPrimitive;

/// Element type the tape operates on. Implemented for `f32` and `f64`.
pub trait Elem: NdFloat + FromPrimitive + std::iter::Sum + Default {
    /// Dtype code used in serialized checkpoints (0 = f32, 1 = f64).
    const DTYPE_CODE: u8;
    const DTYPE_NAME: &'static str;

    fn f(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    const DTYPE_CODE: u8 = 0;
    const DTYPE_NAME: &'static str = "f32";
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    const DTYPE_CODE: u8 = 1;
    const DTYPE_NAME: &'static str = "f64";
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

type BackFn<E> = Box<dyn Fn(&Tape<E>, &ArrayD<E>, &mut Grads<E>)>;

struct Node<E: Elem> {
    value: ArrayD<E>,
    needs_grad: bool,
    back: Option<BackFn<E>>,
}

/// Gradient accumulator, indexed by node id.
pub struct Grads<E: Elem> {
    slots: Vec<Option<ArrayD<E>>>,
}

impl<E: Elem> Grads<E> {
    fn new(len: usize) -> Self {
        let mut slots = Vec::with_capacity(len);
        slots.resize_with(len, || None);
        Grads { slots }
    }

    pub(crate) fn accum(&mut self, id: NodeId, g: ArrayD<E>) {
        match &mut self.slots[id.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Take ownership of the gradient accumulated for `id`, if any.
    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<E>> {
        self.slots[id.0].take()
    }

    pub fn get(&self, id: NodeId) -> Option<&ArrayD<E>> {
        self.slots[id.0].as_ref()
    }
}

/// Computation tape recording values and backward closures.
pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Insert a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: ArrayD<E>) -> NodeId {
        self.push(value, true, None)
    }

    /// Insert a non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<E>) -> NodeId {
        self.push(value, false, None)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<E> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: NodeId) -> E {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().next().copied().unwrap()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<E>,
        needs_grad: bool,
        back: Option<BackFn<E>>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            needs_grad,
            back: if needs_grad { back } else { None },
        });
        id
    }

    pub(crate) fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients; only
    /// leaves retain theirs (interior slots are consumed as the sweep passes).
    pub fn backward(&self, root: NodeId) -> Grads<E> {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward() root must be a scalar node"
        );
        let mut grads = Grads::new(self.nodes.len());
        grads.accum(root, ArrayD::from_elem(self.value(root).raw_dim(), E::one()));
        for i in (0..=root.0).rev() {
            if self.nodes[i].back.is_some() {
                if let Some(g) = grads.slots[i].take() {
                    let back = self.nodes[i].back.as_ref().unwrap();
                    back(self, &g, &mut grads);
                }
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD, IxDyn};

    fn a1(v: &[f64]) -> ArrayD<f64> {
        arr1(v).into_dyn()
    }

    #[test]
    fn add_mul_chain_gradients() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(a1(&[2.0, 3.0]));
        let y = t.leaf(a1(&[5.0, 7.0]));
        let p = t.mul(x, y);
        let s = t.sum_all(p);
        assert_eq!(t.scalar(s), 2.0 * 5.0 + 3.0 * 7.0);
        let mut g = t.backward(s);
        assert_eq!(g.take(x).unwrap(), a1(&[5.0, 7.0]));
        assert_eq!(g.take(y).unwrap(), a1(&[2.0, 3.0]));
    }

    #[test]
    fn constants_do_not_accumulate_gradients() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(a1(&[1.0]));
        let c = t.constant(a1(&[4.0]));
        let p = t.mul(x, c);
        let s = t.sum_all(p);
        let mut g = t.backward(s);
        assert_eq!(g.take(x).unwrap(), a1(&[4.0]));
        assert!(g.take(c).is_none());
    }

    #[test]
    fn grad_accumulates_over_fanout() {
        // s = x*x => ds/dx = 2x
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(a1(&[3.0]));
        let p = t.mul(x, x);
        let s = t.sum_all(p);
        let mut g = t.backward(s);
        assert_eq!(g.take(x).unwrap(), a1(&[6.0]));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut t: Tape<f64> = Tape::new();
            let x = t.leaf(ArrayD::from_shape_fn(IxDyn(&[4, 3]), |ix| {
                (ix[0] * 3 + ix[1]) as f64 * 0.37 - 1.0
            }));
            let r = t.relu(x);
            let s = t.sum_all(r);
            let mut g = t.backward(s);
            (t.scalar(s), g.take(x).unwrap())
        };
        let (s1, g1) = run();
        let (s2, g2) = run();
        assert_eq!(s1, s2);
        assert_eq!(g1, g2);
    }
}
