//! Reverse-mode scalar autodiff on a flat tape.
//!
//! Every differentiable quantity in the trainer is a [`Var`] recorded on a
//! [`Tape`]. Local partial derivatives are computed eagerly as operations are
//! recorded, so the backward sweep is a single reverse loop over the node
//! array. Leaves bind tape nodes to slots of a flat parameter vector; after
//! [`Tape::backward_sparse`] the per-slot adjoints come back in creation
//! order, which keeps gradient accumulation deterministic regardless of how
//! work was split across threads.
//!
//! The same math runs without a tape: [`Real`] is implemented for plain
//! `f64`, and all field/rendering/loss routines are generic over it. Both
//! instantiations execute the identical operation sequence, so the forward
//! value of the taped path is bit-equal to the plain path.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parent_a: u32,
    parent_b: u32,
    weight_a: f64,
    weight_b: f64,
}

#[derive(Default)]
struct TapeInner {
    values: Vec<f64>,
    nodes: Vec<Node>,
    /// (node index, parameter slot) pairs, in creation order.
    bindings: Vec<(u32, u32)>,
}

/// Wengert list with cached local partials.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                values: Vec::with_capacity(nodes),
                nodes: Vec::with_capacity(nodes),
                bindings: Vec::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: f64, node: Node) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len() as u32;
        inner.values.push(value);
        inner.nodes.push(node);
        idx
    }

    /// A constant: participates in values, receives no adjoint.
    pub fn constant(&self, value: f64) -> Var<'_> {
        let idx = self.push(
            value,
            Node { parent_a: NONE, parent_b: NONE, weight_a: 0.0, weight_b: 0.0 },
        );
        Var { tape: self, idx }
    }

    /// A leaf bound to `slot` of the flat parameter vector.
    pub fn leaf(&self, value: f64, slot: u32) -> Var<'_> {
        let idx = self.push(
            value,
            Node { parent_a: NONE, parent_b: NONE, weight_a: 0.0, weight_b: 0.0 },
        );
        self.inner.borrow_mut().bindings.push((idx, slot));
        Var { tape: self, idx }
    }

    /// Reverse sweep from `root` with seed `d(loss)/d(root)`.
    ///
    /// Returns `(slot, adjoint)` pairs in leaf-creation order; slots repeat
    /// when a parameter was fetched more than once.
    pub fn backward_sparse(&self, root: Var<'_>, seed: f64) -> Vec<(u32, f64)> {
        let inner = self.inner.borrow();
        debug_assert!(std::ptr::eq(root.tape, self));
        let mut adj = vec![0.0f64; inner.nodes.len()];
        adj[root.idx as usize] = seed;
        for i in (0..inner.nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = inner.nodes[i];
            if node.parent_a != NONE {
                adj[node.parent_a as usize] += node.weight_a * a;
            }
            if node.parent_b != NONE {
                adj[node.parent_b as usize] += node.weight_b * a;
            }
        }
        inner
            .bindings
            .iter()
            .map(|&(node, slot)| (slot, adj[node as usize]))
            .collect()
    }
}

/// Handle to one tape entry.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
}

impl<'t> Var<'t> {
    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: f64, weight: f64) -> Var<'t> {
        let idx = self.tape.push(
            value,
            Node { parent_a: self.idx, parent_b: NONE, weight_a: weight, weight_b: 0.0 },
        );
        Var { tape: self.tape, idx }
    }

    fn binary(self, rhs: Var<'t>, value: f64, wa: f64, wb: f64) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape));
        let idx = self.tape.push(
            value,
            Node { parent_a: self.idx, parent_b: rhs.idx, weight_a: wa, weight_b: wb },
        );
        Var { tape: self.tape, idx }
    }
}

/// Scalar usable by all field, rendering, and loss math.
///
/// Branching primitives (`min`, `max`, `abs`, `relu`, `clamp`) pick the
/// branch by forward value; at the kink the subgradient convention matches
/// symmetric central differences (`abs'(0) = 0`, `relu'(0) = 1/2`). The
/// half subgradient matters in practice: uniformly initialized fields put
/// every rendering alpha exactly on the clamp boundary, and a zero
/// subgradient there would block all range-loss signal at the first
/// iteration.
pub trait Real:
    Copy
    + Add<Self, Output = Self>
    + Sub<Self, Output = Self>
    + Mul<Self, Output = Self>
    + Div<Self, Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn recip(self) -> Self;
    fn abs(self) -> Self;
    /// `max(self, 0)`.
    fn relu(self) -> Self;
    fn min(self, other: Self) -> Self;
    fn max(self, other: Self) -> Self;
    fn clamp_const(self, lo: f64, hi: f64) -> Self;
    fn sq(self) -> Self {
        self * self
    }
    /// `a * (1 - t) + b * t` with a constant weight; one tape node.
    fn lerp_weighted(a: Self, b: Self, t: f64) -> Self;
}

impl Real for f64 {
    fn val(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn recip(self) -> Self {
        1.0 / self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
    fn clamp_const(self, lo: f64, hi: f64) -> Self {
        f64::clamp(self, lo, hi)
    }
    fn lerp_weighted(a: f64, b: f64, t: f64) -> f64 {
        a * (1.0 - t) + b * t
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.val() + rhs.val();
        self.binary(rhs, v, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.val() - rhs.val();
        self.binary(rhs, v, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.val(), rhs.val());
        self.binary(rhs, a * b, b, a)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.val(), rhs.val());
        self.binary(rhs, a / b, 1.0 / b, -a / (b * b))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.val(), -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.val() + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.val() - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.val() * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.unary(self.val() / rhs, 1.0 / rhs)
    }
}

impl<'t> Real for Var<'t> {
    fn val(self) -> f64 {
        self.tape.inner.borrow().values[self.idx as usize]
    }
    fn exp(self) -> Self {
        let e = self.val().exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        let v = self.val();
        self.unary(v.ln(), 1.0 / v)
    }
    fn ln_1p(self) -> Self {
        let v = self.val();
        self.unary(v.ln_1p(), 1.0 / (1.0 + v))
    }
    fn sqrt(self) -> Self {
        let s = self.val().sqrt();
        self.unary(s, 0.5 / s)
    }
    fn recip(self) -> Self {
        let v = self.val();
        self.unary(1.0 / v, -1.0 / (v * v))
    }
    fn abs(self) -> Self {
        let v = self.val();
        let w = if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(v.abs(), w)
    }
    fn relu(self) -> Self {
        let v = self.val();
        if v > 0.0 {
            self.unary(v, 1.0)
        } else if v == 0.0 {
            self.unary(0.0, 0.5)
        } else {
            self.unary(0.0, 0.0)
        }
    }
    fn min(self, other: Self) -> Self {
        if self.val() <= other.val() {
            self.binary(other, self.val(), 1.0, 0.0)
        } else {
            self.binary(other, other.val(), 0.0, 1.0)
        }
    }
    fn max(self, other: Self) -> Self {
        if self.val() >= other.val() {
            self.binary(other, self.val(), 1.0, 0.0)
        } else {
            self.binary(other, other.val(), 0.0, 1.0)
        }
    }
    fn clamp_const(self, lo: f64, hi: f64) -> Self {
        let v = self.val();
        if v < lo {
            self.unary(lo, 0.0)
        } else if v > hi {
            self.unary(hi, 0.0)
        } else {
            self.unary(v, 1.0)
        }
    }
    fn lerp_weighted(a: Var<'t>, b: Var<'t>, t: f64) -> Var<'t> {
        a.binary(b, a.val() * (1.0 - t) + b.val() * t, 1.0 - t, t)
    }
}

/// Sum with a fixed pairwise tree reduction order.
///
/// The result depends only on the order of `xs`, never on chunking or thread
/// count, which is what the deterministic loss reductions rely on.
pub fn pairwise_sum<S: Real>(xs: &[S]) -> Option<S> {
    match xs.len() {
        0 => None,
        1 => Some(xs[0]),
        n => {
            let mid = n / 2;
            Some(pairwise_sum(&xs[..mid]).unwrap() + pairwise_sum(&xs[mid..]).unwrap())
        }
    }
}

/// Pairwise sum over plain numbers, `0.0` when empty.
pub fn pairwise_sum_f64(xs: &[f64]) -> f64 {
    pairwise_sum(xs).unwrap_or(0.0)
}
