//! Scalar reverse-mode automatic differentiation on a Wengert tape.
//!
//! Programs are recorded as a flat sequence of scalar nodes; each node stores
//! its value, an operation tag (so a recorded structure can be re-evaluated),
//! and its parents with precomputed local partials. [`Tape::backward`] seeds
//! the requested root with adjoint 1 and sweeps the tape once in reverse,
//! accumulating adjoints into every node, leaves included.
//!
//! The tape is first-order: one sweep yields gradients, and a caller who
//! needs second derivatives re-records the gradient expression as a fresh
//! program (the adjoints are themselves compositions of the same primitive
//! ops; see `second_derivative_by_rerecording` in the tests for the pattern).
//!
//! Recording is deterministic: the same sequence of calls with the same
//! input values produces bit-identical values and, after `backward`,
//! bit-identical gradients.

use thiserror::Error;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    /// Position of the node in recording order.
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Operation tag kept per node so a recorded structure can be replayed.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Sin,
    Pow(f64),
    /// Fused inner product; parents are interleaved `x0, y0, x1, y1, …`.
    Dot,
}

/// Arithmetic outside an op's domain: `log` of a non-positive value,
/// division by zero, or a fractional power of a negative/zero base.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("domain error in `{op}` at value {value}")]
pub struct DomainError {
    /// Name of the offending operation.
    pub op: &'static str,
    /// The input value that left the domain.
    pub value: f64,
}

/// Recorded program: values, op tags, and a flat parent/partial arena.
///
/// `rng_seed` is carried for stochastic ops; none of the current ops draws
/// randomness, so it is reserved and defaults to 0.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    vals: Vec<f64>,
    ops: Vec<Op>,
    spans: Vec<(u32, u32)>,
    parent_ids: Vec<u32>,
    parent_partials: Vec<f64>,
    /// Reserved for stochastic ops (none recorded by the current op set).
    pub rng_seed: u64,
}

impl Tape {
    /// Empty tape.
    pub fn new() -> Self {
        Self::default()
    }

    /// Empty tape with room for `nodes` nodes and `parents` parent slots.
    pub fn with_capacity(nodes: usize, parents: usize) -> Self {
        Tape {
            vals: Vec::with_capacity(nodes),
            ops: Vec::with_capacity(nodes),
            spans: Vec::with_capacity(nodes),
            parent_ids: Vec::with_capacity(parents),
            parent_partials: Vec::with_capacity(parents),
            rng_seed: 0,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.vals.len()
    }

    /// True when nothing has been recorded.
    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Drop all nodes but keep allocations for reuse.
    pub fn clear(&mut self) {
        self.vals.clear();
        self.ops.clear();
        self.spans.clear();
        self.parent_ids.clear();
        self.parent_partials.clear();
    }

    /// Value of a recorded node.
    #[inline]
    pub fn value(&self, id: NodeId) -> f64 {
        self.vals[id.index()]
    }

    /// Overwrite a leaf's value (used together with [`Tape::recompute_values`]
    /// to re-evaluate a recorded structure at new inputs).
    pub fn set_leaf(&mut self, id: NodeId, value: f64) {
        debug_assert_eq!(self.ops[id.index()], Op::Leaf, "set_leaf on a non-leaf");
        self.vals[id.index()] = value;
    }

    // ── recording ────────────────────────────────────────────────────────

    #[inline]
    fn push(&mut self, val: f64, op: Op, parents: &[(NodeId, f64)]) -> NodeId {
        let start = self.parent_ids.len() as u32;
        for &(pid, partial) in parents {
            self.parent_ids.push(pid.0);
            self.parent_partials.push(partial);
        }
        self.vals.push(val);
        self.ops.push(op);
        self.spans.push((start, parents.len() as u32));
        NodeId((self.vals.len() - 1) as u32)
    }

    /// Record an input (or constant) node.
    #[inline]
    pub fn leaf(&mut self, value: f64) -> NodeId {
        self.push(value, Op::Leaf, &[])
    }

    /// `a + b`
    #[inline]
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.index()] + self.vals[b.index()];
        self.push(v, Op::Add, &[(a, 1.0), (b, 1.0)])
    }

    /// `a - b`
    #[inline]
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.index()] - self.vals[b.index()];
        self.push(v, Op::Sub, &[(a, 1.0), (b, -1.0)])
    }

    /// `a * b`
    #[inline]
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.vals[a.index()], self.vals[b.index()]);
        self.push(av * bv, Op::Mul, &[(a, bv), (b, av)])
    }

    /// `a / b`; division by zero is a [`DomainError`].
    #[inline]
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DomainError> {
        let (av, bv) = (self.vals[a.index()], self.vals[b.index()]);
        if bv == 0.0 {
            return Err(DomainError { op: "div", value: bv });
        }
        let v = av / bv;
        Ok(self.push(v, Op::Div, &[(a, 1.0 / bv), (b, -av / (bv * bv))]))
    }

    /// `-a`
    #[inline]
    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.vals[a.index()];
        self.push(v, Op::Neg, &[(a, -1.0)])
    }

    /// `exp(a)`
    #[inline]
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.index()].exp();
        self.push(v, Op::Exp, &[(a, v)])
    }

    /// `ln(a)`; non-positive input is a [`DomainError`].
    #[inline]
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DomainError> {
        let av = self.vals[a.index()];
        if av <= 0.0 {
            return Err(DomainError { op: "log", value: av });
        }
        Ok(self.push(av.ln(), Op::Log, &[(a, 1.0 / av)]))
    }

    /// `tanh(a)`
    #[inline]
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.index()].tanh();
        self.push(v, Op::Tanh, &[(a, 1.0 - v * v)])
    }

    /// `sin(a)`
    #[inline]
    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let av = self.vals[a.index()];
        self.push(av.sin(), Op::Sin, &[(a, av.cos())])
    }

    /// `a^k` for a constant real exponent. Fractional powers of negative
    /// bases, negative powers of zero, and exponents that would make the
    /// local derivative non-finite at zero are [`DomainError`]s.
    pub fn powf(&mut self, a: NodeId, k: f64) -> Result<NodeId, DomainError> {
        let av = self.vals[a.index()];
        if av < 0.0 && k.fract() != 0.0 {
            return Err(DomainError { op: "pow", value: av });
        }
        if av == 0.0 && k < 1.0 && k != 0.0 {
            return Err(DomainError { op: "pow", value: av });
        }
        let v = av.powf(k);
        let partial = if k == 0.0 { 0.0 } else { k * av.powf(k - 1.0) };
        Ok(self.push(v, Op::Pow(k), &[(a, partial)]))
    }

    /// Fused inner product `Σ_i x_i · y_i` recorded as a single node.
    ///
    /// Accumulation runs in index order, so the value is reproducible
    /// bit-for-bit by [`Tape::recompute_values`].
    pub fn dot(&mut self, xs: &[NodeId], ys: &[NodeId]) -> NodeId {
        assert_eq!(xs.len(), ys.len(), "dot: length mismatch");
        let start = self.parent_ids.len() as u32;
        let mut acc = 0.0;
        for (&x, &y) in xs.iter().zip(ys) {
            let (xv, yv) = (self.vals[x.index()], self.vals[y.index()]);
            acc += xv * yv;
            self.parent_ids.push(x.0);
            self.parent_partials.push(yv);
            self.parent_ids.push(y.0);
            self.parent_partials.push(xv);
        }
        self.vals.push(acc);
        self.ops.push(Op::Dot);
        self.spans.push((start, (xs.len() * 2) as u32));
        NodeId((self.vals.len() - 1) as u32)
    }

    /// Dense matrix–vector convenience: `w` is row-major `rows × cols`,
    /// recorded as one fused dot node per output row.
    pub fn matvec(&mut self, w: &[NodeId], x: &[NodeId], rows: usize, cols: usize) -> Vec<NodeId> {
        assert_eq!(w.len(), rows * cols, "matvec: weight shape mismatch");
        assert_eq!(x.len(), cols, "matvec: input length mismatch");
        (0..rows)
            .map(|r| self.dot(&w[r * cols..(r + 1) * cols], x))
            .collect()
    }

    // ── evaluation and differentiation ───────────────────────────────────

    /// Re-evaluate every node's value from the recorded structure, in
    /// recording order. With unchanged leaf values this reproduces the
    /// recorded values bit-for-bit; after [`Tape::set_leaf`] it evaluates the
    /// same program at the new inputs.
    ///
    /// Local partials are refreshed alongside values so a subsequent
    /// [`Tape::backward`] matches the new point.
    pub fn recompute_values(&mut self) {
        for i in 0..self.vals.len() {
            let (start, len) = self.spans[i];
            let (s, l) = (start as usize, len as usize);
            match self.ops[i] {
                Op::Leaf => {}
                Op::Add => {
                    let (a, b) = (self.parent_ids[s] as usize, self.parent_ids[s + 1] as usize);
                    self.vals[i] = self.vals[a] + self.vals[b];
                }
                Op::Sub => {
                    let (a, b) = (self.parent_ids[s] as usize, self.parent_ids[s + 1] as usize);
                    self.vals[i] = self.vals[a] - self.vals[b];
                }
                Op::Mul => {
                    let (a, b) = (self.parent_ids[s] as usize, self.parent_ids[s + 1] as usize);
                    self.vals[i] = self.vals[a] * self.vals[b];
                    self.parent_partials[s] = self.vals[b];
                    self.parent_partials[s + 1] = self.vals[a];
                }
                Op::Div => {
                    let (a, b) = (self.parent_ids[s] as usize, self.parent_ids[s + 1] as usize);
                    let (av, bv) = (self.vals[a], self.vals[b]);
                    self.vals[i] = av / bv;
                    self.parent_partials[s] = 1.0 / bv;
                    self.parent_partials[s + 1] = -av / (bv * bv);
                }
                Op::Neg => {
                    let a = self.parent_ids[s] as usize;
                    self.vals[i] = -self.vals[a];
                }
                Op::Exp => {
                    let a = self.parent_ids[s] as usize;
                    let v = self.vals[a].exp();
                    self.vals[i] = v;
                    self.parent_partials[s] = v;
                }
                Op::Log => {
                    let a = self.parent_ids[s] as usize;
                    self.vals[i] = self.vals[a].ln();
                    self.parent_partials[s] = 1.0 / self.vals[a];
                }
                Op::Tanh => {
                    let a = self.parent_ids[s] as usize;
                    let v = self.vals[a].tanh();
                    self.vals[i] = v;
                    self.parent_partials[s] = 1.0 - v * v;
                }
                Op::Sin => {
                    let a = self.parent_ids[s] as usize;
                    self.vals[i] = self.vals[a].sin();
                    self.parent_partials[s] = self.vals[a].cos();
                }
                Op::Pow(k) => {
                    let a = self.parent_ids[s] as usize;
                    let av = self.vals[a];
                    self.vals[i] = av.powf(k);
                    self.parent_partials[s] =
                        if k == 0.0 { 0.0 } else { k * av.powf(k - 1.0) };
                }
                Op::Dot => {
                    let mut acc = 0.0;
                    let mut j = s;
                    while j + 1 < s + l {
                        let (xv, yv) = (
                            self.vals[self.parent_ids[j] as usize],
                            self.vals[self.parent_ids[j + 1] as usize],
                        );
                        acc += xv * yv;
                        self.parent_partials[j] = yv;
                        self.parent_partials[j + 1] = xv;
                        j += 2;
                    }
                    self.vals[i] = acc;
                }
            }
        }
    }

    /// Reverse sweep from `root`: returns the adjoint of every node,
    /// indexed by [`NodeId::index`]. `d root / d node`.
    pub fn backward(&self, root: NodeId) -> Vec<f64> {
        let mut grads = Vec::new();
        self.backward_into(root, &mut grads);
        grads
    }

    /// [`Tape::backward`] into a reusable buffer (resized and zeroed here).
    pub fn backward_into(&self, root: NodeId, grads: &mut Vec<f64>) {
        grads.clear();
        grads.resize(self.vals.len(), 0.0);
        grads[root.index()] = 1.0;
        for i in (0..=root.index()).rev() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            let (start, len) = self.spans[i];
            let (s, l) = (start as usize, len as usize);
            for j in s..s + l {
                grads[self.parent_ids[j] as usize] += self.parent_partials[j] * g;
            }
        }
    }

    /// Adjoint of a single input: `d root / d input`.
    pub fn grad_wrt_input(&self, root: NodeId, input: NodeId) -> f64 {
        self.backward(root)[input.index()]
    }
}

// ── tests ────────────────────────────────────────────────────────────────
