//! Reverse-mode automatic differentiation over an eager tape.
//!
//! A [`Tape`] records one computation graph per training step. Operations
//! execute immediately (values are available as soon as a node is built)
//! and each node remembers its inputs, so [`Tape::backward`] can replay the
//! graph in reverse and accumulate exact gradients. Node ids are handed out
//! in topological order by construction, which the backward pass exploits.
//!
//! Conventions:
//! * every value is a row-major [`Tensor`]; a batch of `B` per-vertex
//!   feature maps is a `(B·V) × F` stack of row blocks;
//! * `backward` may be called more than once on one tape (the adversarial
//!   step differentiates two losses); gradients accumulate;
//! * leaves created with `requires_grad = false` terminate gradient flow,
//!   which is also how parameters are frozen for a sub-step.
//!
//! Buffers are recycled through an internal size-binned pool across
//! [`Tape::reset`] calls, since consecutive training steps allocate
//! identical shapes.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::sparse::CsrMatrix;
use crate::tensor::{dgemm, dgemm_acc, Layout, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// A sparse matrix paired with its transpose, shared across tape nodes.
///
/// Forward passes apply `fwd`; backward passes apply `back = fwdᵀ` to pull
/// gradients the other way. Build once per graph operator and clone the
/// `Arc` freely.
#[derive(Debug)]
pub struct SparsePair {
    pub fwd: CsrMatrix,
    pub back: CsrMatrix,
}

impl SparsePair {
    /// Pair `m` with its transpose.
    pub fn new(m: CsrMatrix) -> Arc<Self> {
        let back = m.transpose();
        Arc::new(SparsePair { fwd: m, back })
    }
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    /// Chebyshev graph convolution: basis holds `[T₀x | T₁x | … | T_Kx]`.
    ChebConv { x: Var, w: Var, lap: Arc<SparsePair>, k: usize, blocks: usize, basis: Tensor },
    Spmm { x: Var, m: Arc<SparsePair>, blocks: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Affine { x: Var, scale: f64 },
    ConcatCols { a: Var, b: Var },
    TileRows { x: Var, reps: usize },
    Reshape { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    /// stats holds `[mean, inv_std]` per (block, group) pair.
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, blocks: usize, stats: Vec<f64> },
    Sigmoid { x: Var },
    Log { x: Var },
    Exp { x: Var },
    Abs { x: Var },
    Square { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum { x: Var },
    Mean { x: Var },
    PerRowL2 { x: Var },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
struct Pool {
    bins: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl Pool {
    /// A buffer of exactly `len` elements with unspecified contents.
    fn take(&mut self, len: usize) -> Vec<f64> {
        if let Some(list) = self.bins.get_mut(&len) {
            if let Some(v) = list.pop() {
                return v;
            }
        }
        vec![0.0; len]
    }

    fn put(&mut self, v: Vec<f64>) {
        if !v.is_empty() {
            self.bins.entry(v.len()).or_default().push(v);
        }
    }
}

/// Eager autodiff tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    pool: Pool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when nothing is recorded.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all nodes, returning their buffers to the pool for reuse.
    pub fn reset(&mut self) {
        for mut n in self.nodes.drain(..) {
            let pool = &mut self.pool;
            pool.put(std::mem::take(&mut n.value.data));
            if let Some(mut g) = n.grad.take() {
                pool.put(std::mem::take(&mut g.data));
            }
            if let Op::ChebConv { basis, .. } = &mut n.op {
                pool.put(std::mem::take(&mut basis.data));
            }
        }
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn alloc(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = self.pool.take(rows * cols);
        Tensor { rows, cols, data }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that gradient flow stops at (data, constants, frozen params).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Leaf whose gradient will be accumulated (a trainable parameter).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    // ---- operations ------------------------------------------------------

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, ak) = (self.nodes[a.0].value.rows, self.nodes[a.0].value.cols);
        let (bk, bn) = (self.nodes[b.0].value.rows, self.nodes[b.0].value.cols);
        assert_eq!(ak, bk, "matmul inner dimensions differ");
        let mut out = self.alloc(am, bn);
        dgemm(1.0, &self.nodes[a.0].value, Layout::Normal, &self.nodes[b.0].value, Layout::Normal, &mut out);
        let rg = self.needs(a) || self.needs(b);
        self.push(out, rg, Op::Matmul { a, b })
    }

    /// Chebyshev spectral convolution of order `k` on a scaled Laplacian.
    ///
    /// `x` is `(blocks·V) × F_in`; `w` is `((k+1)·F_in) × F_out`, the
    /// per-order weight matrices stacked vertically in order; output is
    /// `(blocks·V) × F_out` computed as `Σ_j T_j(L̃)·x·W_j` with a single
    /// GEMM against the stacked polynomial basis.
    pub fn cheb_conv(&mut self, lap: &Arc<SparsePair>, x: Var, w: Var, k: usize, blocks: usize) -> Var {
        let v = lap.fwd.rows;
        let (xr, f_in) = (self.nodes[x.0].value.rows, self.nodes[x.0].value.cols);
        assert_eq!(lap.fwd.cols, v, "laplacian must be square");
        assert_eq!(xr, blocks * v, "input rows do not match blocks x vertices");
        let (wr, f_out) = (self.nodes[w.0].value.rows, self.nodes[w.0].value.cols);
        assert_eq!(wr, (k + 1) * f_in, "stacked weight rows must be (k+1) x F_in");

        // Basis stack: column blocks [T₀x | T₁x | … | T_Kx].
        let mut basis = self.alloc(xr, (k + 1) * f_in);
        lap.fwd.chebyshev_basis_into(&self.nodes[x.0].value.data, f_in, blocks, k, &mut basis);
        let mut out = self.alloc(xr, f_out);
        dgemm(1.0, &basis, Layout::Normal, &self.nodes[w.0].value, Layout::Normal, &mut out);
        let rg = self.needs(x) || self.needs(w);
        self.push(out, rg, Op::ChebConv { x, w, lap: Arc::clone(lap), k, blocks, basis })
    }

    /// Apply a sparse matrix to each sample block (down/up-sampling,
    /// edge incidence): `x` is `(blocks·cols) × F`, out `(blocks·rows) × F`.
    pub fn spmm(&mut self, m: &Arc<SparsePair>, x: Var, blocks: usize) -> Var {
        let f = self.nodes[x.0].value.cols;
        assert_eq!(self.nodes[x.0].value.rows, blocks * m.fwd.cols, "spmm input rows");
        let mut out = self.alloc(blocks * m.fwd.rows, f);
        m.fwd.mul_blocks(&self.nodes[x.0].value.data, f, blocks, &mut out.data);
        let rg = self.needs(x);
        self.push(out, rg, Op::Spmm { x, m: Arc::clone(m), blocks })
    }

    /// Elementwise `a + b` (same shape).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, |t| Op::Add { a: t.0, b: t.1 })
    }

    /// Elementwise `a − b` (same shape).
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, |t| Op::Sub { a: t.0, b: t.1 })
    }

    /// Elementwise `a ⊙ b` (same shape).
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, |t| Op::Mul { a: t.0, b: t.1 })
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: impl Fn((Var, Var)) -> Op) -> Var {
        let (r, c) = (self.nodes[a.0].value.rows, self.nodes[a.0].value.cols);
        assert_eq!((r, c), (self.nodes[b.0].value.rows, self.nodes[b.0].value.cols), "elementwise shape mismatch");
        let mut out = self.alloc(r, c);
        for i in 0..r * c {
            out.data[i] = f(self.nodes[a.0].value.data[i], self.nodes[b.0].value.data[i]);
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(out, rg, mk((a, b)))
    }

    /// Add a `1 × C` bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (r, c) = (self.nodes[x.0].value.rows, self.nodes[x.0].value.cols);
        assert_eq!(self.nodes[bias.0].value.rows, 1, "bias must be a single row");
        assert_eq!(self.nodes[bias.0].value.cols, c, "bias width");
        let mut out = self.alloc(r, c);
        for i in 0..r {
            for j in 0..c {
                out.data[i * c + j] = self.nodes[x.0].value.data[i * c + j] + self.nodes[bias.0].value.data[j];
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        self.push(out, rg, Op::AddRow { x, bias })
    }

    /// `scale · x + shift` with scalar constants.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    /// Columns of `a` followed by columns of `b` (same row count).
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (r, ca) = (self.nodes[a.0].value.rows, self.nodes[a.0].value.cols);
        let cb = self.nodes[b.0].value.cols;
        assert_eq!(r, self.nodes[b.0].value.rows, "concat row mismatch");
        let mut out = self.alloc(r, ca + cb);
        for i in 0..r {
            let dst = &mut out.data[i * (ca + cb)..(i + 1) * (ca + cb)];
            dst[..ca].copy_from_slice(self.nodes[a.0].value.row(i));
            dst[ca..].copy_from_slice(self.nodes[b.0].value.row(i));
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(out, rg, Op::ConcatCols { a, b })
    }

    /// Repeat each row of `x` `reps` times: `B × C → (B·reps) × C`.
    ///
    /// Used to tile per-sample condition vectors onto every vertex of the
    /// sample's mesh block.
    pub fn tile_rows(&mut self, x: Var, reps: usize) -> Var {
        let (r, c) = (self.nodes[x.0].value.rows, self.nodes[x.0].value.cols);
        let mut out = self.alloc(r * reps, c);
        for i in 0..r {
            for k in 0..reps {
                let dst_row = i * reps + k;
                out.data[dst_row * c..(dst_row + 1) * c].copy_from_slice(self.nodes[x.0].value.row(i));
            }
        }
        let rg = self.needs(x);
        self.push(out, rg, Op::TileRows { x, reps })
    }

    /// Same elements, new shape (row-major order preserved).
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.nodes[x.0].value.len(), rows * cols, "reshape element count");
        let mut out = self.alloc(rows, cols);
        out.data.copy_from_slice(&self.nodes[x.0].value.data);
        let rg = self.needs(x);
        self.push(out, rg, Op::Reshape { x })
    }

    /// `max(x, slope·x)` for `0 < slope < 1`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, |v| if v >= 0.0 { v } else { slope * v }, Op::LeakyRelu { x, slope })
    }

    /// Group normalization with affine parameters.
    ///
    /// `x` is `(blocks·V) × C`; statistics are taken per sample block and
    /// per channel group (`C/groups` channels × V rows). `gamma`/`beta` are
    /// `1 × C`. Groups must divide the channel count.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, blocks: usize, eps: f64) -> Var {
        let (r, c) = (self.nodes[x.0].value.rows, self.nodes[x.0].value.cols);
        assert!(groups >= 1 && c % groups == 0, "groups {groups} do not divide channels {c}");
        assert_eq!(r % blocks, 0, "rows not divisible into blocks");
        assert_eq!(self.nodes[gamma.0].value.cols, c, "gamma width");
        assert_eq!(self.nodes[beta.0].value.cols, c, "beta width");
        let v = r / blocks;
        let cg = c / groups;
        let mut out = self.alloc(r, c);
        let mut stats = vec![0.0; blocks * groups * 2];
        {
            let xv = &self.nodes[x.0].value;
            let ga = &self.nodes[gamma.0].value;
            let be = &self.nodes[beta.0].value;
            for b in 0..blocks {
                for g in 0..groups {
                    let n = (v * cg) as f64;
                    let mut mean = 0.0;
                    for row in b * v..(b + 1) * v {
                        for col in g * cg..(g + 1) * cg {
                            mean += xv.data[row * c + col];
                        }
                    }
                    mean /= n;
                    let mut var = 0.0;
                    for row in b * v..(b + 1) * v {
                        for col in g * cg..(g + 1) * cg {
                            let d = xv.data[row * c + col] - mean;
                            var += d * d;
                        }
                    }
                    var /= n;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    stats[(b * groups + g) * 2] = mean;
                    stats[(b * groups + g) * 2 + 1] = inv_std;
                    for row in b * v..(b + 1) * v {
                        for col in g * cg..(g + 1) * cg {
                            let xhat = (xv.data[row * c + col] - mean) * inv_std;
                            out.data[row * c + col] = ga.data[col] * xhat + be.data[col];
                        }
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, rg, Op::GroupNorm { x, gamma, beta, groups, blocks, stats })
    }

    /// Logistic function.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    /// Natural log (inputs must be positive; clamp first if unsure).
    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Log { x })
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp { x })
    }

    /// Elementwise absolute value.
    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, f64::abs, Op::Abs { x })
    }

    /// Elementwise square.
    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square { x })
    }

    /// Clamp into `[lo, hi]`; gradient passes only where `lo ≤ x ≤ hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = (self.nodes[x.0].value.rows, self.nodes[x.0].value.cols);
        let mut out = self.alloc(r, c);
        for i in 0..r * c {
            out.data[i] = f(self.nodes[x.0].value.data[i]);
        }
        let rg = self.needs(x);
        self.push(out, rg, op)
    }

    /// Sum of all elements, as `1 × 1`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    /// Mean of all elements, as `1 × 1`.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len() as f64;
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s / n), rg, Op::Mean { x })
    }

    /// Euclidean norm of each row, as `R × 1`.
    pub fn per_row_l2(&mut self, x: Var) -> Var {
        let r = self.nodes[x.0].value.rows;
        let mut out = self.alloc(r, 1);
        for i in 0..r {
            out.data[i] = self.nodes[x.0].value.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let rg = self.needs(x);
        self.push(out, rg, Op::PerRowL2 { x })
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate gradients of scalar node `root` into every reachable node
    /// with `requires_grad`. May be called repeatedly; gradients add up.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        assert!(self.nodes[root.0].requires_grad, "backward root does not depend on any parameter");

        // Reachability from the root, restricted to grad-requiring nodes.
        let mut live = vec![false; root.0 + 1];
        live[root.0] = true;
        for id in (0..=root.0).rev() {
            if !live[id] || !self.nodes[id].requires_grad {
                continue;
            }
            for inp in op_inputs(&self.nodes[id].op) {
                if self.nodes[inp.0].requires_grad {
                    live[inp.0] = true;
                }
            }
        }

        self.ensure_grad(root);
        self.nodes[root.0].grad.as_mut().unwrap().data[0] += 1.0;

        for id in (0..=root.0).rev() {
            if !live[id] {
                continue;
            }
            self.step_backward(id);
        }
    }

    fn ensure_grad(&mut self, v: Var) {
        if self.nodes[v.0].grad.is_none() {
            let (r, c) = (self.nodes[v.0].value.rows, self.nodes[v.0].value.cols);
            let mut buf = self.pool.take(r * c);
            buf.fill(0.0);
            self.nodes[v.0].grad = Some(Tensor { rows: r, cols: c, data: buf });
        }
    }

    fn step_backward(&mut self, id: usize) {
        // Inputs always precede the node, so split the arena at `id`:
        // gradients of inputs live in `before`, the node's own state in
        // `node`. Gradient buffers for inputs are created beforehand.
        for inp in op_inputs(&self.nodes[id].op) {
            if self.nodes[inp.0].requires_grad {
                self.ensure_grad(inp);
            }
        }
        let (before, rest) = self.nodes.split_at_mut(id);
        let node = &mut rest[0];
        let g = match node.grad.as_ref() {
            Some(g) => g,
            None => return, // parked on a branch no backward call reached
        };
        let needs = |n: &Node| n.requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ai, bi) = (a.0, b.0);
                if needs(&before[ai]) {
                    // dA += dY · Bᵀ -- borrow B's value and A's grad disjointly.
                    let (bv, ag) = value_and_grad(before, bi, ai);
                    dgemm_acc(1.0, g, Layout::Normal, bv, Layout::Transposed, ag);
                }
                if needs(&before[bi]) {
                    // dB += Aᵀ · dY
                    let (av, bg) = value_and_grad(before, ai, bi);
                    dgemm_acc(1.0, av, Layout::Transposed, g, Layout::Normal, bg);
                }
            }
            Op::ChebConv { x, w, lap, k, blocks, basis } => {
                let (xi, wi) = (x.0, w.0);
                if needs(&before[wi]) {
                    // dW += basisᵀ · dY
                    let wg = before[wi].grad.as_mut().unwrap();
                    dgemm_acc(1.0, basis, Layout::Transposed, g, Layout::Normal, wg);
                }
                if needs(&before[xi]) {
                    // S = dY · Wᵀ gives per-order pullbacks S_j; then
                    // dX += Σ_j T_j(L̃ᵀ)·S_j evaluated with Clenshaw's
                    // backward recurrence (K sparse products total).
                    let f_in = before[xi].value.cols;
                    let rows = before[xi].value.rows;
                    let mut s = Tensor::zeros(rows, (k + 1) * f_in);
                    {
                        let wv = &before[wi].value;
                        dgemm(1.0, g, Layout::Normal, wv, Layout::Transposed, &mut s);
                    }
                    let xg = before[xi].grad.as_mut().unwrap();
                    accumulate_cheb_transpose(&lap.back, &s, *k, f_in, *blocks, xg);
                }
            }
            Op::Spmm { x, m, blocks } => {
                if needs(&before[x.0]) {
                    let f = g.cols;
                    let xg = before[x.0].grad.as_mut().unwrap();
                    let mut tmp = vec![0.0; xg.data.len()];
                    m.back.mul_blocks(&g.data, f, *blocks, &mut tmp);
                    for (d, s) in xg.data.iter_mut().zip(&tmp) {
                        *d += s;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if needs(&before[v.0]) {
                        let vg = before[v.0].grad.as_mut().unwrap();
                        for (d, s) in vg.data.iter_mut().zip(&g.data) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(&before[a.0]) {
                    let ag = before[a.0].grad.as_mut().unwrap();
                    for (d, s) in ag.data.iter_mut().zip(&g.data) {
                        *d += s;
                    }
                }
                if needs(&before[b.0]) {
                    let bg = before[b.0].grad.as_mut().unwrap();
                    for (d, s) in bg.data.iter_mut().zip(&g.data) {
                        *d -= s;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ai, bi) = (a.0, b.0);
                if needs(&before[ai]) {
                    let (bv, ag) = value_and_grad(before, bi, ai);
                    for i in 0..g.data.len() {
                        ag.data[i] += g.data[i] * bv.data[i];
                    }
                }
                if needs(&before[bi]) {
                    let (av, bg) = value_and_grad(before, ai, bi);
                    for i in 0..g.data.len() {
                        bg.data[i] += g.data[i] * av.data[i];
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if needs(&before[x.0]) {
                    let xg = before[x.0].grad.as_mut().unwrap();
                    for (d, s) in xg.data.iter_mut().zip(&g.data) {
                        *d += s;
                    }
                }
                if needs(&before[bias.0]) {
                    let c = g.cols;
                    let bg = before[bias.0].grad.as_mut().unwrap();
                    for r in 0..g.rows {
                        for j in 0..c {
                            bg.data[j] += g.data[r * c + j];
                        }
                    }
                }
            }
            Op::Affine { x, scale, .. } => {
                if needs(&before[x.0]) {
                    let sc = *scale;
                    let xg = before[x.0].grad.as_mut().unwrap();
                    for (d, s) in xg.data.iter_mut().zip(&g.data) {
                        *d += sc * s;
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let ca = before[a.0].value.cols;
                let cb = before[b.0].value.cols;
                if needs(&before[a.0]) {
                    let ag = before[a.0].grad.as_mut().unwrap();
                    for r in 0..g.rows {
                        for j in 0..ca {
                            ag.data[r * ca + j] += g.data[r * (ca + cb) + j];
                        }
                    }
                }
                if needs(&before[b.0]) {
                    let bg = before[b.0].grad.as_mut().unwrap();
                    for r in 0..g.rows {
                        for j in 0..cb {
                            bg.data[r * cb + j] += g.data[r * (ca + cb) + ca + j];
                        }
                    }
                }
            }
            Op::TileRows { x, reps } => {
                if needs(&before[x.0]) {
                    let c = g.cols;
                    let xg = before[x.0].grad.as_mut().unwrap();
                    for i in 0..xg.rows {
                        for k in 0..*reps {
                            let src = (i * reps + k) * c;
                            for j in 0..c {
                                xg.data[i * c + j] += g.data[src + j];
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if needs(&before[x.0]) {
                    let xg = before[x.0].grad.as_mut().unwrap();
                    for (d, s) in xg.data.iter_mut().zip(&g.data) {
                        *d += s;
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if needs(&before[x.0]) {
                    let sl = *slope;
                    let Node { value, grad, .. } = &mut before[x.0];
                    let xg = grad.as_mut().unwrap();
                    for i in 0..g.data.len() {
                        let pass = if value.data[i] >= 0.0 { 1.0 } else { sl };
                        xg.data[i] += pass * g.data[i];
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, blocks, stats } => {
                let c = g.cols;
                let cg = c / groups;
                let v = g.rows / blocks;
                let n = (v * cg) as f64;
                // dβ and dγ per channel.
                if needs(&before[beta.0]) {
                    let bg = before[beta.0].grad.as_mut().unwrap();
                    for r in 0..g.rows {
                        for j in 0..c {
                            bg.data[j] += g.data[r * c + j];
                        }
                    }
                }
                if needs(&before[gamma.0]) {
                    // dγ_c = Σ dy·x̂ ; recompute x̂ from saved stats.
                    let xv = &before[x.0].value;
                    let mut dgamma = vec![0.0; c];
                    for b in 0..*blocks {
                        for gr in 0..*groups {
                            let mean = stats[(b * groups + gr) * 2];
                            let inv_std = stats[(b * groups + gr) * 2 + 1];
                            for row in b * v..(b + 1) * v {
                                for col in gr * cg..(gr + 1) * cg {
                                    let xhat = (xv.data[row * c + col] - mean) * inv_std;
                                    dgamma[col] += g.data[row * c + col] * xhat;
                                }
                            }
                        }
                    }
                    let gg = before[gamma.0].grad.as_mut().unwrap();
                    for j in 0..c {
                        gg.data[j] += dgamma[j];
                    }
                }
                if needs(&before[x.0]) {
                    let gav: Vec<f64> = before[gamma.0].value.data.clone();
                    let mut contrib = vec![0.0; g.data.len()];
                    {
                        let xv = &before[x.0].value;
                        for b in 0..*blocks {
                            for gr in 0..*groups {
                                let mean = stats[(b * groups + gr) * 2];
                                let inv_std = stats[(b * groups + gr) * 2 + 1];
                                // m1 = mean(dŷ), m2 = mean(dŷ·x̂) over the group.
                                let mut m1 = 0.0;
                                let mut m2 = 0.0;
                                for row in b * v..(b + 1) * v {
                                    for col in gr * cg..(gr + 1) * cg {
                                        let dyh = g.data[row * c + col] * gav[col];
                                        let xhat = (xv.data[row * c + col] - mean) * inv_std;
                                        m1 += dyh;
                                        m2 += dyh * xhat;
                                    }
                                }
                                m1 /= n;
                                m2 /= n;
                                for row in b * v..(b + 1) * v {
                                    for col in gr * cg..(gr + 1) * cg {
                                        let dyh = g.data[row * c + col] * gav[col];
                                        let xhat = (xv.data[row * c + col] - mean) * inv_std;
                                        contrib[row * c + col] = inv_std * (dyh - m1 - xhat * m2);
                                    }
                                }
                            }
                        }
                    }
                    let xg = before[x.0].grad.as_mut().unwrap();
                    for (d, s) in xg.data.iter_mut().zip(&contrib) {
                        *d += s;
                    }
                }
            }
            Op::Sigmoid { x } => {
                if needs(&before[x.0]) {
                    let out = &node.value;
                    let xg = before[x.0].grad.as_mut().unwrap();
                    for i in 0..g.data.len() {
                        let s = out.data[i];
                        xg.data[i] += g.data[i] * s * (1.0 - s);
                    }
                }
            }
            Op::Log { x } => {
                if needs(&before[x.0]) {
                    let Node { value, grad, .. } = &mut before[x.0];
                    let xg = grad.as_mut().unwrap();
                    for i in 0..g.data.len() {
                        xg.data[i] += g.data[i] / value.data[i];
                    }
                }
            }
            Op::Exp { x } => {
                if needs(&before[x.0]) {
                    let out = &node.value;
                    let xg = before[x.0].grad.as_mut().unwrap();
                    for i in 0..g.data.len() {
                        xg.data[i] += g.data[i] * out.data[i];
                    }
                }
            }
            Op::Abs { x } => {
                if needs(&before[x.0]) {
                    let Node { value, grad, .. } = &mut before[x.0];
                    let xg = grad.as_mut().unwrap();
                    for i in 0..g.data.len() {
                        let v = value.data[i];
                        let sign = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        xg.data[i] += g.data[i] * sign;
                    }
                }
            }
            Op::Square { x } => {
                if needs(&before[x.0]) {
                    let Node { value, grad, .. } = &mut before[x.0];
                    let xg = grad.as_mut().unwrap();
                    for i in 0..g.data.len() {
                        xg.data[i] += 2.0 * value.data[i] * g.data[i];
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if needs(&before[x.0]) {
                    let (lo, hi) = (*lo, *hi);
                    let Node { value, grad, .. } = &mut before[x.0];
                    let xg = grad.as_mut().unwrap();
                    for i in 0..g.data.len() {
                        let v = value.data[i];
                        if v >= lo && v <= hi {
                            xg.data[i] += g.data[i];
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if needs(&before[x.0]) {
                    let s = g.data[0];
                    let xg = before[x.0].grad.as_mut().unwrap();
                    for d in xg.data.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::Mean { x } => {
                if needs(&before[x.0]) {
                    let xg = before[x.0].grad.as_mut().unwrap();
                    let s = g.data[0] / xg.data.len() as f64;
                    for d in xg.data.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::PerRowL2 { x } => {
                if needs(&before[x.0]) {
                    let out = &node.value;
                    let Node { value, grad, .. } = &mut before[x.0];
                    let xg = grad.as_mut().unwrap();
                    let c = value.cols;
                    for r in 0..out.rows {
                        let norm = out.data[r];
                        if norm > 0.0 {
                            let scale = g.data[r] / norm;
                            for j in 0..c {
                                xg.data[r * c + j] += scale * value.data[r * c + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Input edges of an op, for reachability walks.
fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::ConcatCols { a, b } => {
            vec![*a, *b]
        }
        Op::ChebConv { x, w, .. } => vec![*x, *w],
        Op::AddRow { x, bias } => vec![*x, *bias],
        Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Spmm { x, .. }
        | Op::Affine { x, .. }
        | Op::TileRows { x, .. }
        | Op::Reshape { x }
        | Op::LeakyRelu { x, .. }
        | Op::Sigmoid { x }
        | Op::Log { x }
        | Op::Exp { x }
        | Op::Abs { x }
        | Op::Square { x }
        | Op::Clamp { x, .. }
        | Op::Sum { x }
        | Op::Mean { x }
        | Op::PerRowL2 { x } => vec![*x],
    }
}

/// Borrow node `vi`'s value and node `gi`'s gradient buffer at once.
/// When the indices coincide the value is read through the same node.
fn value_and_grad(nodes: &mut [Node], vi: usize, gi: usize) -> (&Tensor, &mut Tensor) {
    if vi == gi {
        // Same node: value and grad are disjoint fields.
        let n = &mut nodes[gi];
        let g: *mut Tensor = n.grad.as_mut().unwrap();
        // Safe: `value` and `grad` never alias each other.
        unsafe { (&n.value, &mut *g) }
    } else if vi < gi {
        let (lo, hi) = nodes.split_at_mut(gi);
        (&lo[vi].value, hi[0].grad.as_mut().unwrap())
    } else {
        let (lo, hi) = nodes.split_at_mut(vi);
        (&hi[0].value, lo[gi].grad.as_mut().unwrap())
    }
}

/// `out += Σ_j T_j(M)·S_j` where `S = [S₀ | S₁ | … | S_K]` are column
/// blocks of width `f`, via Clenshaw's recurrence (K sparse products).
fn accumulate_cheb_transpose(m: &CsrMatrix, s: &Tensor, k: usize, f: usize, blocks: usize, out: &mut Tensor) {
    let rows = s.rows;
    let read = |j: usize, buf: &mut Vec<f64>| {
        buf.resize(rows * f, 0.0);
        for r in 0..rows {
            buf[r * f..(r + 1) * f].copy_from_slice(&s.data[r * s.cols + j * f..r * s.cols + (j + 1) * f]);
        }
    };
    if k == 0 {
        let mut s0 = Vec::new();
        read(0, &mut s0);
        for (d, v) in out.data.iter_mut().zip(&s0) {
            *d += v;
        }
        return;
    }
    // b_{K+1} = 0, b_K = S_K; b_j = 2·M·b_{j+1} − b_{j+2} + S_j;
    // result = M·b_1 − b_2 + S_0.
    let mut b_next = Vec::new(); // b_{j+1}
    read(k, &mut b_next);
    let mut b_after = vec![0.0; rows * f]; // b_{j+2}
    let mut sj = Vec::new();
    let mut prod = vec![0.0; rows * f];
    for j in (1..k).rev() {
        m.mul_blocks(&b_next, f, blocks, &mut prod);
        read(j, &mut sj);
        for i in 0..rows * f {
            prod[i] = 2.0 * prod[i] - b_after[i] + sj[i];
        }
        std::mem::swap(&mut b_after, &mut b_next);
        std::mem::swap(&mut b_next, &mut prod);
    }
    m.mul_blocks(&b_next, f, blocks, &mut prod);
    read(0, &mut sj);
    for i in 0..rows * f {
        out.data[i] += prod[i] - b_after[i] + sj[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_negative_side() {
        let mut t = Tape::new();
        let x = t.input(Tensor::from_vec(1, 2, vec![-1.0, 2.0]));
        let y = t.leaky_relu(x, 0.1);
        assert_eq!(t.value(y).data, vec![-0.1, 2.0]);
    }

    #[test]
    fn group_norm_constant_input_is_zero_before_affine() {
        let mut t = Tape::new();
        let x = t.input(Tensor::from_vec(4, 4, vec![3.5; 16]));
        let gamma = t.input(Tensor::from_vec(1, 4, vec![1.0; 4]));
        let beta = t.input(Tensor::from_vec(1, 4, vec![0.0; 4]));
        let y = t.group_norm(x, gamma, beta, 2, 1, 1e-5);
        for v in &t.value(y).data {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5]));
        let s = t.sum(x);
        t.backward(s);
        assert_eq!(t.grad(x).unwrap().data, vec![1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut t = Tape::new();
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let x = t.param(Tensor::from_vec(2, 2, vals.clone()));
        let sq = t.mul(x, x);
        let s = t.sum(sq);
        t.backward(s);
        for (g, v) in t.grad(x).unwrap().data.iter().zip(&vals) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_backward_matches_formula() {
        // d/dA sum(A·B) = 1·Bᵀ ; d/dB = Aᵀ·1
        let mut t = Tape::new();
        let a = t.param(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.param(Tensor::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let c = t.matmul(a, b);
        let s = t.sum(c);
        t.backward(s);
        // dA[i][k] = Σ_j B[k][j]
        assert_eq!(t.grad(a).unwrap().data, vec![11.0, 15.0, 11.0, 15.0]);
        // dB[k][j] = Σ_i A[i][k]
        assert_eq!(t.grad(b).unwrap().data, vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn detached_leaf_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(2.0));
        let y = t.square(x);
        let s = t.sum(y);
        // No parameter anywhere: root does not require grad.
        assert!(!t.nodes[s.0].requires_grad);
    }

    #[test]
    fn reset_recycles_buffers() {
        let mut t = Tape::new();
        for _ in 0..3 {
            let x = t.param(Tensor::from_vec(8, 8, vec![1.0; 64]));
            let y = t.square(x);
            let s = t.sum(y);
            t.backward(s);
            assert_eq!(t.grad(x).unwrap().data[0], 2.0);
            t.reset();
            assert!(t.is_empty());
        }
    }

    #[test]
    fn tile_rows_and_backward() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = t.tile_rows(x, 3);
        assert_eq!(t.value(y).rows, 6);
        assert_eq!(t.value(y).row(0), &[1.0, 2.0]);
        assert_eq!(t.value(y).row(2), &[1.0, 2.0]);
        assert_eq!(t.value(y).row(3), &[3.0, 4.0]);
        let s = t.sum(y);
        t.backward(s);
        assert_eq!(t.grad(x).unwrap().data, vec![3.0; 4]);
    }

    #[test]
    fn concat_cols_splits_gradient() {
        let mut t = Tape::new();
        let a = t.param(Tensor::from_vec(2, 1, vec![1.0, 2.0]));
        let b = t.param(Tensor::from_vec(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let cat = t.concat_cols(a, b);
        assert_eq!(t.value(cat).row(0), &[1.0, 3.0, 4.0]);
        let w = t.input(Tensor::from_vec(2, 3, vec![1.0, 10.0, 100.0, 1.0, 10.0, 100.0]));
        let prod = t.mul(cat, w);
        let s = t.sum(prod);
        t.backward(s);
        assert_eq!(t.grad(a).unwrap().data, vec![1.0, 1.0]);
        assert_eq!(t.grad(b).unwrap().data, vec![10.0, 100.0, 10.0, 100.0]);
    }
}
