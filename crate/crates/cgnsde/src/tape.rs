//! Reverse-mode automatic differentiation on an arena tape.
//!
//! The training losses differentiate through long unrolled recursions (model
//! forecasts and the posterior-moment filter), so the tape is built around
//! two ideas that keep those recordings cheap:
//!
//! * **Vector-level nodes.**  Every operation acts on whole vectors or
//!   matrices, so a filter step costs a few dozen nodes instead of thousands
//!   of scalar nodes.
//! * **Views are free.**  A [`Var`] is an offset/shape triple into one flat
//!   value arena.  Slicing a parameter vector into weight matrices, or
//!   reading a sub-range of a state, allocates nothing and records nothing:
//!   the adjoint buffer mirrors the value arena, so adjoints written through
//!   a view accumulate directly into the viewed storage.  Parameters shared
//!   by many model sites therefore receive the summed gradient with no
//!   bookkeeping.
//!
//! Recording and plain evaluation share one code path: evaluate, then either
//! keep the tape for [`Tape::backward`] or roll it back with
//! [`Tape::truncate`] and carry values forward as fresh leaves.  Both modes
//! execute identical kernels in identical order, so they produce bitwise
//! identical values.

use crate::error::{Error, Result};
use crate::linalg;

/// Default cap on recorded nodes (roughly a few GB of arena at the typical
/// node-to-value ratio); guards against runaway recordings.
const DEFAULT_NODE_CAP: usize = 64_000_000;

/// Handle to a value (scalar, vector, or row-major matrix) on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    off: u32,
    rows: u32,
    cols: u32,
}

impl Var {
    /// Number of scalar entries.
    pub fn len(&self) -> usize {
        (self.rows * self.cols) as usize
    }

    /// Shape as `(rows, cols)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.rows as usize, self.cols as usize)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.off as usize..self.off as usize + self.len()
    }
}

/// Recorded operation; stores operand handles plus any constant payload.
#[derive(Debug, Clone, Copy)]
enum Op {
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Scale { a: Var, c: f64, out: Var },
    AddScaled { a: Var, b: Var, c: f64, out: Var },
    Mul { a: Var, b: Var, out: Var },
    MulScalar { s: Var, a: Var, out: Var },
    MatMul { a: Var, b: Var, out: Var },
    Transpose { a: Var, out: Var },
    SymmetrizeSq { a: Var, out: Var },
    Tanh { a: Var, out: Var },
    Dot { a: Var, b: Var, out: Var },
    SumSq { a: Var, out: Var },
    Gather { a: Var, idx: (u32, u32), out: Var },
    AddAt { base: Var, src: Var, pos: (u32, u32), out: Var },
    Assemble { parts: (u32, u32), out: Var },
    AddDiag { a: Var, out: Var },
    SpdRepair { a: Var, out: Var },
    LogDetSpd { a: Var, out: Var },
    InvQuadForm { m: Var, d: Var, out: Var },
}

/// Snapshot of the tape extent, for later rollback via [`Tape::truncate`].
#[derive(Debug, Clone, Copy)]
pub struct Mark {
    nodes: usize,
    vals: usize,
    aux: usize,
    parts: usize,
}

/// Arena-based reverse-mode tape.
pub struct Tape {
    vals: Vec<f64>,
    adj: Vec<f64>,
    nodes: Vec<Op>,
    aux: Vec<u32>,
    // (source, offset into `aux` of its position list) pairs for Assemble.
    parts: Vec<(Var, u32)>,
    node_cap: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_node_cap(DEFAULT_NODE_CAP)
    }

    /// Creates a tape that reports [`Error::TapeOverflow`] from
    /// [`Tape::check_budget`] once more than `node_cap` nodes are recorded.
    pub fn with_node_cap(node_cap: usize) -> Self {
        Tape {
            vals: Vec::new(),
            adj: Vec::new(),
            nodes: Vec::new(),
            aux: Vec::new(),
            parts: Vec::new(),
            node_cap,
        }
    }

    /// Number of recorded nodes.
    pub fn nodes_len(&self) -> usize {
        self.nodes.len()
    }

    /// Number of arena entries currently allocated.
    pub fn vals_len(&self) -> usize {
        self.vals.len()
    }

    /// Errors once the recording exceeds the configured node cap.  Loss
    /// builders call this at step granularity so an over-long recording is
    /// caught before it exhausts memory.
    pub fn check_budget(&self) -> Result<()> {
        if self.nodes.len() > self.node_cap {
            return Err(Error::TapeOverflow {
                nodes: self.nodes.len(),
                cap: self.node_cap,
            });
        }
        Ok(())
    }

    /// Drops all recordings but keeps allocated capacity for reuse.
    pub fn clear(&mut self) {
        self.vals.clear();
        self.adj.clear();
        self.nodes.clear();
        self.aux.clear();
        self.parts.clear();
    }

    /// Snapshot of the current extent.
    pub fn mark(&self) -> Mark {
        Mark {
            nodes: self.nodes.len(),
            vals: self.vals.len(),
            aux: self.aux.len(),
            parts: self.parts.len(),
        }
    }

    /// Rolls the tape back to `mark`, invalidating every `Var` created
    /// after it.  Values that must survive should be copied out first and
    /// re-interned with [`Tape::leaf`].
    pub fn truncate(&mut self, mark: Mark) {
        assert!(
            mark.nodes <= self.nodes.len()
                && mark.vals <= self.vals.len()
                && mark.aux <= self.aux.len()
                && mark.parts <= self.parts.len(),
            "mark is ahead of the tape"
        );
        self.nodes.truncate(mark.nodes);
        self.vals.truncate(mark.vals);
        self.aux.truncate(mark.aux);
        self.parts.truncate(mark.parts);
    }

    fn alloc(&mut self, rows: usize, cols: usize) -> Var {
        let off = self.vals.len();
        self.vals.resize(off + rows * cols, 0.0);
        Var {
            off: u32::try_from(off).expect("tape arena exceeds u32 addressing"),
            rows: rows as u32,
            cols: cols as u32,
        }
    }

    /// Interns a constant or parameter block; not differentiated through
    /// unless its adjoint region is read back deliberately.
    pub fn leaf(&mut self, data: &[f64], rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf data has wrong length");
        let v = self.alloc(rows, cols);
        self.vals[v.range()].copy_from_slice(data);
        v
    }

    /// Interns a single scalar.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(&[value], 1, 1)
    }

    /// Allocates a zero-initialized leaf.
    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.alloc(rows, cols)
    }

    /// Zero-copy reshaping view of a contiguous element range of `v`.
    ///
    /// Adjoints written through the view accumulate into `v`'s storage, so
    /// gradients of shared parameters sum automatically.
    pub fn view(&self, v: Var, elem_off: usize, rows: usize, cols: usize) -> Var {
        assert!(
            elem_off + rows * cols <= v.len(),
            "view escapes the parent variable"
        );
        Var {
            off: v.off + elem_off as u32,
            rows: rows as u32,
            cols: cols as u32,
        }
    }

    /// Values of `v`.
    pub fn read(&self, v: Var) -> &[f64] {
        &self.vals[v.range()]
    }

    /// Scalar value of a 1x1 variable.
    pub fn value(&self, v: Var) -> f64 {
        assert_eq!(v.len(), 1, "value() needs a scalar variable");
        self.vals[v.off as usize]
    }

    /// Adjoint of `v` after [`Tape::backward`].
    pub fn adjoint(&self, v: Var) -> &[f64] {
        &self.adj[v.range()]
    }

    fn push(&mut self, op: Op) {
        self.nodes.push(op);
    }

    /// Elementwise sum of same-shape variables.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = self.alloc(a.rows as usize, a.cols as usize);
        for i in 0..a.len() {
            self.vals[out.off as usize + i] =
                self.vals[a.off as usize + i] + self.vals[b.off as usize + i];
        }
        self.push(Op::Add { a, b, out });
        out
    }

    /// Elementwise difference of same-shape variables.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = self.alloc(a.rows as usize, a.cols as usize);
        for i in 0..a.len() {
            self.vals[out.off as usize + i] =
                self.vals[a.off as usize + i] - self.vals[b.off as usize + i];
        }
        self.push(Op::Sub { a, b, out });
        out
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.alloc(a.rows as usize, a.cols as usize);
        for i in 0..a.len() {
            self.vals[out.off as usize + i] = c * self.vals[a.off as usize + i];
        }
        self.push(Op::Scale { a, c, out });
        out
    }

    /// `a + c * b` with constant `c`; the workhorse of explicit Euler steps.
    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Var {
        assert_eq!(a.shape(), b.shape(), "add_scaled shape mismatch");
        let out = self.alloc(a.rows as usize, a.cols as usize);
        for i in 0..a.len() {
            self.vals[out.off as usize + i] =
                self.vals[a.off as usize + i] + c * self.vals[b.off as usize + i];
        }
        self.push(Op::AddScaled { a, b, c, out });
        out
    }

    /// Elementwise (Hadamard) product of same-shape variables.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = self.alloc(a.rows as usize, a.cols as usize);
        for i in 0..a.len() {
            self.vals[out.off as usize + i] =
                self.vals[a.off as usize + i] * self.vals[b.off as usize + i];
        }
        self.push(Op::Mul { a, b, out });
        out
    }

    /// Product of a scalar variable with a tensor variable.
    pub fn mul_scalar(&mut self, s: Var, a: Var) -> Var {
        assert_eq!(s.len(), 1, "mul_scalar needs a scalar first operand");
        let sv = self.vals[s.off as usize];
        let out = self.alloc(a.rows as usize, a.cols as usize);
        for i in 0..a.len() {
            self.vals[out.off as usize + i] = sv * self.vals[a.off as usize + i];
        }
        self.push(Op::MulScalar { s, a, out });
        out
    }

    /// Matrix product `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
        let (m, k, n) = (a.rows as usize, a.cols as usize, b.cols as usize);
        let out = self.alloc(m, n);
        for i in 0..m {
            for l in 0..k {
                let ail = self.vals[a.off as usize + i * k + l];
                if ail == 0.0 {
                    continue;
                }
                for j in 0..n {
                    self.vals[out.off as usize + i * n + j] +=
                        ail * self.vals[b.off as usize + l * n + j];
                }
            }
        }
        self.push(Op::MatMul { a, b, out });
        out
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = a.shape();
        let out = self.alloc(n, m);
        for i in 0..m {
            for j in 0..n {
                self.vals[out.off as usize + j * m + i] = self.vals[a.off as usize + i * n + j];
            }
        }
        self.push(Op::Transpose { a, out });
        out
    }

    /// Symmetric part `(a + a^T) / 2` of a square matrix; writes the same
    /// value to both mirror entries, so the result is bitwise symmetric.
    pub fn symmetrize_sq(&mut self, a: Var) -> Var {
        assert_eq!(a.rows, a.cols, "symmetrize needs a square matrix");
        let n = a.rows as usize;
        let out = self.alloc(n, n);
        for i in 0..n {
            for j in 0..n {
                let v = 0.5 * (self.vals[a.off as usize + i * n + j]
                    + self.vals[a.off as usize + j * n + i]);
                self.vals[out.off as usize + i * n + j] = v;
            }
        }
        self.push(Op::SymmetrizeSq { a, out });
        out
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.alloc(a.rows as usize, a.cols as usize);
        for i in 0..a.len() {
            self.vals[out.off as usize + i] = self.vals[a.off as usize + i].tanh();
        }
        self.push(Op::Tanh { a, out });
        out
    }

    /// Inner product of two equal-length variables (shapes may differ).
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.len(), b.len(), "dot length mismatch");
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += self.vals[a.off as usize + i] * self.vals[b.off as usize + i];
        }
        let out = self.alloc(1, 1);
        self.vals[out.off as usize] = acc;
        self.push(Op::Dot { a, b, out });
        out
    }

    /// Sum of squared entries.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let mut acc = 0.0;
        for i in 0..a.len() {
            let v = self.vals[a.off as usize + i];
            acc += v * v;
        }
        let out = self.alloc(1, 1);
        self.vals[out.off as usize] = acc;
        self.push(Op::SumSq { a, out });
        out
    }

    /// Column vector `out[i] = a[idx[i]]`; indices may repeat.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let aux_start = self.aux.len();
        for &i in idx {
            assert!(i < a.len(), "gather index out of range");
            self.aux.push(i as u32);
        }
        let out = self.alloc(idx.len(), 1);
        for (o, &i) in idx.iter().enumerate() {
            self.vals[out.off as usize + o] = self.vals[a.off as usize + i];
        }
        self.push(Op::Gather {
            a,
            idx: (aux_start as u32, idx.len() as u32),
            out,
        });
        out
    }

    /// Scatter-add: a copy of `base` with `src[i]` added at flat position
    /// `pos[i]`.  Positions may repeat; used to assemble drift vectors and
    /// coupling matrices from heterogeneous term contributions.
    pub fn add_at(&mut self, base: Var, src: Var, pos: &[usize]) -> Var {
        assert_eq!(src.len(), pos.len(), "add_at source/position mismatch");
        let aux_start = self.aux.len();
        for &p in pos {
            assert!(p < base.len(), "add_at position out of range");
            self.aux.push(p as u32);
        }
        let out = self.alloc(base.rows as usize, base.cols as usize);
        let (bo, so, oo) = (base.off as usize, src.off as usize, out.off as usize);
        for i in 0..base.len() {
            self.vals[oo + i] = self.vals[bo + i];
        }
        for (i, &p) in pos.iter().enumerate() {
            self.vals[oo + p] += self.vals[so + i];
        }
        self.push(Op::AddAt {
            base,
            src,
            pos: (aux_start as u32, pos.len() as u32),
            out,
        });
        out
    }

    /// Builds a `rows x cols` tensor from scatter-added pieces: starting
    /// from zeros, adds `src[i]` at flat position `pos[i]` for every
    /// `(src, pos)` pair.  One node regardless of the number of pieces, so
    /// drift vectors and coupling matrices assemble without intermediate
    /// copies.  Positions may repeat within and across pieces.
    pub fn assemble(&mut self, rows: usize, cols: usize, pieces: &[(Var, &[usize])]) -> Var {
        let parts_start = self.parts.len();
        for (src, pos) in pieces {
            assert_eq!(src.len(), pos.len(), "assemble piece length mismatch");
            let aux_start = self.aux.len();
            for &p in *pos {
                assert!(p < rows * cols, "assemble position out of range");
                self.aux.push(p as u32);
            }
            self.parts.push((*src, aux_start as u32));
        }
        let out = self.alloc(rows, cols);
        for k in parts_start..self.parts.len() {
            let (src, aux_start) = self.parts[k];
            for i in 0..src.len() {
                let p = self.aux[aux_start as usize + i] as usize;
                self.vals[out.off as usize + p] += self.vals[src.off as usize + i];
            }
        }
        self.push(Op::Assemble {
            parts: (parts_start as u32, (self.parts.len() - parts_start) as u32),
            out,
        });
        out
    }

    /// `a + c * I` for a square matrix and constant `c`.
    pub fn add_diag(&mut self, a: Var, c: f64) -> Var {
        assert_eq!(a.rows, a.cols, "add_diag needs a square matrix");
        let n = a.rows as usize;
        let out = self.alloc(n, n);
        for i in 0..a.len() {
            self.vals[out.off as usize + i] = self.vals[a.off as usize + i];
        }
        for i in 0..n {
            self.vals[out.off as usize + i * n + i] += c;
        }
        self.push(Op::AddDiag { a, out });
        out
    }

    /// Validates that a square matrix is positive definite, applying the
    /// standard one-shot diagonal jitter if a pivot fails; returns the
    /// (possibly repaired) matrix.  The repair is a constant shift, so the
    /// adjoint passes through unchanged.
    pub fn spd_repair(&mut self, a: Var) -> Result<Var> {
        assert_eq!(a.rows, a.cols, "spd_repair needs a square matrix");
        let n = a.rows as usize;
        // Validate up front so an unrepairable matrix surfaces as an error
        // instead of a poisoned tape.
        linalg::cholesky(self.read(a), n)?;
        // Redo the repair decision so the stored matrix matches what
        // downstream factorizations will see.
        let maxdiag = (0..n)
            .map(|i| self.read(a)[i * n + i])
            .fold(f64::NEG_INFINITY, f64::max);
        let needs_jitter = !raw_spd_ok(self.read(a), n, linalg::PIVOT_REL_TOL * maxdiag);
        let out = self.alloc(n, n);
        for i in 0..a.len() {
            self.vals[out.off as usize + i] = self.vals[a.off as usize + i];
        }
        if needs_jitter {
            let jitter = linalg::JITTER_REL * maxdiag;
            for i in 0..n {
                self.vals[out.off as usize + i * n + i] += jitter;
            }
        }
        self.push(Op::SpdRepair { a, out });
        Ok(out)
    }

    /// Log-determinant of a symmetric positive-definite matrix.
    pub fn log_det_spd(&mut self, a: Var) -> Result<Var> {
        assert_eq!(a.rows, a.cols, "log_det_spd needs a square matrix");
        let n = a.rows as usize;
        let v = linalg::log_det_spd(self.read(a), n)?;
        let out = self.alloc(1, 1);
        self.vals[out.off as usize] = v;
        self.push(Op::LogDetSpd { a, out });
        Ok(out)
    }

    /// Quadratic form `d^T m^{-1} d` for symmetric positive-definite `m`.
    pub fn inv_quad_form(&mut self, m: Var, d: Var) -> Result<Var> {
        assert_eq!(m.rows, m.cols, "inv_quad_form needs a square matrix");
        assert_eq!(m.rows as usize, d.len(), "inv_quad_form dimension mismatch");
        let n = d.len();
        let y = linalg::solve_spd(self.read(m), self.read(d), n)?;
        let v = linalg::dot(&y, self.read(d));
        let out = self.alloc(1, 1);
        self.vals[out.off as usize] = v;
        self.push(Op::InvQuadForm { m, d, out });
        Ok(out)
    }

    /// Runs the reverse sweep seeding `d loss / d loss = 1`, filling the
    /// adjoint buffer.  `loss` must be scalar.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(loss.len(), 1, "backward needs a scalar loss");
        self.adj.clear();
        self.adj.resize(self.vals.len(), 0.0);
        self.adj[loss.off as usize] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            let op = self.nodes[i];
            backprop(&op, &self.vals, &mut self.adj, &self.aux, &self.parts);
        }
    }
}

/// Quick positive-definiteness probe mirroring the un-repaired first pass of
/// `linalg::cholesky`.
fn raw_spd_ok(a: &[f64], n: usize, tol: f64) -> bool {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a[i * n + j];
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(acc > tol) {
                    return false;
                }
                l[i * n + i] = acc.sqrt();
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    true
}

/// Applies one node's reverse rule, accumulating into `adj`.
fn backprop(op: &Op, vals: &[f64], adj: &mut [f64], aux: &[u32], parts: &[(Var, u32)]) {
    match *op {
        Op::Add { a, b, out } => {
            for i in 0..out.len() {
                let g = adj[out.off as usize + i];
                adj[a.off as usize + i] += g;
                adj[b.off as usize + i] += g;
            }
        }
        Op::Sub { a, b, out } => {
            for i in 0..out.len() {
                let g = adj[out.off as usize + i];
                adj[a.off as usize + i] += g;
                adj[b.off as usize + i] -= g;
            }
        }
        Op::Scale { a, c, out } => {
            for i in 0..out.len() {
                adj[a.off as usize + i] += c * adj[out.off as usize + i];
            }
        }
        Op::AddScaled { a, b, c, out } => {
            for i in 0..out.len() {
                let g = adj[out.off as usize + i];
                adj[a.off as usize + i] += g;
                adj[b.off as usize + i] += c * g;
            }
        }
        Op::Mul { a, b, out } => {
            for i in 0..out.len() {
                let g = adj[out.off as usize + i];
                adj[a.off as usize + i] += vals[b.off as usize + i] * g;
                adj[b.off as usize + i] += vals[a.off as usize + i] * g;
            }
        }
        Op::MulScalar { s, a, out } => {
            let sv = vals[s.off as usize];
            let mut sg = 0.0;
            for i in 0..out.len() {
                let g = adj[out.off as usize + i];
                sg += vals[a.off as usize + i] * g;
                adj[a.off as usize + i] += sv * g;
            }
            adj[s.off as usize] += sg;
        }
        Op::MatMul { a, b, out } => {
            let (m, k, n) = (a.rows as usize, a.cols as usize, b.cols as usize);
            // dA = dOut * B^T ; dB = A^T * dOut
            for i in 0..m {
                for l in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += adj[out.off as usize + i * n + j] * vals[b.off as usize + l * n + j];
                    }
                    adj[a.off as usize + i * k + l] += acc;
                }
            }
            for l in 0..k {
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += vals[a.off as usize + i * k + l] * adj[out.off as usize + i * n + j];
                    }
                    adj[b.off as usize + l * n + j] += acc;
                }
            }
        }
        Op::Transpose { a, out } => {
            let (m, n) = a.shape();
            for i in 0..m {
                for j in 0..n {
                    adj[a.off as usize + i * n + j] += adj[out.off as usize + j * m + i];
                }
            }
        }
        Op::SymmetrizeSq { a, out } => {
            let n = a.rows as usize;
            for i in 0..n {
                for j in 0..n {
                    adj[a.off as usize + i * n + j] += 0.5
                        * (adj[out.off as usize + i * n + j] + adj[out.off as usize + j * n + i]);
                }
            }
        }
        Op::Tanh { a, out } => {
            for i in 0..out.len() {
                let y = vals[out.off as usize + i];
                adj[a.off as usize + i] += (1.0 - y * y) * adj[out.off as usize + i];
            }
        }
        Op::Dot { a, b, out } => {
            let g = adj[out.off as usize];
            for i in 0..a.len() {
                adj[a.off as usize + i] += g * vals[b.off as usize + i];
                adj[b.off as usize + i] += g * vals[a.off as usize + i];
            }
        }
        Op::SumSq { a, out } => {
            let g = adj[out.off as usize];
            for i in 0..a.len() {
                adj[a.off as usize + i] += 2.0 * g * vals[a.off as usize + i];
            }
        }
        Op::Gather { a, idx, out } => {
            let (start, len) = (idx.0 as usize, idx.1 as usize);
            for o in 0..len {
                let i = aux[start + o] as usize;
                adj[a.off as usize + i] += adj[out.off as usize + o];
            }
        }
        Op::AddAt { base, src, pos, out } => {
            let (start, len) = (pos.0 as usize, pos.1 as usize);
            for i in 0..base.len() {
                adj[base.off as usize + i] += adj[out.off as usize + i];
            }
            for i in 0..len {
                let p = aux[start + i] as usize;
                adj[src.off as usize + i] += adj[out.off as usize + p];
            }
        }
        Op::Assemble { parts: range, out } => {
            let (start, len) = (range.0 as usize, range.1 as usize);
            for &(src, aux_start) in &parts[start..start + len] {
                for i in 0..src.len() {
                    let p = aux[aux_start as usize + i] as usize;
                    adj[src.off as usize + i] += adj[out.off as usize + p];
                }
            }
        }
        Op::AddDiag { a, out } | Op::SpdRepair { a, out } => {
            for i in 0..out.len() {
                adj[a.off as usize + i] += adj[out.off as usize + i];
            }
        }
        Op::LogDetSpd { a, out } => {
            // d logdet(A) / dA = A^{-1} (symmetric for SPD input).
            let n = a.rows as usize;
            let g = adj[out.off as usize];
            let inv = linalg::inv_spd(&vals[a.range()], n)
                .expect("matrix factorized during forward must factorize in backward");
            for i in 0..n * n {
                adj[a.off as usize + i] += g * inv[i];
            }
        }
        Op::InvQuadForm { m, d, out } => {
            // With y = M^{-1} d: d/dd = 2y, d/dM = -y y^T.
            let n = d.len();
            let g = adj[out.off as usize];
            let y = linalg::solve_spd(&vals[m.range()], &vals[d.range()], n)
                .expect("matrix solved during forward must solve in backward");
            for i in 0..n {
                adj[d.off as usize + i] += 2.0 * g * y[i];
                for j in 0..n {
                    adj[m.off as usize + i * n + j] -= g * y[i] * y[j];
                }
            }
        }
    }
}
