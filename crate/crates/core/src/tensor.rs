//! A minimal reverse-mode autodiff tape over dense row-major matrices.
//!
//! Every value is a 2-D [`Mat`]. A [`Graph`] records operations as they are
//! applied; [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients for parameter leaves. Parameters are borrowed from one or more
//! parameter sets so a forward pass never copies weights. The tape is generic
//! over [`Scalar`] so the same model runs in `f32` for training and `f64` for
//! finite-difference checks.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Send + Sync + Sum + std::ops::AddAssign + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        debug_assert!(c.len() >= m * n);
        // SAFETY: callers pass slices covering the strided extents; c is a
        // dense m x n row-major buffer.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), n as isize, 1,
            )
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        debug_assert!(c.len() >= m * n);
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), n as isize, 1,
            )
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape {rows}x{cols} vs {} values", data.len());
        Mat { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn add_assign(&mut self, other: &Mat<F>) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Mat<G> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|x| G::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(G::nan))
                .collect(),
        }
    }
}

/// `op(a) * op(b)` as a fresh matrix.
pub fn matmul<F: Scalar>(a: &Mat<F>, ta: bool, b: &Mat<F>, tb: bool) -> Mat<F> {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dims {m}x{k} * {k2}x{n}");
    let mut c = Mat::zeros(m, n);
    matmul_into(a, ta, b, tb, F::zero(), &mut c);
    c
}

/// `c = op(a) * op(b) + beta * c`.
pub fn matmul_into<F: Scalar>(a: &Mat<F>, ta: bool, b: &Mat<F>, tb: bool, beta: F, c: &mut Mat<F>) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    debug_assert_eq!((c.rows, c.cols), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    F::gemm(m, k, n, F::one(), &a.data, rsa, csa, &b.data, rsb, csb, beta, &mut c.data);
}

/// Row-wise softmax with an optional causal mask (column `j > i` excluded).
pub fn softmax_rows<F: Scalar>(x: &Mat<F>, causal: bool) -> Mat<F> {
    let mut y = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let lim = if causal { (r + 1).min(x.cols) } else { x.cols };
        let xr = &x.row(r)[..lim];
        let mx = xr.iter().copied().fold(F::neg_infinity(), F::max);
        let yr = y.row_mut(r);
        let mut sum = F::zero();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in &mut yr[..lim] {
            *o = *o / sum;
        }
    }
    y
}

/// Log-softmax of one row, returned with its max-shifted log-sum-exp.
pub fn log_softmax_row<F: Scalar>(row: &[F], out: &mut [F]) {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln() + mx;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Label-smoothed cross entropy for one position: gold gets `1 - s`, every
/// other class `s / (V - 1)`. Returns the loss and writes d loss / d logits.
pub fn smoothed_ce_row<F: Scalar>(logits: &[F], gold: usize, smoothing: F, grad: &mut [F]) -> F {
    let v = logits.len();
    let mut logp = vec![F::zero(); v];
    log_softmax_row(logits, &mut logp);
    let off = if v > 1 {
        smoothing / F::from_usize(v - 1).unwrap()
    } else {
        F::zero()
    };
    let on = F::one() - smoothing;
    let mut loss = F::zero();
    for j in 0..v {
        let t = if j == gold { on } else { off };
        if t != F::zero() {
            loss = loss - t * logp[j];
        }
        grad[j] = logp[j].exp() - t;
    }
    loss
}

fn gelu<F: Scalar>(x: F) -> (F, F) {
    // tanh approximation; returns value and derivative
    let c = F::lit(0.797_884_560_802_865_4);
    let a = F::lit(0.044_715);
    let half = F::lit(0.5);
    let x2 = x * x;
    let u = c * (x + a * x2 * x);
    let t = u.tanh();
    let y = half * x * (F::one() + t);
    let du = c * (F::one() + F::lit(3.0) * a * x2);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * du;
    (y, dy)
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub set: usize,
    pub idx: usize,
}

enum Op<F> {
    Input,
    Param(ParamRef),
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale(Var, F),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat<F>, rstd: Vec<F> },
    Softmax { x: Var, causal: bool },
    Gather { table: Var, ids: Vec<u32> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    MaskMul { a: Var, mask: Vec<F> },
    SmoothedCe { logits: Var, grad: Mat<F> },
    Bce { logits: Var, grad: Mat<F> },
    AddScalars(Vec<Var>),
}

enum Value<F> {
    Owned(Mat<F>),
    Param(ParamRef),
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Per-set gradients: one optional matrix per parameter tensor. `None` means
/// the tensor did not participate.
pub type Grads<F> = Vec<Option<Mat<F>>>;

pub struct Graph<'p, F: Scalar> {
    sets: Vec<&'p [Mat<F>]>,
    frozen: Vec<bool>,
    nodes: Vec<Node<F>>,
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(sets: &[&'p [Mat<F>]]) -> Self {
        Graph {
            sets: sets.to_vec(),
            frozen: vec![false; sets.len()],
            nodes: Vec::with_capacity(256),
        }
    }

    /// Parameters of a frozen set still act as values but get no gradient.
    pub fn freeze(&mut self, set: usize) {
        self.frozen[set] = true;
    }

    pub fn value(&self, v: Var) -> &Mat<F> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(p) => &self.sets[p.set][p.idx],
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v).data[0]
    }

    fn push(&mut self, value: Mat<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, m: Mat<F>) -> Var {
        self.push(m, Op::Input, false)
    }

    pub fn param(&mut self, set: usize, idx: usize) -> Var {
        let p = ParamRef { set, idx };
        self.nodes.push(Node {
            value: Value::Param(p),
            op: Op::Param(p),
            needs_grad: !self.frozen[set],
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.input(m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let m = matmul(self.value(a), false, self.value(b), false);
        let ng = self.ng(a) || self.ng(b);
        self.push(m, Op::MatMul { a, b, tb: false }, ng)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let m = matmul(self.value(a), false, self.value(b), true);
        let ng = self.ng(a) || self.ng(b);
        self.push(m, Op::MatMul { a, b, tb: true }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut m = self.value(a).clone();
        m.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(m, Op::Add(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut m = self.value(a).clone();
        let b = self.value(bias);
        debug_assert_eq!(b.data.len(), m.cols);
        for r in 0..m.rows {
            for (x, y) in m.row_mut(r).iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(m, Op::AddRow { a, bias }, ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let mut m = self.value(a).clone();
        m.scale(s);
        let ng = self.ng(a);
        self.push(m, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&v| gelu(v).0).collect());
        let ng = self.ng(a);
        self.push(m, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = Mat::from_vec(
            x.rows,
            x.cols,
            x.data.iter().map(|&v| v.max(F::zero())).collect(),
        );
        let ng = self.ng(a);
        self.push(m, Op::Relu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = F::lit(1e-5);
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let n = F::from_usize(cols).unwrap();
        let mut xhat = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut y = xhat.clone();
        for r in 0..rows {
            for ((o, gg), bb) in y.row_mut(r).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * *gg + *bb;
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(y, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let y = softmax_rows(self.value(x), causal);
        let ng = self.ng(x);
        self.push(y, Op::Softmax { x, causal }, ng)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut m = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            m.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        let ng = self.ng(table);
        self.push(
            m,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let x = self.value(a);
        let mut m = Mat::zeros(x.rows, width);
        for r in 0..x.rows {
            m.row_mut(r).copy_from_slice(&x.row(r)[start..start + width]);
        }
        let ng = self.ng(a);
        self.push(m, Op::SliceCols { a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut m = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            for r in 0..rows {
                m.row_mut(r)[off..off + x.cols].copy_from_slice(x.row(r));
            }
            off += x.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(m, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Vec<F>) -> Var {
        let x = self.value(a);
        debug_assert_eq!(mask.len(), x.data.len());
        let m = Mat::from_vec(
            x.rows,
            x.cols,
            x.data.iter().zip(&mask).map(|(&v, &k)| v * k).collect(),
        );
        let ng = self.ng(a);
        self.push(m, Op::MaskMul { a, mask }, ng)
    }

    /// Sum over rows of label-smoothed cross entropy; `targets[r]` is the gold
    /// class of row `r`. Produces a `1 x 1` node.
    pub fn smoothed_ce(&mut self, logits: Var, targets: &[u32], smoothing: F) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows, targets.len());
        let mut grad = Mat::zeros(x.rows, x.cols);
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            total += smoothed_ce_row(x.row(r), t as usize, smoothing, grad.row_mut(r));
        }
        let ng = self.ng(logits);
        self.push(Mat::filled(1, 1, total), Op::SmoothedCe { logits, grad }, ng)
    }

    /// Sum of binary cross entropy of sigmoid(logits) against one soft target.
    pub fn bce_with_logits(&mut self, logits: Var, target: F) -> Var {
        let x = self.value(logits);
        let mut grad = Mat::zeros(x.rows, x.cols);
        let mut total = F::zero();
        for (g, &z) in grad.data.iter_mut().zip(&x.data) {
            // log(1 + e^z) computed stably
            let softplus = z.max(F::zero()) + (-z.abs()).exp().ln_1p();
            total += softplus - target * z;
            let p = F::one() / (F::one() + (-z).exp());
            *g = p - target;
        }
        let ng = self.ng(logits);
        self.push(Mat::filled(1, 1, total), Op::Bce { logits, grad }, ng)
    }

    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|&p| self.scalar(p)).sum::<F>();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::filled(1, 1, total), Op::AddScalars(parts.to_vec()), ng)
    }

    /// Backpropagates `seed * d root` and returns gradients per parameter set.
    pub fn backward(&self, root: Var, seed: F) -> Vec<Grads<F>> {
        let mut out: Vec<Grads<F>> = self.sets.iter().map(|s| vec![None; s.len()]).collect();
        self.backward_into(root, seed, &mut out);
        out
    }

    /// Like [`backward`](Self::backward) but accumulates into existing buffers.
    pub fn backward_into(&self, root: Var, seed: F, out: &mut [Grads<F>]) {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat<F>>> = (0..n).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(Mat::filled(rv.rows, rv.cols, seed));

        fn acc<F: Scalar>(slot: &mut Option<Mat<F>>, g: Mat<F>) {
            match slot {
                Some(m) => m.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    let slot = &mut out[p.set][p.idx];
                    acc(slot, g);
                }
                Op::MatMul { a, b, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        // C = A op(B): dA = dC op(B)^T
                        acc(&mut grads[a.0], matmul(&g, false, bv, !*tb));
                    }
                    if self.ng(*b) {
                        let gb = if *tb {
                            matmul(&g, true, av, false)
                        } else {
                            matmul(av, true, &g, false)
                        };
                        acc(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads[b.0], g.clone());
                    }
                    if self.ng(*a) {
                        acc(&mut grads[a.0], g);
                    }
                }
                Op::AddRow { a, bias } => {
                    if self.ng(*bias) {
                        let mut gb = Mat::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (o, &v) in gb.data.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        acc(&mut grads[bias.0], gb);
                    }
                    if self.ng(*a) {
                        acc(&mut grads[a.0], g);
                    }
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g.scale(*s);
                    acc(&mut grads[a.0], g);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut g = g;
                    for (gv, &xv) in g.data.iter_mut().zip(&x.data) {
                        *gv = *gv * gelu(xv).1;
                    }
                    acc(&mut grads[a.0], g);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut g = g;
                    for (gv, &xv) in g.data.iter_mut().zip(&x.data) {
                        if xv <= F::zero() {
                            *gv = F::zero();
                        }
                    }
                    acc(&mut grads[a.0], g);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gam = self.value(*gamma);
                    let cols = g.cols;
                    if self.ng(*gamma) || self.ng(*beta) {
                        let mut gg = Mat::zeros(1, cols);
                        let mut gbeta = Mat::zeros(1, cols);
                        for r in 0..g.rows {
                            for c in 0..cols {
                                gg.data[c] += g.at(r, c) * xhat.at(r, c);
                                gbeta.data[c] += g.at(r, c);
                            }
                        }
                        if self.ng(*gamma) {
                            acc(&mut grads[gamma.0], gg);
                        }
                        if self.ng(*beta) {
                            acc(&mut grads[beta.0], gbeta);
                        }
                    }
                    if self.ng(*x) {
                        let n = F::from_usize(cols).unwrap();
                        let mut gx = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            let xh = xhat.row(r);
                            let gr = g.row(r);
                            let mut s1 = F::zero();
                            let mut s2 = F::zero();
                            for c in 0..cols {
                                let d = gr[c] * gam.data[c];
                                s1 += d;
                                s2 += d * xh[c];
                            }
                            let rs = rstd[r];
                            for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                                let d = gr[c] * gam.data[c];
                                *o = rs * (d - s1 / n - xh[c] * s2 / n);
                            }
                        }
                        acc(&mut grads[x.0], gx);
                    }
                }
                Op::Softmax { x, causal } => {
                    let y = match &node.value {
                        Value::Owned(m) => m,
                        Value::Param(_) => unreachable!(),
                    };
                    let mut gx = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let lim = if *causal { (r + 1).min(g.cols) } else { g.cols };
                        let yr = &y.row(r)[..lim];
                        let gr = &g.row(r)[..lim];
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yy), &gg) in gx.row_mut(r)[..lim].iter_mut().zip(yr).zip(gr) {
                            *o = yy * (gg - dot);
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let slot = &mut grads[table.0];
                    let m = slot.get_or_insert_with(|| Mat::zeros(t.rows, t.cols));
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in m.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    let x = self.value(*a);
                    let slot = &mut grads[a.0];
                    let m = slot.get_or_insert_with(|| Mat::zeros(x.rows, x.cols));
                    for r in 0..g.rows {
                        for (o, &v) in m.row_mut(r)[*start..*start + g.cols].iter_mut().zip(g.row(r))
                        {
                            *o += v;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        if self.ng(p) {
                            let mut gp = Mat::zeros(g.rows, w);
                            for r in 0..g.rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                            }
                            acc(&mut grads[p.0], gp);
                        }
                        off += w;
                    }
                }
                Op::MaskMul { a, mask } => {
                    let mut g = g;
                    for (gv, &k) in g.data.iter_mut().zip(mask) {
                        *gv = *gv * k;
                    }
                    acc(&mut grads[a.0], g);
                }
                Op::SmoothedCe { logits, grad } | Op::Bce { logits, grad } => {
                    let mut gl = grad.clone();
                    gl.scale(g.data[0]);
                    acc(&mut grads[logits.0], gl);
                }
                Op::AddScalars(parts) => {
                    for &p in parts {
                        if self.ng(p) {
                            acc(&mut grads[p.0], g.clone());
                        }
                    }
                }
            }
        }
    }
}

/// Adds `src` into `dst`, tensor by tensor.
pub fn accumulate<F: Scalar>(dst: &mut Grads<F>, src: Grads<F>) {
    for (d, s) in dst.iter_mut().zip(src) {
        if let Some(s) = s {
            match d {
                Some(m) => m.add_assign(&s),
                None => *d = Some(s),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&[Mat<f64>]) -> (f64, Grads<f64>), params: Vec<Mat<f64>>) {
        let (_, analytic) = f(&params);
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for e in 0..p.data.len() {
                let mut plus = params.clone();
                plus[pi].data[e] += h;
                let mut minus = params.clone();
                minus[pi].data[e] -= h;
                let num = (f(&plus).0 - f(&minus).0) / (2.0 * h);
                let ana = analytic[pi].as_ref().map(|m| m.data[e]).unwrap_or(0.0);
                assert!(
                    (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                    "param {pi}[{e}]: numeric {num} analytic {ana}"
                );
            }
        }
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_transposes() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let c = matmul(&a, false, &b, true);
        assert_eq!(c.data, vec![4.0, 2.0, 10.0, 5.0]);
        let d = matmul(&a, true, &b, false);
        assert_eq!((d.rows, d.cols), (3, 3));
        assert_eq!(d.data, vec![1.0, 4.0, 1.0, 2.0, 5.0, 2.0, 3.0, 6.0, 3.0]);
    }

    #[test]
    fn attention_like_chain_gradients() {
        // x W, softmax(q k^T) v, layer norm, gelu, smoothed CE
        let params = vec![
            rand_mat(3, 4, 1),
            rand_mat(4, 4, 2),
            rand_mat(1, 4, 3),
            rand_mat(1, 4, 4),
            rand_mat(5, 4, 5),
        ];
        let f = |p: &[Mat<f64>]| {
            let mut g = Graph::new(&[p]);
            let x = g.param(0, 0);
            let w = g.param(0, 1);
            let q = g.matmul(x, w);
            let s = g.matmul_t(q, x);
            let s = g.scale(s, 0.5);
            let a = g.softmax(s, true);
            let h = g.matmul(a, q);
            let ga = g.param(0, 2);
            let be = g.param(0, 3);
            let h = g.layer_norm(h, ga, be);
            let h = g.gelu(h);
            let l = g.slice_cols(h, 1, 2);
            let r = g.slice_cols(h, 0, 2);
            let h = g.concat_cols(&[l, r]);
            let e = g.param(0, 4);
            let logits = g.matmul_t(h, e);
            let loss = g.smoothed_ce(logits, &[1, 4, 0], 0.1);
            let emb = g.gather(e, &[2, 2, 0]);
            let z = g.matmul_t(emb, w);
            let z = g.slice_cols(z, 0, 1);
            let adv = g.bce_with_logits(z, 0.9);
            let total = g.add_scalars(&[loss, adv]);
            let v = g.scalar(total);
            (v, g.backward(total, 1.0).remove(0))
        };
        fd_check(f, params);
    }

    #[test]
    fn frozen_and_detached_get_nothing() {
        let a = vec![rand_mat(2, 2, 1)];
        let b = vec![rand_mat(2, 2, 2)];
        let mut g = Graph::new(&[&a, &b]);
        g.freeze(1);
        let x = g.param(0, 0);
        let y = g.param(1, 0);
        let z = g.matmul(x, y);
        let zd = g.detach(z);
        let w = g.add(z, zd);
        let l = g.bce_with_logits(w, 0.5);
        let grads = g.backward(l, 1.0);
        assert!(grads[0][0].is_some());
        assert!(grads[1][0].is_none());
    }

    #[test]
    fn smoothed_ce_known_values() {
        let logits = [2f64.ln(), 0.0, 0.0];
        let mut g = [0.0; 3];
        let plain = smoothed_ce_row(&logits, 0, 0.0, &mut g);
        assert!((plain - 0.5f64.ln().abs()).abs() < 1e-12);
        let smooth = smoothed_ce_row(&logits, 0, 0.1, &mut g);
        let want = -(0.9 * 0.5f64.ln() + 0.05 * 0.25f64.ln() + 0.05 * 0.25f64.ln());
        assert!((smooth - want).abs() < 1e-12);
    }
}
