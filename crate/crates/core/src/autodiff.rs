//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly (values are computed on
//! insertion) and [`Graph::backward`] walks the tape in reverse. Shape errors
//! inside a graph are programming errors and panic.

use crate::tensor::{gemm, Matrix};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct GruCache {
    r: Matrix,
    z: Matrix,
    n: Matrix,
    /// Hidden-side pre-activation of the candidate, `h W_hn + b_hn`.
    hn: Matrix,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Reshape(usize),
    RepeatRows(usize, usize),
    BroadcastCols(usize),
    SumCols(usize),
    SumAll(usize),
    LogSumExpCols(usize),
    MinCols(usize, Vec<usize>),
    Gru {
        x: usize,
        h: usize,
        wi: usize,
        wh: usize,
        bi: usize,
        bh: usize,
        cache: Box<GruCache>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data, noise, masks).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).matmul(self.val(b));
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::MatMul(a.0, b.0), rg)
    }

    /// Adds a `1 x c` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(bias));
        assert_eq!(bv.rows(), 1, "bias must be a single row");
        assert_eq!(av.cols(), bv.cols(), "bias width mismatch");
        let mut value = av.clone();
        let c = av.cols();
        for r in value.data_mut().chunks_exact_mut(c.max(1)) {
            for (x, b) in r.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a.0) || self.rg(bias.0);
        self.push(value, Op::AddBias(a.0, bias.0), rg)
    }

    /// `x W + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip_map(self.val(b), |x, y| x + y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip_map(self.val(b), |x, y| x - y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip_map(self.val(b), |x, y| x * y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Mul(a.0, b.0), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip_map(self.val(b), |x, y| x / y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Div(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.val(a).map(|x| x * s);
        let rg = self.rg(a.0);
        self.push(value, Op::Scale(a.0, s), rg)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.val(a).map(|x| x + c);
        let rg = self.rg(a.0);
        self.push(value, Op::Offset(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.val(a).map(sigmoid);
        let rg = self.rg(a.0);
        self.push(value, Op::Sigmoid(a.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::tanh);
        let rg = self.rg(a.0);
        self.push(value, Op::Tanh(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.val(a).map(|x| x.max(0.0));
        let rg = self.rg(a.0);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::exp);
        let rg = self.rg(a.0);
        self.push(value, Op::Exp(a.0), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::ln);
        let rg = self.rg(a.0);
        self.push(value, Op::Log(a.0), rg)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.val(a).map(f64::sqrt);
        let rg = self.rg(a.0);
        self.push(value, Op::Sqrt(a.0), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.val(a).map(|x| x * x);
        let rg = self.rg(a.0);
        self.push(value, Op::Square(a.0), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.val(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a.0);
        self.push(value, Op::Clamp(a.0, lo, hi), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.val(*v)).collect();
        let value = Matrix::hstack(&mats);
        let rg = parts.iter().any(|v| self.rg(v.0));
        self.push(value, Op::Concat(parts.iter().map(|v| v.0).collect()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.val(a).slice_cols(start, end);
        let rg = self.rg(a.0);
        self.push(value, Op::Slice(a.0, start), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.val(a).clone().reshape(rows, cols);
        let rg = self.rg(a.0);
        self.push(value, Op::Reshape(a.0), rg)
    }

    /// Repeats every row `n` times consecutively: row `i` lands on rows `i*n..(i+1)*n`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let value = self.val(a).repeat_rows(n);
        let rg = self.rg(a.0);
        self.push(value, Op::RepeatRows(a.0, n), rg)
    }

    /// Broadcasts an `r x 1` column across `cols` columns.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let av = self.val(a);
        assert_eq!(av.cols(), 1, "broadcast_cols expects a column");
        let mut value = Matrix::zeros(av.rows(), cols);
        for i in 0..av.rows() {
            value.row_mut(i).fill(av[(i, 0)]);
        }
        let rg = self.rg(a.0);
        self.push(value, Op::BroadcastCols(a.0), rg)
    }

    /// Per-row sum, `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let data = av.iter_rows().map(|r| r.iter().sum()).collect();
        let value = Matrix::from_vec(av.rows(), 1, data);
        let rg = self.rg(a.0);
        self.push(value, Op::SumCols(a.0), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::from_vec(1, 1, vec![self.val(a).sum()]);
        let rg = self.rg(a.0);
        self.push(value, Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row `log(sum(exp(x)))`, `r x c -> r x 1`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let data = av.iter_rows().map(logsumexp).collect();
        let value = Matrix::from_vec(av.rows(), 1, data);
        let rg = self.rg(a.0);
        self.push(value, Op::LogSumExpCols(a.0), rg)
    }

    /// Per-row log-softmax.
    pub fn log_softmax_cols(&mut self, a: Var) -> Var {
        let cols = self.val(a).cols();
        let lse = self.logsumexp_cols(a);
        let lse = self.broadcast_cols(lse, cols);
        self.sub(a, lse)
    }

    /// Per-row minimum, `r x c -> r x 1`; the gradient flows to the first argmin.
    pub fn min_cols(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let mut arg = Vec::with_capacity(av.rows());
        let mut data = Vec::with_capacity(av.rows());
        for r in av.iter_rows() {
            let (j, m) = r
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bj, bm), (j, &v)| {
                    if v < bm {
                        (j, v)
                    } else {
                        (bj, bm)
                    }
                });
            arg.push(j);
            data.push(m);
        }
        let value = Matrix::from_vec(av.rows(), 1, data);
        let rg = self.rg(a.0);
        self.push(value, Op::MinCols(a.0, arg), rg)
    }

    /// Fused gated-recurrent-unit step with gate order (reset, update, candidate):
    ///
    /// ```text
    /// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
    /// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
    /// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
    /// h' = (1 - z) * n + z * h
    /// ```
    ///
    /// `wi` is `in x 3H`, `wh` is `H x 3H`, `bi`/`bh` are `1 x 3H`.
    pub fn gru_cell(&mut self, x: Var, h: Var, wi: Var, wh: Var, bi: Var, bh: Var) -> Var {
        let (xv, hv) = (self.val(x), self.val(h));
        let (wiv, whv, biv, bhv) = (self.val(wi), self.val(wh), self.val(bi), self.val(bh));
        let hid = hv.cols();
        let rows = xv.rows();
        assert_eq!(hv.rows(), rows, "gru batch mismatch");
        assert_eq!(wiv.shape(), (xv.cols(), 3 * hid), "gru input weight shape");
        assert_eq!(whv.shape(), (hid, 3 * hid), "gru hidden weight shape");
        assert_eq!(biv.shape(), (1, 3 * hid), "gru input bias shape");
        assert_eq!(bhv.shape(), (1, 3 * hid), "gru hidden bias shape");

        let mut gi = Matrix::zeros(rows, 3 * hid);
        gemm(1.0, xv, false, wiv, false, 0.0, &mut gi);
        let mut gh = Matrix::zeros(rows, 3 * hid);
        gemm(1.0, hv, false, whv, false, 0.0, &mut gh);

        let mut r = Matrix::zeros(rows, hid);
        let mut z = Matrix::zeros(rows, hid);
        let mut n = Matrix::zeros(rows, hid);
        let mut hn = Matrix::zeros(rows, hid);
        let mut out = Matrix::zeros(rows, hid);
        let (bis, bhs) = (biv.data(), bhv.data());
        for i in 0..rows {
            let gi_r = gi.row(i);
            let gh_r = gh.row(i);
            let h_r = hv.row(i);
            for j in 0..hid {
                let rv = sigmoid(gi_r[j] + bis[j] + gh_r[j] + bhs[j]);
                let zv = sigmoid(gi_r[hid + j] + bis[hid + j] + gh_r[hid + j] + bhs[hid + j]);
                let hnv = gh_r[2 * hid + j] + bhs[2 * hid + j];
                let nv = (gi_r[2 * hid + j] + bis[2 * hid + j] + rv * hnv).tanh();
                r[(i, j)] = rv;
                z[(i, j)] = zv;
                hn[(i, j)] = hnv;
                n[(i, j)] = nv;
                out[(i, j)] = (1.0 - zv) * nv + zv * h_r[j];
            }
        }
        let rg = [x, h, wi, wh, bi, bh].iter().any(|v| self.rg(v.0));
        let op = Op::Gru {
            x: x.0,
            h: h.0,
            wi: wi.0,
            wh: wh.0,
            bi: bi.0,
            bh: bh.0,
            cache: Box::new(GruCache { r, z, n, hn }),
        };
        self.push(out, op, rg)
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(
            self.val(out).shape(),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }
}

fn logsumexp(r: &[f64]) -> f64 {
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn accumulate(grads: &mut [Option<Matrix>], i: usize, g: Matrix) {
    match &mut grads[i] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let v = |i: usize| &self.nodes[i].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let mut ga = Matrix::zeros(v(*a).rows(), v(*a).cols());
                    gemm(1.0, g, false, v(*b), true, 0.0, &mut ga);
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Matrix::zeros(v(*b).rows(), v(*b).cols());
                    gemm(1.0, v(*a), true, g, false, 0.0, &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.sum_rows());
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.zip_map(v(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.zip_map(v(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.zip_map(v(*b), |x, y| x / y));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = g.zip_map(out, |x, q| x * q);
                    accumulate(grads, *b, t.zip_map(v(*b), |x, y| -x / y));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::Offset(a) => accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(out, |x, s| x * s * (1.0 - s))),
            Op::Tanh(a) => accumulate(grads, *a, g.zip_map(out, |x, t| x * (1.0 - t * t))),
            Op::Relu(a) => accumulate(
                grads,
                *a,
                g.zip_map(v(*a), |x, i| if i > 0.0 { x } else { 0.0 }),
            ),
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(out, |x, e| x * e)),
            Op::Log(a) => accumulate(grads, *a, g.zip_map(v(*a), |x, i| x / i)),
            Op::Sqrt(a) => accumulate(
                grads,
                *a,
                g.zip_map(out, |x, s| if s > 0.0 { x / (2.0 * s) } else { 0.0 }),
            ),
            Op::Square(a) => accumulate(grads, *a, g.zip_map(v(*a), |x, i| 2.0 * x * i)),
            Op::Clamp(a, lo, hi) => accumulate(
                grads,
                *a,
                g.zip_map(v(*a), |x, i| if i >= *lo && i <= *hi { x } else { 0.0 }),
            ),
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = v(p).cols();
                    if self.rg(p) {
                        accumulate(grads, p, g.slice_cols(start, start + w));
                    }
                    start += w;
                }
            }
            Op::Slice(a, start) => {
                if self.rg(*a) {
                    let src = v(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    let w = g.cols();
                    for i in 0..g.rows() {
                        ga.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::Reshape(a) => {
                let (r, c) = v(*a).shape();
                accumulate(grads, *a, g.clone().reshape(r, c));
            }
            Op::RepeatRows(a, n) => {
                let src = v(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    let dst = ga.row_mut(i);
                    for k in 0..*n {
                        for (d, x) in dst.iter_mut().zip(g.row(i * n + k)) {
                            *d += x;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::BroadcastCols(a) => {
                let data = g.iter_rows().map(|r| r.iter().sum()).collect();
                accumulate(grads, *a, Matrix::from_vec(g.rows(), 1, data));
            }
            Op::SumCols(a) => {
                let src = v(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    ga.row_mut(i).fill(g[(i, 0)]);
                }
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let src = v(*a);
                accumulate(grads, *a, Matrix::filled(src.rows(), src.cols(), g[(0, 0)]));
            }
            Op::LogSumExpCols(a) => {
                let src = v(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    let lse = out[(i, 0)];
                    let gi = g[(i, 0)];
                    for (d, x) in ga.row_mut(i).iter_mut().zip(src.row(i)) {
                        *d = if lse.is_finite() { gi * (x - lse).exp() } else { 0.0 };
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::MinCols(a, arg) => {
                let src = v(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for (i, &j) in arg.iter().enumerate() {
                    ga[(i, j)] = g[(i, 0)];
                }
                accumulate(grads, *a, ga);
            }
            Op::Gru {
                x,
                h,
                wi,
                wh,
                bi,
                bh,
                cache,
            } => self.backprop_gru(g, [*x, *h, *wi, *wh, *bi, *bh], cache, grads),
        }
    }

    fn backprop_gru(
        &self,
        g: &Matrix,
        [x, h, wi, wh, bi, bh]: [usize; 6],
        cache: &GruCache,
        grads: &mut [Option<Matrix>],
    ) {
        let hv = &self.nodes[h].value;
        let (rows, hid) = hv.shape();
        let GruCache { r, z, n, hn } = cache;
        // pre-activation gradients for the input-side and hidden-side gate blocks
        let mut dgi = Matrix::zeros(rows, 3 * hid);
        let mut dgh = Matrix::zeros(rows, 3 * hid);
        let mut dh_direct = Matrix::zeros(rows, hid);
        for i in 0..rows {
            for j in 0..hid {
                let gv = g[(i, j)];
                let (rv, zv, nv) = (r[(i, j)], z[(i, j)], n[(i, j)]);
                let dn = gv * (1.0 - zv);
                let dz = gv * (hv[(i, j)] - nv);
                dh_direct[(i, j)] = gv * zv;
                let dn_pre = dn * (1.0 - nv * nv);
                let dr = dn_pre * hn[(i, j)];
                let dr_pre = dr * rv * (1.0 - rv);
                let dz_pre = dz * zv * (1.0 - zv);
                dgi[(i, j)] = dr_pre;
                dgi[(i, hid + j)] = dz_pre;
                dgi[(i, 2 * hid + j)] = dn_pre;
                dgh[(i, j)] = dr_pre;
                dgh[(i, hid + j)] = dz_pre;
                dgh[(i, 2 * hid + j)] = dn_pre * rv;
            }
        }
        let xv = &self.nodes[x].value;
        let wiv = &self.nodes[wi].value;
        let whv = &self.nodes[wh].value;
        if self.rg(x) {
            let mut dx = Matrix::zeros(xv.rows(), xv.cols());
            gemm(1.0, &dgi, false, wiv, true, 0.0, &mut dx);
            accumulate(grads, x, dx);
        }
        if self.rg(h) {
            gemm(1.0, &dgh, false, whv, true, 1.0, &mut dh_direct);
            accumulate(grads, h, dh_direct);
        }
        if self.rg(wi) {
            let mut dwi = Matrix::zeros(wiv.rows(), wiv.cols());
            gemm(1.0, xv, true, &dgi, false, 0.0, &mut dwi);
            accumulate(grads, wi, dwi);
        }
        if self.rg(wh) {
            let mut dwh = Matrix::zeros(whv.rows(), whv.cols());
            gemm(1.0, hv, true, &dgh, false, 0.0, &mut dwh);
            accumulate(grads, wh, dwh);
        }
        if self.rg(bi) {
            accumulate(grads, bi, dgi.sum_rows());
        }
        if self.rg(bh) {
            accumulate(grads, bh, dgh.sum_rows());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central finite-difference check of every entry of every leaf.
    fn check(leaves: Vec<Matrix>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|m| g.param(m.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |ls: &[Matrix]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = ls.iter().map(|m| g.param(m.clone())).collect();
            let o = f(&mut g, &vs);
            g.value(o)[(0, 0)]
        };
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).cloned().unwrap_or(Matrix::zeros(leaf.rows(), leaf.cols()));
            for k in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[k] += eps;
                let mut minus = leaves.clone();
                minus[li].data_mut()[k] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[k];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / denom < 1e-5,
                    "leaf {li} entry {k}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn elementwise_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 3, 4).map(|x| x.abs() + 0.5);
        check(vec![a, b], |g, v| {
            let s = g.sigmoid(v[0]);
            let t = g.tanh(v[1]);
            let m = g.mul(s, t);
            let d = g.div(m, v[1]);
            let e = g.exp(d);
            let l = g.log(v[1]);
            let q = g.square(l);
            let sq = g.sqrt(v[1]);
            let c = g.clamp(v[0], -0.5, 0.5);
            let sum = g.add(e, q);
            let sum = g.sub(sum, sq);
            let sum = g.add(sum, c);
            let sum = g.scale(sum, 0.7);
            let sum = g.offset(sum, 2.0);
            g.sum_all(sum)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 2, 3);
        let w = random(&mut rng, 3, 4);
        let b = random(&mut rng, 1, 4);
        check(vec![a, w, b], |g, v| {
            let y = g.affine(v[0], v[1], v[2]);
            let y = g.relu(y);
            let rep = g.repeat_rows(y, 3);
            let s = g.slice_cols(rep, 1, 3);
            let c = g.concat_cols(&[s, rep]);
            let r = g.reshape(c, 12, 3);
            let lse = g.logsumexp_cols(r);
            let mn = g.min_cols(r);
            let ls = g.log_softmax_cols(r);
            let sc = g.sum_cols(ls);
            let bc = g.broadcast_cols(mn, 2);
            let t1 = g.sum_all(lse);
            let t2 = g.sum_all(bc);
            let t3 = g.mean_all(sc);
            let t = g.add(t1, t2);
            g.add(t, t3)
        });
    }

    #[test]
    fn fused_gru_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 2, 3);
        let h = random(&mut rng, 2, 4);
        let wi = random(&mut rng, 3, 12);
        let wh = random(&mut rng, 4, 12);
        let bi = random(&mut rng, 1, 12);
        let bh = random(&mut rng, 1, 12);
        check(vec![x, h, wi, wh, bi, bh], |g, v| {
            let h1 = g.gru_cell(v[0], v[1], v[2], v[3], v[4], v[5]);
            let h2 = g.gru_cell(v[0], h1, v[2], v[3], v[4], v[5]);
            let sq = g.square(h2);
            g.sum_all(sq)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::filled(1, 1, 3.0));
        let p = g.param(Matrix::filled(1, 1, 2.0));
        let y = g.mul(c, p);
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap()[(0, 0)], 3.0);
    }
}
