//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! then sweeps the record in reverse, accumulating adjoints. Nodes are
//! row-major `rows × cols` matrices so a whole minibatch flows through one
//! node, and the only heavy kernel (the affine map) is delegated to a GEMM.
//!
//! Nodes created with [`Tape::param`] require gradients; nodes created with
//! [`Tape::constant`] do not, and neither does anything computed only from
//! constants. Backward work is skipped for such nodes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Slice(Var, usize),
    RepeatRows(Var),
    SumCols(Var),
    Sum(Var),
    LogSoftmax(Var),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.g.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "param shape");
        self.push(rows, cols, value, Op::Leaf, true)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "constant shape");
        self.push(rows, cols, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "not a scalar node");
        n.value[0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let (r, c) = self.shape(a);
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, value, op, ng)
    }

    /// `x · wᵀ + b` with `x: n × in`, `w: out × in`, `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, input) = self.shape(x);
        let (out, win) = self.shape(w);
        assert_eq!(input, win, "linear: input width");
        assert_eq!(self.shape(b), (1, out), "linear: bias shape");
        let mut y = Vec::with_capacity(n * out);
        let bias = self.value(b);
        for _ in 0..n {
            y.extend_from_slice(bias);
        }
        if n > 0 && out > 0 && input > 0 {
            // SAFETY: slices are sized n×in, out×in and n×out by the asserts above.
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    input,
                    out,
                    1.0,
                    self.value(x).as_ptr(),
                    input as isize,
                    1,
                    self.value(w).as_ptr(),
                    1,
                    input as isize,
                    1.0,
                    y.as_mut_ptr(),
                    out as isize,
                    1,
                );
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(n, out, y, Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Adds the `1 × cols` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(r), (1, cols), "add_row shape");
        let row = self.value(r);
        let value = self
            .value(a)
            .chunks(cols.max(1))
            .flat_map(|ch| ch.iter().zip(row).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(r);
        self.push(rows, cols, value, Op::AddRow(a, r), ng)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        let (r, cols) = self.shape(a);
        assert_eq!(c.len(), r * cols, "mul_const shape");
        let value = self.value(a).iter().zip(&c).map(|(x, y)| x * y).collect();
        let ng = self.ng(a);
        self.push(r, cols, value, Op::MulConst(a, c), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + s)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    /// Clamp into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Column-wise concatenation of nodes with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.shape(p);
                assert_eq!(r, rows, "concat row mismatch");
                c
            })
            .collect();
        let cols: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(rows, cols, value, Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start .. start + len` of `a`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(start + len <= cols, "slice out of range");
        let src = self.value(a);
        let mut value = Vec::with_capacity(rows * len);
        for i in 0..rows {
            value.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        let ng = self.ng(a);
        self.push(rows, len, value, Op::Slice(a, start), ng)
    }

    /// Stacks a `1 × cols` row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let (r, cols) = self.shape(a);
        assert_eq!(r, 1, "repeat_rows expects a row");
        let value = self.value(a).repeat(n);
        let ng = self.ng(a);
        self.push(n, cols, value, Op::RepeatRows(a), ng)
    }

    /// Per-row sum: `n × m -> n × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let value = if cols == 0 {
            vec![0.0; rows]
        } else {
            self.value(a).chunks(cols).map(|c| c.iter().sum()).collect()
        };
        let ng = self.ng(a);
        self.push(rows, 1, value, Op::SumCols(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let mut value = Vec::with_capacity(rows * cols);
        for row in self.value(a).chunks(cols.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            value.extend(row.iter().map(|&x| x - lse));
        }
        let ng = self.ng(a);
        self.push(rows, cols, value, Op::LogSoftmax(a), ng)
    }

    /// Reverse sweep from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward from a non-scalar");
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = g[idx].take() else { continue };
            self.propagate(node, &gy, &mut g);
            g[idx] = Some(gy);
        }
        Grads { g }
    }

    fn acc(&self, g: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = g[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, gy: &[f64], g: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, input) = self.shape(*x);
                let out = node.cols;
                self.acc(g, *b, |gb| {
                    for row in gy.chunks(out.max(1)) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                });
                if n == 0 || out == 0 || input == 0 {
                    return;
                }
                let wv = self.value(*w);
                let xv = self.value(*x);
                self.acc(g, *x, |gx| unsafe {
                    // SAFETY: gy is n×out, w is out×in, gx is n×in.
                    matrixmultiply::dgemm(
                        n, out, input, 1.0, gy.as_ptr(), out as isize, 1, wv.as_ptr(),
                        input as isize, 1, 1.0, gx.as_mut_ptr(), input as isize, 1,
                    );
                });
                self.acc(g, *w, |gw| unsafe {
                    // SAFETY: gyᵀ is out×n, x is n×in, gw is out×in.
                    matrixmultiply::dgemm(
                        out, n, input, 1.0, gy.as_ptr(), 1, out as isize, xv.as_ptr(),
                        input as isize, 1, 1.0, gw.as_mut_ptr(), input as isize, 1,
                    );
                });
            }
            Op::Add(a, b) => {
                self.acc(g, *a, |ga| add_into(ga, gy));
                self.acc(g, *b, |gb| add_into(gb, gy));
            }
            Op::Sub(a, b) => {
                self.acc(g, *a, |ga| add_into(ga, gy));
                self.acc(g, *b, |gb| {
                    for (s, &v) in gb.iter_mut().zip(gy) {
                        *s -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(g, *a, |ga| zip3(ga, gy, bv, |s, gy, b| *s += gy * b));
                self.acc(g, *b, |gb| zip3(gb, gy, av, |s, gy, a| *s += gy * a));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                self.acc(g, *a, |ga| zip3(ga, gy, bv, |s, gy, b| *s += gy / b));
                self.acc(g, *b, |gb| {
                    for ((s, &gy), (&yv, &b)) in gb.iter_mut().zip(gy).zip(y.iter().zip(bv)) {
                        *s -= gy * yv / b;
                    }
                });
            }
            Op::AddRow(a, r) => {
                let cols = node.cols.max(1);
                self.acc(g, *a, |ga| add_into(ga, gy));
                self.acc(g, *r, |gr| {
                    for row in gy.chunks(cols) {
                        add_into(gr, row);
                    }
                });
            }
            Op::MulConst(a, c) => {
                self.acc(g, *a, |ga| zip3(ga, gy, c, |s, gy, c| *s += gy * c));
            }
            Op::Scale(a, k) => {
                self.acc(g, *a, |ga| {
                    for (s, &v) in ga.iter_mut().zip(gy) {
                        *s += v * k;
                    }
                });
            }
            Op::Offset(a) => self.acc(g, *a, |ga| add_into(ga, gy)),
            Op::Tanh(a) => self.acc(g, *a, |ga| zip3(ga, gy, y, |s, gy, y| *s += gy * (1.0 - y * y))),
            Op::Exp(a) => self.acc(g, *a, |ga| zip3(ga, gy, y, |s, gy, y| *s += gy * y)),
            Op::Ln(a) => {
                let av = self.value(*a);
                self.acc(g, *a, |ga| zip3(ga, gy, av, |s, gy, x| *s += gy / x));
            }
            Op::Sqrt(a) => self.acc(g, *a, |ga| zip3(ga, gy, y, |s, gy, y| *s += 0.5 * gy / y)),
            Op::Square(a) => {
                let av = self.value(*a);
                self.acc(g, *a, |ga| zip3(ga, gy, av, |s, gy, x| *s += 2.0 * gy * x));
            }
            Op::Sigmoid(a) => {
                self.acc(g, *a, |ga| zip3(ga, gy, y, |s, gy, y| *s += gy * y * (1.0 - y)))
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                self.acc(g, *a, |ga| {
                    zip3(ga, gy, av, |s, gy, x| {
                        if x >= *lo && x <= *hi {
                            *s += gy
                        }
                    })
                });
            }
            Op::Concat(parts) => {
                let rows = node.rows;
                let cols = node.cols;
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    self.acc(g, p, |gp| {
                        for i in 0..rows {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &gy[i * cols + start..i * cols + start + w],
                            );
                        }
                    });
                    start += w;
                }
            }
            Op::Slice(a, start) => {
                let cols = self.shape(*a).1;
                let len = node.cols;
                self.acc(g, *a, |ga| {
                    for i in 0..node.rows {
                        add_into(
                            &mut ga[i * cols + start..i * cols + start + len],
                            &gy[i * len..(i + 1) * len],
                        );
                    }
                });
            }
            Op::RepeatRows(a) => {
                let cols = node.cols.max(1);
                self.acc(g, *a, |ga| {
                    for row in gy.chunks(cols) {
                        add_into(ga, row);
                    }
                });
            }
            Op::SumCols(a) => {
                let cols = self.shape(*a).1;
                self.acc(g, *a, |ga| {
                    for (i, &v) in gy.iter().enumerate() {
                        for s in &mut ga[i * cols..(i + 1) * cols] {
                            *s += v;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let v = gy[0];
                self.acc(g, *a, |ga| ga.iter_mut().for_each(|s| *s += v));
            }
            Op::LogSoftmax(a) => {
                let cols = node.cols.max(1);
                self.acc(g, *a, |ga| {
                    for ((gar, gyr), yr) in ga.chunks_mut(cols).zip(gy.chunks(cols)).zip(y.chunks(cols)) {
                        let total: f64 = gyr.iter().sum();
                        for ((s, &gv), &lp) in gar.iter_mut().zip(gyr).zip(yr) {
                            *s += gv - lp.exp() * total;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip3(dst: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(&mut f64, f64, f64)) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        f(d, x, y);
    }
}
