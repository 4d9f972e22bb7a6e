//! Reverse-mode tape over row-major `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1×1`. Nodes are appended in
//! evaluation order, so a single reverse sweep over the node list is a valid
//! topological order for backpropagation.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Hand-written backward rule for ops defined outside this crate.
///
/// Receives the upstream gradient and the input values; must return one
/// gradient per input, each shaped like that input.
pub type BackwardFn = Box<dyn Fn(&Mat, &[&Mat]) -> Vec<Mat>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gelu(Var),
    Silu(Var),
    Glu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        probs: Vec<Mat>,
    },
    GatherRows(Var, Rc<[Option<usize>]>),
    GatherCols(Var, Rc<[usize]>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RepeatRow(Var),
    Mse(Var, Var),
    L1(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Rc<[usize]>,
        probs: Mat,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    needs_grad: bool,
}

/// A recording of one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.push_rc(Rc::new(value), op, needs_grad)
    }

    fn push_rc(&mut self, value: Rc<Mat>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf sharing storage with a parameter tensor.
    pub fn leaf_shared(&mut self, value: Rc<Mat>, needs_grad: bool) -> Var {
        self.push_rc(value, Op::Leaf, needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row: row shape mismatch");
        let out = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row: row shape mismatch");
        let out = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| gelu_parts(x).0);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    /// Gated linear unit over column halves: `left ⊙ σ(right)`.
    pub fn glu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (_, n) = x.dim();
        assert!(n % 2 == 0, "glu: odd column count");
        let h = n / 2;
        let left = x.slice(s![.., ..h]);
        let right = x.slice(s![.., h..]);
        let mut out = left.to_owned();
        Zip::from(&mut out)
            .and(&right)
            .for_each(|o, &r| *o *= sigmoid(r));
        let ng = self.ng(a);
        self.push(out, Op::Glu(a), ng)
    }

    /// Row-wise layer normalization with affine `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, n) = xv.dim();
        assert_eq!(self.shape(gamma), (1, n));
        assert_eq!(self.shape(beta), (1, n));
        let mut xhat = Mat::zeros((rows, n));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &(&xhat * self.value(gamma)) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `Tq×F`, `k` and `v` are `Tk×F`; `F` is split into `heads`
    /// contiguous column blocks. `bias` holds either one `Tq×Tk` additive
    /// matrix shared by all heads or one per head; `-inf` entries mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, bias: &[Mat]) -> Var {
        let (tq, f) = self.shape(q);
        let (tk, fk) = self.shape(k);
        assert_eq!(f, fk, "attention: q/k width mismatch");
        assert_eq!(self.shape(v), (tk, f), "attention: v shape mismatch");
        assert!(heads > 0 && f % heads == 0, "attention: width not divisible by heads");
        assert!(bias.len() == 1 || bias.len() == heads, "attention: bias count");
        let dh = f / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut out = Mat::zeros((tq, f));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = qv.slice(cols);
            let kh = kv.slice(cols);
            let vh = vv.slice(cols);
            let b = &bias[if bias.len() == 1 { 0 } else { h }];
            assert_eq!(b.dim(), (tq, tk), "attention: bias shape");
            let mut sc = qh.dot(&kh.t()) * scale + b;
            softmax_rows_inplace(&mut sc);
            out.slice_mut(cols).assign(&sc.dot(&vh));
            probs.push(sc);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            ng,
        )
    }

    /// Builds a matrix whose row `i` is row `idx[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[Option<usize>]>) -> Var {
        let av = self.value(a);
        let (rows, n) = av.dim();
        let mut out = Mat::zeros((idx.len(), n));
        for (i, src) in idx.iter().enumerate() {
            if let Some(r) = *src {
                assert!(r < rows, "gather_rows: index out of range");
                out.row_mut(i).assign(&av.row(r));
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    pub fn gather_cols(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let out = self.value(a).select(Axis(1), &idx);
        let ng = self.ng(a);
        self.push(out, Op::GatherCols(a, idx), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: height mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Stacks a `1×n` row `times` times.
    pub fn repeat_row(&mut self, row: Var, times: usize) -> Var {
        let rv = self.value(row);
        assert_eq!(rv.nrows(), 1, "repeat_row: expects a single row");
        let out = rv
            .broadcast((times, rv.ncols()))
            .expect("broadcast")
            .to_owned();
        let ng = self.ng(row);
        self.push(out, Op::RepeatRow(row), ng)
    }

    /// Mean squared error over all entries, as a `1×1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse: shape mismatch");
        let av = self.value(a);
        let n = av.len() as f64;
        let s = Zip::from(av)
            .and(self.value(b))
            .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
        let ng = self.ng(a) || self.ng(b);
        self.push(Mat::from_elem((1, 1), s / n), Op::Mse(a, b), ng)
    }

    /// Mean absolute error over all entries, as a `1×1` node.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "l1: shape mismatch");
        let av = self.value(a);
        let n = av.len() as f64;
        let s = Zip::from(av)
            .and(self.value(b))
            .fold(0.0, |acc, &x, &y| acc + (x - y).abs());
        let ng = self.ng(a) || self.ng(b);
        self.push(Mat::from_elem((1, 1), s / n), Op::L1(a, b), ng)
    }

    /// Mean over rows of softmax cross-entropy against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<[usize]>) -> Var {
        let lv = self.value(logits);
        let (rows, classes) = lv.dim();
        assert_eq!(rows, labels.len(), "cross_entropy: label count");
        let mut probs = lv.clone();
        softmax_rows_inplace(&mut probs);
        let mut total = 0.0;
        for (r, row) in lv.rows().into_iter().enumerate() {
            let y = labels[r];
            assert!(y < classes, "cross_entropy: label out of range");
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let ng = self.ng(logits);
        self.push(
            Mat::from_elem((1, 1), total / rows as f64),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Registers an externally computed op with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Mat, backward: BackwardFn) -> Var {
        let ng = inputs.iter().any(|&p| self.ng(p));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            ng,
        )
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be 1×1");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g * *c),
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*row) {
                    self.acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*row));
                }
                if self.ng(*row) {
                    let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *row, gr);
                }
            }
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(|x| gelu_parts(x).1);
                d *= g;
                self.acc(grads, *a, d);
            }
            Op::Silu(a) => {
                let mut d = self.value(*a).mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                d *= g;
                self.acc(grads, *a, d);
            }
            Op::Glu(a) => {
                let x = self.value(*a);
                let (rows, n) = x.dim();
                let h = n / 2;
                let mut d = Mat::zeros((rows, n));
                for r in 0..rows {
                    for c in 0..h {
                        let l = x[[r, c]];
                        let sg = sigmoid(x[[r, c + h]]);
                        d[[r, c]] = g[[r, c]] * sg;
                        d[[r, c + h]] = g[[r, c]] * l * sg * (1.0 - sg);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.ng(*beta) {
                    self.acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*gamma) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *gamma, gg);
                }
                if self.ng(*x) {
                    let gam = self.value(*gamma);
                    let (rows, n) = xhat.dim();
                    let nf = n as f64;
                    let mut dx = Mat::zeros((rows, n));
                    for r in 0..rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..n {
                            let dxh = g[[r, c]] * gam[[0, c]];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[[r, c]];
                        }
                        for c in 0..n {
                            let dxh = g[[r, c]] * gam[[0, c]];
                            dx[[r, c]] =
                                inv_std[r] / nf * (nf * dxh - sum_d - xhat[[r, c]] * sum_dx);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let f = qv.ncols();
                let dh = f / heads;
                let mut dq = Mat::zeros(qv.dim());
                let mut dk = Mat::zeros(kv.dim());
                let mut dv = Mat::zeros(vv.dim());
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let go = g.slice(cols);
                    let vh = vv.slice(cols);
                    let dp = go.dot(&vh.t());
                    dv.slice_mut(cols).assign(&p.t().dot(&go));
                    let mut ds = Mat::zeros(p.dim());
                    for ((mut dsr, pr), dpr) in
                        ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows())
                    {
                        let dot: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
                        for ((o, &pi), &di) in dsr.iter_mut().zip(pr.iter()).zip(dpr.iter()) {
                            *o = pi * (di - dot) * scale;
                        }
                    }
                    dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                    dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                }
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
            Op::GatherRows(a, idx) => {
                if self.ng(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for (i, src) in idx.iter().enumerate() {
                        if let Some(r) = *src {
                            let mut row = d.row_mut(r);
                            row += &g.row(i);
                        }
                    }
                    self.acc(grads, *a, d);
                }
            }
            Op::GatherCols(a, idx) => {
                if self.ng(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for (j, &c) in idx.iter().enumerate() {
                        let mut col = d.column_mut(c);
                        col += &g.column(j);
                    }
                    self.acc(grads, *a, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).nrows();
                    if self.ng(p) {
                        self.acc(grads, p, g.slice(s![start..start + r, ..]).to_owned());
                    }
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).ncols();
                    if self.ng(p) {
                        self.acc(grads, p, g.slice(s![.., start..start + c]).to_owned());
                    }
                    start += c;
                }
            }
            Op::RepeatRow(row) => {
                self.acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len() as f64;
                let gs = g[[0, 0]] * 2.0 / n;
                let diff = self.value(*a) - self.value(*b);
                if self.ng(*b) {
                    self.acc(grads, *b, &diff * -gs);
                }
                if self.ng(*a) {
                    self.acc(grads, *a, diff * gs);
                }
            }
            Op::L1(a, b) => {
                let n = self.value(*a).len() as f64;
                let gs = g[[0, 0]] / n;
                let mut sign = self.value(*a) - self.value(*b);
                sign.mapv_inplace(|d| {
                    if d > 0.0 {
                        gs
                    } else if d < 0.0 {
                        -gs
                    } else {
                        0.0
                    }
                });
                if self.ng(*b) {
                    self.acc(grads, *b, -&sign);
                }
                if self.ng(*a) {
                    self.acc(grads, *a, sign);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let rows = probs.nrows() as f64;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d[[r, y]] -= 1.0;
                }
                d *= g[[0, 0]] / rows;
                self.acc(grads, *logits, d);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).dim();
                self.acc(grads, *a, Mat::from_elem(shape, g[[0, 0]]));
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Mat> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = backward(g, &vals);
                assert_eq!(gs.len(), inputs.len(), "custom op returned wrong grad count");
                for (&inp, gi) in inputs.iter().zip(gs) {
                    assert_eq!(gi.dim(), self.value(inp).dim(), "custom op grad shape");
                    self.acc(grads, inp, gi);
                }
            }
        }
    }
}
