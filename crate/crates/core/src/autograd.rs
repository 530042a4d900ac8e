//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value on the tape is a 2-D matrix. Scalars are `1 x 1`. Image
//! batches are stored one sample per row in channel-major order
//! `(channel, y, x)`, with the geometry carried by the convolution and
//! pooling ops themselves.

use ndarray::{s, Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial geometry of a valid (no padding), stride-1 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 1 - self.kernel
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Geometry of a non-overlapping max pool (`window == stride`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
}

impl PoolGeometry {
    pub fn out_height(&self) -> usize {
        self.height / self.window
    }

    pub fn out_width(&self) -> usize {
        self.width / self.window
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Matrix),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LogClamped(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy(Var, Vec<usize>),
    PairwiseAbsDiff(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    RowOuter(Var, Var),
    RowSlice(Var, usize),
    GradReverse(Var, f64),
    SymNormalize(Var),
    Sum(Var),
    Mean(Var),
    Conv2d(Var, Var, Var, ConvGeometry),
    MaxPool2d(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `var`; zeros if
    /// the scalar does not depend on it.
    pub fn get(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros((r, c))
            }
        }
    }

    pub fn get_many(&self, vars: &[Var]) -> Vec<Matrix> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.value(var).dim()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf; gradients flow into it.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `x + bias` with `bias` a `1 x m` row broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let v = self.value(x) + self.value(bias);
        let rg = self.rg(&[x, bias]);
        self.push(v, Op::AddBias(x, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x).mapv(|e| scale * e + shift);
        let rg = self.rg(&[x]);
        self.push(v, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Elementwise product with a constant matrix of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Matrix) -> Var {
        let v = self.value(x) * &c;
        let rg = self.rg(&[x]);
        self.push(v, Op::MulConst(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e.max(0.0));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(v, Op::Tanh(x), rg)
    }

    /// `ln(clamp(x, lo, hi))`. The gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).mapv(|e| e.clamp(lo, hi).ln());
        let rg = self.rg(&[x]);
        self.push(v, Op::LogClamped(x, lo, hi), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Softmax(x), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = log_softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::LogSoftmax(x), rg)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits`. Returns a `1 x 1` node. Callers validate label range.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lsm = log_softmax_rows(self.value(logits));
        let n = labels.len().max(1) as f64;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -lsm[[i, y]])
            .sum();
        let rg = self.rg(&[logits]);
        self.push(
            Matrix::from_elem((1, 1), total / n),
            Op::CrossEntropy(logits, labels.to_vec()),
            rg,
        )
    }

    /// `n x d` -> `(n*n) x d`, where row `i*n + j` is `|v_i - v_j|`.
    pub fn pairwise_abs_diff(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut out = Matrix::zeros((n * n, d));
        for i in 0..n {
            for j in 0..n {
                let mut row = out.row_mut(i * n + j);
                for k in 0..d {
                    row[k] = (xv[[i, k]] - xv[[j, k]]).abs();
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::PairwiseAbsDiff(x), rg)
    }

    /// Row-major reshape preserving element order.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols, "reshape must preserve size");
        let flat: Vec<f64> = xv.iter().copied().collect();
        let v = Matrix::from_shape_vec((rows, cols), flat).expect("valid reshape");
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts agree");
        let rg = self.rg(&[a, b]);
        self.push(v, Op::ConcatCols(a, b), rg)
    }

    /// Per-row flattened outer product: for `f: n x d`, `p: n x k`, returns
    /// `n x (k*d)` with entry `[i, c*d + j] = p[i, c] * f[i, j]`.
    pub fn row_outer(&mut self, f: Var, p: Var) -> Var {
        let fv = self.value(f);
        let pv = self.value(p);
        let (n, d) = fv.dim();
        let k = pv.ncols();
        let mut out = Matrix::zeros((n, k * d));
        for i in 0..n {
            for c in 0..k {
                let pc = pv[[i, c]];
                for j in 0..d {
                    out[[i, c * d + j]] = pc * fv[[i, j]];
                }
            }
        }
        let rg = self.rg(&[f, p]);
        self.push(out, Op::RowOuter(f, p), rg)
    }

    /// Rows `start..end`.
    pub fn row_slice(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(&[x]);
        self.push(v, Op::RowSlice(x, start), rg)
    }

    /// Gradient reversal: identity forward, upstream gradient multiplied by
    /// `-coefficient` on the way back.
    pub fn grad_reverse(&mut self, x: Var, coefficient: f64) -> Var {
        let v = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(v, Op::GradReverse(x, coefficient), rg)
    }

    /// `M^{-1/2} (R + I) M^{-1/2}` with `M` the row-sum degree matrix of
    /// `R + I`.
    pub fn sym_normalize(&mut self, raw: Var) -> Var {
        let v = sym_normalize_value(self.value(raw));
        let rg = self.rg(&[raw]);
        self.push(v, Op::SymNormalize(raw), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len().max(1) as f64;
        let v = Matrix::from_elem((1, 1), xv.sum() / n);
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean(x), rg)
    }

    /// Valid, stride-1 convolution. `weight` is `out_channels x patch_len`,
    /// `bias` is `1 x out_channels`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, geom: ConvGeometry) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let n = xv.nrows();
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let mut out = Matrix::zeros((n, geom.out_channels * ho * wo));
        for i in 0..n {
            let cols = im2col(xv.row(i).as_slice().expect("contiguous row"), &geom);
            // (ho*wo) x out_channels
            let res = cols.dot(&wv.t());
            for oc in 0..geom.out_channels {
                let b = bv[[0, oc]];
                for p in 0..ho * wo {
                    out[[i, oc * ho * wo + p]] = res[[p, oc]] + b;
                }
            }
        }
        let rg = self.rg(&[x, weight, bias]);
        self.push(out, Op::Conv2d(x, weight, bias, geom), rg)
    }

    pub fn max_pool2d(&mut self, x: Var, geom: PoolGeometry) -> Var {
        let xv = self.value(x);
        let n = xv.nrows();
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let out_len = geom.channels * ho * wo;
        let mut out = Matrix::zeros((n, out_len));
        let mut argmax = vec![0usize; n * out_len];
        for i in 0..n {
            for c in 0..geom.channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dy in 0..geom.window {
                            for dx in 0..geom.window {
                                let y = oy * geom.window + dy;
                                let xx = ox * geom.window + dx;
                                let idx = c * geom.height * geom.width + y * geom.width + xx;
                                if xv[[i, idx]] > best {
                                    best = xv[[i, idx]];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = c * ho * wo + oy * wo + ox;
                        out[[i, o]] = best;
                        argmax[i * out_len + o] = best_idx;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::MaxPool2d(x, argmax), rg)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.dot(&bv.t()));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, av.t().dot(g));
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[b.0].requires_grad {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(grads, *a, g * bv);
                self.accumulate(grads, *b, g * av);
            }
            Op::Affine(x, scale) => {
                self.accumulate(grads, *x, g * *scale);
            }
            Op::MulConst(x, c) => {
                self.accumulate(grads, *x, g * c);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                Zip::from(&mut gx).and(xv).for_each(|gi, &xi| {
                    if xi <= 0.0 {
                        *gi = 0.0;
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g * &out.mapv(|s| s * (1.0 - s));
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = g * &out.mapv(|t| 1.0 - t * t);
                self.accumulate(grads, *x, gx);
            }
            Op::LogClamped(x, lo, hi) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                Zip::from(&mut gx).and(xv).for_each(|gi, &xi| {
                    if xi < *lo || xi > *hi {
                        *gi = 0.0;
                    } else {
                        *gi /= xi;
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                // dx = s * (g - <g, s>)
                let mut gx = Matrix::zeros(out.dim());
                for i in 0..out.nrows() {
                    let dot: f64 = (0..out.ncols()).map(|j| g[[i, j]] * out[[i, j]]).sum();
                    for j in 0..out.ncols() {
                        gx[[i, j]] = out[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                // dx = g - softmax * sum(g)
                let mut gx = g.clone();
                for i in 0..out.nrows() {
                    let gs: f64 = g.row(i).sum();
                    for j in 0..out.ncols() {
                        gx[[i, j]] -= out[[i, j]].exp() * gs;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy(logits, labels) => {
                let mut gx = softmax_rows(self.value(*logits));
                let n = labels.len().max(1) as f64;
                let scale = g[[0, 0]] / n;
                for (i, &y) in labels.iter().enumerate() {
                    gx[[i, y]] -= 1.0;
                }
                gx.mapv_inplace(|e| e * scale);
                self.accumulate(grads, *logits, gx);
            }
            Op::PairwiseAbsDiff(x) => {
                let xv = self.value(*x);
                let (n, d) = xv.dim();
                let mut gx = Matrix::zeros((n, d));
                for i in 0..n {
                    for j in 0..n {
                        let r = i * n + j;
                        for k in 0..d {
                            let diff = xv[[i, k]] - xv[[j, k]];
                            let sg = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            let v = g[[r, k]] * sg;
                            gx[[i, k]] += v;
                            gx[[j, k]] -= v;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let (r, c) = self.shape(*x);
                let flat: Vec<f64> = g.iter().copied().collect();
                let gx = Matrix::from_shape_vec((r, c), flat).expect("valid reshape");
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                self.accumulate(grads, *a, g.slice(s![.., ..ca]).to_owned());
                self.accumulate(grads, *b, g.slice(s![.., ca..]).to_owned());
            }
            Op::RowOuter(f, p) => {
                let fv = self.value(*f);
                let pv = self.value(*p);
                let (n, d) = fv.dim();
                let k = pv.ncols();
                let mut gf = Matrix::zeros((n, d));
                let mut gp = Matrix::zeros((n, k));
                for i in 0..n {
                    for c in 0..k {
                        let pc = pv[[i, c]];
                        let mut acc = 0.0;
                        for j in 0..d {
                            let gij = g[[i, c * d + j]];
                            gf[[i, j]] += gij * pc;
                            acc += gij * fv[[i, j]];
                        }
                        gp[[i, c]] = acc;
                    }
                }
                self.accumulate(grads, *f, gf);
                self.accumulate(grads, *p, gp);
            }
            Op::RowSlice(x, start) => {
                let (r, c) = self.shape(*x);
                let mut gx = Matrix::zeros((r, c));
                gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *x, gx);
            }
            Op::GradReverse(x, coefficient) => {
                self.accumulate(grads, *x, g * (-*coefficient));
            }
            Op::SymNormalize(raw) => {
                let gx = sym_normalize_backward(self.value(*raw), g);
                self.accumulate(grads, *raw, gx);
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Matrix::from_elem((r, c), g[[0, 0]]));
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                let n = (r * c).max(1) as f64;
                self.accumulate(grads, *x, Matrix::from_elem((r, c), g[[0, 0]] / n));
            }
            Op::Conv2d(x, weight, bias, geom) => {
                let xv = self.value(*x);
                let wv = self.value(*weight);
                let n = xv.nrows();
                let hw = geom.out_height() * geom.out_width();
                let mut gw = Matrix::zeros(wv.dim());
                let mut gb = Matrix::zeros((1, geom.out_channels));
                let mut gx = Matrix::zeros(xv.dim());
                for i in 0..n {
                    // (hw) x out_channels view of the upstream gradient
                    let mut go = Matrix::zeros((hw, geom.out_channels));
                    for oc in 0..geom.out_channels {
                        for p in 0..hw {
                            go[[p, oc]] = g[[i, oc * hw + p]];
                        }
                        gb[[0, oc]] += go.column(oc).sum();
                    }
                    let cols = im2col(xv.row(i).as_slice().expect("contiguous row"), geom);
                    gw += &go.t().dot(&cols);
                    if self.nodes[x.0].requires_grad {
                        let gcols = go.dot(wv);
                        col2im_add(&gcols, geom, gx.row_mut(i).as_slice_mut().expect("row"));
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *weight, gw);
                self.accumulate(grads, *bias, gb);
            }
            Op::MaxPool2d(x, argmax) => {
                let (r, c) = self.shape(*x);
                let out_len = g.ncols();
                let mut gx = Matrix::zeros((r, c));
                for i in 0..r {
                    for o in 0..out_len {
                        gx[[i, argmax[i * out_len + o]]] += g[[i, o]];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    log_softmax_rows(x).mapv(f64::exp)
}

pub(crate) fn sym_normalize_value(raw: &Matrix) -> Matrix {
    let n = raw.nrows();
    let mut with_loops = raw.clone();
    for i in 0..n {
        with_loops[[i, i]] += 1.0;
    }
    let inv_sqrt: Vec<f64> = with_loops
        .rows()
        .into_iter()
        .map(|r| r.sum().powf(-0.5))
        .collect();
    let mut out = with_loops;
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    out
}

fn sym_normalize_backward(raw: &Matrix, g: &Matrix) -> Matrix {
    // A_ij = S_ij r_i r_j, S = R + I, r_i = deg_i^{-1/2}, deg_i = sum_k S_ik.
    let n = raw.nrows();
    let mut s_mat = raw.clone();
    for i in 0..n {
        s_mat[[i, i]] += 1.0;
    }
    let deg: Vec<f64> = s_mat.rows().into_iter().map(|r| r.sum()).collect();
    let r: Vec<f64> = deg.iter().map(|d| d.powf(-0.5)).collect();
    let mut d_r = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let t = g[[i, j]] * s_mat[[i, j]];
            d_r[i] += t * r[j];
            d_r[j] += t * r[i];
        }
    }
    let d_deg: Vec<f64> = (0..n)
        .map(|i| d_r[i] * -0.5 * deg[i].powf(-1.5))
        .collect();
    let mut gs = Matrix::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            gs[[i, j]] = g[[i, j]] * r[i] * r[j] + d_deg[i];
        }
    }
    gs
}

fn im2col(x: &[f64], geom: &ConvGeometry) -> Matrix {
    let (ho, wo, k) = (geom.out_height(), geom.out_width(), geom.kernel);
    let mut cols = Matrix::zeros((ho * wo, geom.patch_len()));
    for oy in 0..ho {
        for ox in 0..wo {
            let p = oy * wo + ox;
            let mut q = 0;
            for c in 0..geom.in_channels {
                let base = c * geom.height * geom.width;
                for ky in 0..k {
                    for kx in 0..k {
                        cols[[p, q]] = x[base + (oy + ky) * geom.width + ox + kx];
                        q += 1;
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &Matrix, geom: &ConvGeometry, out: &mut [f64]) {
    let (ho, wo, k) = (geom.out_height(), geom.out_width(), geom.kernel);
    for oy in 0..ho {
        for ox in 0..wo {
            let p = oy * wo + ox;
            let mut q = 0;
            for c in 0..geom.in_channels {
                let base = c * geom.height * geom.width;
                for ky in 0..k {
                    for kx in 0..k {
                        out[base + (oy + ky) * geom.width + ox + kx] += cols[[p, q]];
                        q += 1;
                    }
                }
            }
        }
    }
}
