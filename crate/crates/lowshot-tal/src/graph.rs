//! Reverse-mode automatic differentiation on f64 matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the ids of its inputs. [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients. All tensors are `ndarray::Array2<f64>`;
//! vectors are 1xD or Tx1, scalars are 1x1.
//!
//! The op set is exactly what the model needs (attention, layer norm,
//! convolutions, pooling, the loss heads). Shape errors are programming
//! errors and panic.

use ndarray::{s, Array2, Axis};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MinElem(NodeId, NodeId),
    MaxElem(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    ScaleByNode(NodeId, NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    ClampEps(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId, f64),
    L2NormRows(NodeId, f64),
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    AvgPool2Rows(NodeId),
    Conv1dSame {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        kernel: usize,
    },
    Reshape(NodeId),
    CrossEntropyRows(NodeId, Vec<usize>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by one backward pass, addressed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads[id.0].take()
    }
}

/// The autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() called on non-scalar node");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert an input (leaf) node. Leaves are where gradients are read.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) / self.value(b);
        self.push(value, Op::Div(a, b))
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let mut value = self.value(a).clone();
        value.zip_mut_with(self.value(b), |x, &y| *x = x.min(y));
        self.push(value, Op::MinElem(a, b))
    }

    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let mut value = self.value(a).clone();
        value.zip_mut_with(self.value(b), |x, &y| *x = x.max(y));
        self.push(value, Op::MaxElem(a, b))
    }

    /// Broadcast-add a 1xD row onto every row of an NxD matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.value(row).nrows(), 1);
        assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let value = self.value(a) + &self.value(row).row(0);
        self.push(value, Op::AddRow(a, row))
    }

    /// Broadcast-multiply every row of an NxD matrix by a 1xD row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.value(row).nrows(), 1);
        assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let value = self.value(a) * &self.value(row).row(0);
        self.push(value, Op::MulRow(a, row))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a) + s;
        self.push(value, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s))
    }

    /// Multiply a matrix by a 1x1 node.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).dim(), (1, 1));
        let factor = self.value(s)[[0, 0]];
        let value = self.value(a) * factor;
        self.push(value, Op::ScaleByNode(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(gelu_scalar);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(sigmoid_scalar);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(softplus_scalar);
        self.push(value, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Ln(a))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where unclamped.
    pub fn clamp_eps(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::ClampEps(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let denom = (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) / denom);
        }
        self.push(value, Op::LayerNormRows(a, eps))
    }

    /// Row-wise L2 normalization: `y = x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let norm = (row.mapv(|v| v * v).sum() + eps).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        self.push(value, Op::L2NormRows(a, eps))
    }

    /// Column means: NxD -> 1xD.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows on empty matrix")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = Array2::from_elem((1, 1), v.sum() / (v.len() as f64));
        self.push(value, Op::MeanAll(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.ncols(), cols);
            value.slice_mut(s![offset..offset + v.nrows(), ..]).assign(v);
            offset += v.nrows();
        }
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), rows);
            value.slice_mut(s![.., offset..offset + v.ncols()]).assign(v);
            offset += v.ncols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end))
    }

    /// Select rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let v = self.value(a);
        let mut value = Array2::zeros((indices.len(), v.ncols()));
        for (k, &i) in indices.iter().enumerate() {
            value.row_mut(k).assign(&v.row(i));
        }
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    /// Non-overlapping window-2 average pooling over rows; a trailing odd
    /// row is dropped.
    pub fn avg_pool2_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out_rows = v.nrows() / 2;
        assert!(out_rows >= 1, "avg_pool2_rows needs at least 2 rows");
        let mut value = Array2::zeros((out_rows, v.ncols()));
        for k in 0..out_rows {
            let combined = &v.row(2 * k) + &v.row(2 * k + 1);
            value.row_mut(k).assign(&(combined / 2.0));
        }
        self.push(value, Op::AvgPool2Rows(a))
    }

    /// 1-D convolution over rows with zero same-padding.
    ///
    /// `input` is TxC_in, `weight` is (kernel*C_in)xC_out laid out with the
    /// tap index outermost, `bias` is 1xC_out.
    pub fn conv1d_same(&mut self, input: NodeId, weight: NodeId, bias: NodeId, kernel: usize) -> NodeId {
        assert!(kernel % 2 == 1, "conv1d_same requires an odd kernel");
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (t, c_in) = x.dim();
        assert_eq!(w.nrows(), kernel * c_in);
        let c_out = w.ncols();
        assert_eq!(b.dim(), (1, c_out));
        let offset = kernel / 2;
        let mut value = Array2::zeros((t, c_out));
        for tap in 0..kernel {
            let w_tap = w.slice(s![tap * c_in..(tap + 1) * c_in, ..]);
            for row in 0..t {
                let src = row as isize + tap as isize - offset as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let contribution = x.row(src as usize).dot(&w_tap);
                value.row_mut(row).zip_mut_with(&contribution, |o, &c| *o += c);
            }
        }
        value += &b.row(0);
        self.push(
            value,
            Op::Conv1dSame {
                input,
                weight,
                bias,
                kernel,
            },
        )
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols);
        let value = Array2::from_shape_vec((rows, cols), v.iter().copied().collect())
            .expect("reshape length checked");
        self.push(value, Op::Reshape(a))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let v = self.value(logits);
        assert_eq!(v.nrows(), labels.len());
        let mut total = 0.0;
        for (row, &label) in v.rows().into_iter().zip(labels) {
            assert!(label < v.ncols());
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.mapv(|x| (x - max).exp()).sum().ln();
            total += lse - row[label];
        }
        let value = Array2::from_elem((1, 1), total / labels.len() as f64);
        self.push(value, Op::CrossEntropyRows(logits, labels.to_vec()))
    }

    /// Run backpropagation from a 1x1 node, returning gradients for every
    /// node that influenced it.
    pub fn backward(&self, from: NodeId) -> Gradients {
        assert_eq!(
            self.value(from).dim(),
            (1, 1),
            "backward starts from a scalar node"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[from.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=from.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    fn accumulate(&self, idx: usize, grad: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        fn add_to(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
            match slot {
                Some(existing) => *existing += &delta,
                None => *slot = Some(delta),
            }
        }

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = grad.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(grad);
                add_to(&mut grads[a.0], da);
                add_to(&mut grads[b.0], db);
            }
            Op::Transpose(a) => add_to(&mut grads[a.0], grad.t().to_owned()),
            Op::Add(a, b) => {
                add_to(&mut grads[a.0], grad.clone());
                add_to(&mut grads[b.0], grad.clone());
            }
            Op::Sub(a, b) => {
                add_to(&mut grads[a.0], grad.clone());
                add_to(&mut grads[b.0], -grad.clone());
            }
            Op::Mul(a, b) => {
                add_to(&mut grads[a.0], grad * self.value(*b));
                add_to(&mut grads[b.0], grad * self.value(*a));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                add_to(&mut grads[a.0], grad / bv);
                let db = -(grad * self.value(*a)) / (bv * bv);
                add_to(&mut grads[b.0], db);
            }
            Op::MinElem(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = grad.clone();
                let mut db = grad.clone();
                for ((x, y), (ga, gb)) in av
                    .iter()
                    .zip(bv.iter())
                    .zip(da.iter_mut().zip(db.iter_mut()))
                {
                    if x <= y {
                        *gb = 0.0;
                    } else {
                        *ga = 0.0;
                    }
                }
                add_to(&mut grads[a.0], da);
                add_to(&mut grads[b.0], db);
            }
            Op::MaxElem(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = grad.clone();
                let mut db = grad.clone();
                for ((x, y), (ga, gb)) in av
                    .iter()
                    .zip(bv.iter())
                    .zip(da.iter_mut().zip(db.iter_mut()))
                {
                    if x >= y {
                        *gb = 0.0;
                    } else {
                        *ga = 0.0;
                    }
                }
                add_to(&mut grads[a.0], da);
                add_to(&mut grads[b.0], db);
            }
            Op::AddRow(a, row) => {
                add_to(&mut grads[a.0], grad.clone());
                let drow = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(&mut grads[row.0], drow);
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                add_to(&mut grads[a.0], grad * &rv.row(0));
                let drow = (grad * self.value(*a))
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0));
                add_to(&mut grads[row.0], drow);
            }
            Op::AddScalar(a) => add_to(&mut grads[a.0], grad.clone()),
            Op::Scale(a, sc) => add_to(&mut grads[a.0], grad * *sc),
            Op::ScaleByNode(a, sn) => {
                let factor = self.value(*sn)[[0, 0]];
                add_to(&mut grads[a.0], grad * factor);
                let ds = (grad * self.value(*a)).sum();
                add_to(&mut grads[sn.0], Array2::from_elem((1, 1), ds));
            }
            Op::Relu(a) => {
                let mut da = grad.clone();
                da.zip_mut_with(self.value(*a), |g, &x| {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                });
                add_to(&mut grads[a.0], da);
            }
            Op::Gelu(a) => {
                let mut da = grad.clone();
                da.zip_mut_with(self.value(*a), |g, &x| *g *= gelu_grad_scalar(x));
                add_to(&mut grads[a.0], da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                add_to(&mut grads[a.0], grad * y * &y.mapv(|v| 1.0 - v));
            }
            Op::Softplus(a) => {
                let mut da = grad.clone();
                da.zip_mut_with(self.value(*a), |g, &x| *g *= sigmoid_scalar(x));
                add_to(&mut grads[a.0], da);
            }
            Op::Exp(a) => add_to(&mut grads[a.0], grad * &self.nodes[idx].value),
            Op::Ln(a) => add_to(&mut grads[a.0], grad / self.value(*a)),
            Op::ClampEps(a, lo, hi) => {
                let mut da = grad.clone();
                da.zip_mut_with(self.value(*a), |g, &x| {
                    if x <= *lo || x >= *hi {
                        *g = 0.0;
                    }
                });
                add_to(&mut grads[a.0], da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut da = Array2::zeros(grad.raw_dim());
                for ((y_row, g_row), mut out) in y
                    .rows()
                    .into_iter()
                    .zip(grad.rows())
                    .zip(da.rows_mut())
                {
                    let dot: f64 = y_row.iter().zip(g_row.iter()).map(|(y, g)| y * g).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(y_row.iter()).zip(g_row.iter()) {
                        *o = yv * (gv - dot);
                    }
                }
                add_to(&mut grads[a.0], da);
            }
            Op::LayerNormRows(a, eps) => {
                let x = self.value(*a);
                let y = &self.nodes[idx].value;
                let d = x.ncols() as f64;
                let mut da = Array2::zeros(grad.raw_dim());
                for (((x_row, y_row), g_row), mut out) in x
                    .rows()
                    .into_iter()
                    .zip(y.rows())
                    .zip(grad.rows())
                    .zip(da.rows_mut())
                {
                    let mean = x_row.mean().unwrap();
                    let var = x_row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                    let denom = (var + eps).sqrt();
                    let g_mean: f64 = g_row.sum() / d;
                    let gy_mean: f64 =
                        g_row.iter().zip(y_row.iter()).map(|(g, y)| g * y).sum::<f64>() / d;
                    for ((o, &gv), &yv) in out.iter_mut().zip(g_row.iter()).zip(y_row.iter()) {
                        *o = (gv - g_mean - yv * gy_mean) / denom;
                    }
                }
                add_to(&mut grads[a.0], da);
            }
            Op::L2NormRows(a, eps) => {
                let x = self.value(*a);
                let y = &self.nodes[idx].value;
                let mut da = Array2::zeros(grad.raw_dim());
                for (((x_row, y_row), g_row), mut out) in x
                    .rows()
                    .into_iter()
                    .zip(y.rows())
                    .zip(grad.rows())
                    .zip(da.rows_mut())
                {
                    let norm = (x_row.mapv(|v| v * v).sum() + eps).sqrt();
                    let dot: f64 = y_row.iter().zip(g_row.iter()).map(|(y, g)| y * g).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(g_row.iter()).zip(y_row.iter()) {
                        *o = (gv - yv * dot) / norm;
                    }
                }
                add_to(&mut grads[a.0], da);
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).nrows() as f64;
                let per_row = grad.row(0).mapv(|g| g / n);
                let mut da = Array2::zeros(self.value(*a).raw_dim());
                for mut row in da.rows_mut() {
                    row.assign(&per_row);
                }
                add_to(&mut grads[a.0], da);
            }
            Op::SumAll(a) => {
                let g = grad[[0, 0]];
                add_to(
                    &mut grads[a.0],
                    Array2::from_elem(self.value(*a).raw_dim(), g),
                );
            }
            Op::MeanAll(a) => {
                let v = self.value(*a);
                let g = grad[[0, 0]] / v.len() as f64;
                add_to(&mut grads[a.0], Array2::from_elem(v.raw_dim(), g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    let slice = grad.slice(s![offset..offset + rows, ..]).to_owned();
                    add_to(&mut grads[p.0], slice);
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).ncols();
                    let slice = grad.slice(s![.., offset..offset + cols]).to_owned();
                    add_to(&mut grads[p.0], slice);
                    offset += cols;
                }
            }
            Op::SliceRows(a, start, _end) => {
                let mut da = Array2::zeros(self.value(*a).raw_dim());
                da.slice_mut(s![*start..*start + grad.nrows(), ..])
                    .assign(grad);
                add_to(&mut grads[a.0], da);
            }
            Op::SliceCols(a, start, _end) => {
                let mut da = Array2::zeros(self.value(*a).raw_dim());
                da.slice_mut(s![.., *start..*start + grad.ncols()])
                    .assign(grad);
                add_to(&mut grads[a.0], da);
            }
            Op::GatherRows(a, indices) => {
                let mut da = Array2::zeros(self.value(*a).raw_dim());
                for (k, &i) in indices.iter().enumerate() {
                    da.row_mut(i).zip_mut_with(&grad.row(k), |o, &g| *o += g);
                }
                add_to(&mut grads[a.0], da);
            }
            Op::AvgPool2Rows(a) => {
                let mut da = Array2::zeros(self.value(*a).raw_dim());
                for k in 0..grad.nrows() {
                    let half = grad.row(k).mapv(|g| g / 2.0);
                    da.row_mut(2 * k).assign(&half);
                    da.row_mut(2 * k + 1).assign(&half);
                }
                add_to(&mut grads[a.0], da);
            }
            Op::Conv1dSame {
                input,
                weight,
                bias,
                kernel,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (t, c_in) = x.dim();
                let offset = kernel / 2;
                let mut dx = Array2::zeros(x.raw_dim());
                let mut dw = Array2::zeros(w.raw_dim());
                for tap in 0..*kernel {
                    let w_tap = w.slice(s![tap * c_in..(tap + 1) * c_in, ..]);
                    for row in 0..t {
                        let src = row as isize + tap as isize - offset as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        let g_row = grad.row(row);
                        // dx[src] += w_tap . g_row
                        let dx_contribution = w_tap.dot(&g_row);
                        dx.row_mut(src).zip_mut_with(&dx_contribution, |o, &g| *o += g);
                        // dw[tap] += outer(x[src], g_row)
                        let x_row = x.row(src);
                        let mut dw_tap = dw.slice_mut(s![tap * c_in..(tap + 1) * c_in, ..]);
                        for (ci, &xv) in x_row.iter().enumerate() {
                            dw_tap.row_mut(ci).zip_mut_with(&g_row, |o, &g| *o += xv * g);
                        }
                    }
                }
                let db = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(&mut grads[input.0], dx);
                add_to(&mut grads[weight.0], dw);
                add_to(&mut grads[bias.0], db);
            }
            Op::Reshape(a) => {
                let src = self.value(*a);
                let da = Array2::from_shape_vec(src.raw_dim(), grad.iter().copied().collect())
                    .expect("reshape gradient length matches");
                add_to(&mut grads[a.0], da);
            }
            Op::CrossEntropyRows(logits, labels) => {
                let v = self.value(*logits);
                let g = grad[[0, 0]] / labels.len() as f64;
                let mut da = Array2::zeros(v.raw_dim());
                for ((row, &label), mut out) in
                    v.rows().into_iter().zip(labels).zip(da.rows_mut())
                {
                    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let exps = row.mapv(|x| (x - max).exp());
                    let sum = exps.sum();
                    for (j, o) in out.iter_mut().enumerate() {
                        let softmax = exps[j] / sum;
                        *o = g * (softmax - if j == label { 1.0 } else { 0.0 });
                    }
                }
                add_to(&mut grads[logits.0], da);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar function at `x`.
    fn numeric_grad(f: &mut dyn FnMut(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut grad = Array2::zeros(x.raw_dim());
        let mut probe = x.clone();
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let original = probe[[r, c]];
            probe[[r, c]] = original + h;
            let plus = f(&probe);
            probe[[r, c]] = original - h;
            let minus = f(&probe);
            probe[[r, c]] = original;
            grad[[r, c]] = (plus - minus) / (2.0 * h);
        }
        grad
    }

    fn assert_close(analytic: &Array2<f64>, numeric: &Array2<f64>, tol: f64) {
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let err = (a - n).abs();
            let scale = a.abs().max(n.abs());
            assert!(
                err < tol * scale.max(1e-2),
                "gradient mismatch: analytic {a}, numeric {n}"
            );
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Check d(scalar_fn(x))/dx against finite differences.
    fn check_unary(build: &dyn Fn(&mut Graph, NodeId) -> NodeId, x: Array2<f64>) {
        let mut g = Graph::new();
        let input = g.leaf(x.clone());
        let out = build(&mut g, input);
        let loss = g.sum_all(out);
        let grads = g.backward(loss);
        let analytic = grads.get(input).unwrap().clone();
        let mut f = |probe: &Array2<f64>| {
            let mut g = Graph::new();
            let input = g.leaf(probe.clone());
            let out = build(&mut g, input);
            let loss = g.sum_all(out);
            g.scalar(loss)
        };
        let numeric = numeric_grad(&mut f, &x, 1e-5);
        assert_close(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn unary_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 4, 5);
        check_unary(&|g, a| g.gelu(a), x.clone());
        check_unary(&|g, a| g.sigmoid(a), x.clone());
        check_unary(&|g, a| g.softplus(a), x.clone());
        check_unary(&|g, a| g.softmax_rows(a), x.clone());
        check_unary(&|g, a| g.layer_norm_rows(a, 1e-5), x.clone());
        check_unary(&|g, a| g.l2_normalize_rows(a, 1e-12), x.clone());
        check_unary(&|g, a| g.mean_rows(a), x.clone());
        check_unary(&|g, a| g.avg_pool2_rows(a), x.clone());
        check_unary(&|g, a| g.transpose(a), x.clone());
        check_unary(&|g, a| g.scale(a, -2.5), x.clone());
        check_unary(
            &|g, a| {
                let e = g.exp(a);
                g.ln(e)
            },
            x.clone(),
        );
        check_unary(&|g, a| g.slice_rows(a, 1, 3), x.clone());
        check_unary(&|g, a| g.slice_cols(a, 2, 4), x.clone());
        check_unary(&|g, a| g.gather_rows(a, &[0, 2, 2, 3]), x.clone());
        check_unary(&|g, a| g.reshape(a, 2, 10), x.clone());
        // Positive inputs for ln.
        let positive = x.mapv(|v| v.abs() + 0.5);
        check_unary(&|g, a| g.ln(a), positive);
    }

    #[test]
    fn binary_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = random_matrix(&mut rng, 3, 4);
        let b0 = random_matrix(&mut rng, 4, 2);
        // matmul: check gradient w.r.t. each side.
        for side in 0..2 {
            let mut g = Graph::new();
            let a = g.leaf(a0.clone());
            let b = g.leaf(b0.clone());
            let out = g.matmul(a, b);
            let loss = g.sum_all(out);
            let grads = g.backward(loss);
            let (probe_value, probe_id) = if side == 0 { (&a0, a) } else { (&b0, b) };
            let analytic = grads.get(probe_id).unwrap().clone();
            let mut f = |probe: &Array2<f64>| {
                let mut g = Graph::new();
                let a = g.leaf(if side == 0 { probe.clone() } else { a0.clone() });
                let b = g.leaf(if side == 1 { probe.clone() } else { b0.clone() });
                let out = g.matmul(a, b);
                let loss = g.sum_all(out);
                g.scalar(loss)
            };
            let numeric = numeric_grad(&mut f, probe_value, 1e-5);
            assert_close(&analytic, &numeric, 1e-4);
        }

        // elementwise binaries (avoid ties for min/max).
        let x0 = random_matrix(&mut rng, 3, 3);
        let y0 = random_matrix(&mut rng, 3, 3) + 3.0;
        type BinOp = fn(&mut Graph, NodeId, NodeId) -> NodeId;
        let cases: Vec<BinOp> = vec![
            |g, a, b| g.add(a, b),
            |g, a, b| g.sub(a, b),
            |g, a, b| g.mul(a, b),
            |g, a, b| g.div(a, b),
            |g, a, b| g.min_elem(a, b),
            |g, a, b| g.max_elem(a, b),
        ];
        for op in cases {
            let mut g = Graph::new();
            let a = g.leaf(x0.clone());
            let b = g.leaf(y0.clone());
            let out = op(&mut g, a, b);
            let loss = g.sum_all(out);
            let grads = g.backward(loss);
            let analytic_a = grads.get(a).unwrap().clone();
            let mut f = |probe: &Array2<f64>| {
                let mut g = Graph::new();
                let a = g.leaf(probe.clone());
                let b = g.leaf(y0.clone());
                let out = op(&mut g, a, b);
                let loss = g.sum_all(out);
                g.scalar(loss)
            };
            let numeric = numeric_grad(&mut f, &x0, 1e-5);
            assert_close(&analytic_a, &numeric, 1e-4);
        }
    }

    #[test]
    fn broadcast_and_conv_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = random_matrix(&mut rng, 5, 3);
        let row0 = random_matrix(&mut rng, 1, 3);
        // add_row / mul_row gradient w.r.t. the row.
        for which in 0..2 {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone());
            let row = g.leaf(row0.clone());
            let out = if which == 0 {
                g.add_row(x, row)
            } else {
                g.mul_row(x, row)
            };
            let loss = g.sum_all(out);
            let grads = g.backward(loss);
            let analytic = grads.get(row).unwrap().clone();
            let mut f = |probe: &Array2<f64>| {
                let mut g = Graph::new();
                let x = g.leaf(x0.clone());
                let row = g.leaf(probe.clone());
                let out = if which == 0 {
                    g.add_row(x, row)
                } else {
                    g.mul_row(x, row)
                };
                let loss = g.sum_all(out);
                g.scalar(loss)
            };
            let numeric = numeric_grad(&mut f, &row0, 1e-5);
            assert_close(&analytic, &numeric, 1e-4);
        }

        // conv1d: gradients w.r.t. input, weight, and bias.
        let x0 = random_matrix(&mut rng, 6, 2);
        let w0 = random_matrix(&mut rng, 3 * 2, 4);
        let b0 = random_matrix(&mut rng, 1, 4);
        let run = |x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>| {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone());
            let wi = g.leaf(w.clone());
            let bi = g.leaf(b.clone());
            let out = g.conv1d_same(xi, wi, bi, 3);
            let loss = g.sum_all(out);
            (g.scalar(loss), g, xi, wi, bi, loss)
        };
        let (_, g, xi, wi, bi, loss) = run(&x0, &w0, &b0);
        let grads = g.backward(loss);
        let mut fx = |p: &Array2<f64>| run(p, &w0, &b0).0;
        assert_close(grads.get(xi).unwrap(), &numeric_grad(&mut fx, &x0, 1e-5), 1e-4);
        let mut fw = |p: &Array2<f64>| run(&x0, p, &b0).0;
        assert_close(grads.get(wi).unwrap(), &numeric_grad(&mut fw, &w0, 1e-5), 1e-4);
        let mut fb = |p: &Array2<f64>| run(&x0, &w0, p).0;
        assert_close(grads.get(bi).unwrap(), &numeric_grad(&mut fb, &b0, 1e-5), 1e-4);
    }

    #[test]
    fn cross_entropy_matches_manual_softmax() {
        let mut g = Graph::new();
        let logits = g.leaf(array![[2.0, 0.0], [0.0, 1.0]]);
        let loss = g.cross_entropy_rows(logits, &[0, 1]);
        let expected = 0.5
            * (-(2.0f64.exp() / (2.0f64.exp() + 1.0)).ln()
                - (1.0f64.exp() / (1.0f64.exp() + 1.0)).ln());
        assert!((g.scalar(loss) - expected).abs() < 1e-12);

        let logits0 = array![[0.3, -0.2, 0.9], [0.0, 0.0, 0.1]];
        let labels = vec![2usize, 0usize];
        let mut g = Graph::new();
        let logits = g.leaf(logits0.clone());
        let loss = g.cross_entropy_rows(logits, &labels);
        let grads = g.backward(loss);
        let analytic = grads.get(logits).unwrap().clone();
        let mut f = |p: &Array2<f64>| {
            let mut g = Graph::new();
            let logits = g.leaf(p.clone());
            let loss = g.cross_entropy_rows(logits, &labels);
            g.scalar(loss)
        };
        let numeric = numeric_grad(&mut f, &logits0, 1e-5);
        assert_close(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        // loss = sum(x * x) has gradient 2x through two uses of the leaf.
        let x0 = array![[1.5, -2.0], [0.5, 3.0]];
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let prod = g.mul(x, x);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let expected = x0.mapv(|v| 2.0 * v);
        assert_eq!(grads.get(x).unwrap(), &expected);
    }

    #[test]
    fn concat_routes_gradients_to_parts() {
        let mut g = Graph::new();
        let a = g.leaf(array![[1.0, 2.0]]);
        let b = g.leaf(array![[3.0, 4.0], [5.0, 6.0]]);
        let cat = g.concat_rows(&[a, b]);
        let weights = g.leaf(array![[1.0, 10.0], [100.0, 1000.0], [2.0, 20.0]]);
        let weighted = g.mul(cat, weights);
        let loss = g.sum_all(weighted);
        let grads = g.backward(loss);
        assert_eq!(grads.get(a).unwrap(), &array![[1.0, 10.0]]);
        assert_eq!(grads.get(b).unwrap(), &array![[100.0, 1000.0], [2.0, 20.0]]);
    }

    #[test]
    fn avg_pool_halves_rows_and_drops_trailing() {
        let mut g = Graph::new();
        let x = g.leaf(array![[2.0], [4.0], [6.0], [8.0], [100.0]]);
        let pooled = g.avg_pool2_rows(x);
        assert_eq!(g.value(pooled), &array![[3.0], [7.0]]);
    }
}
