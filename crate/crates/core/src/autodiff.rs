//! Tape-based reverse-mode automatic differentiation.
//!
//! Values are computed eagerly as operations are recorded. Every node keeps
//! whatever it needs for an exact local gradient (argmin positions, gather
//! indices, the forward value itself), so a single reverse sweep over the tape
//! yields gradients for every trainable leaf.
//!
//! Shapes follow two conventions: batched quantities are `[n, k]` matrices and
//! per-row scalars are `[n, 1]`. Reductions to a single number produce `[1]`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("non-finite leaf")]
    NonFiniteLeaf,
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("ln of nonpositive value {value}")]
    NonPositiveLog { value: f64 },
    #[error("non-finite output from {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("finite-difference probe is non-finite at coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`]. Ids increase with creation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Square(Var),
    Abs(Var),
    Recip(Var),
    Relu(Var),
    LogRamp(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    AddRow(Var, Var),
    RepeatRows(Var),
    SelectColumns(Var, Vec<usize>),
    ConcatColumns(Vec<Var>),
    CumsumRows(Var),
    MinReduce(Var, Vec<usize>),
    GatherColumns(Var, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | MatMul(a, b)
            | MatVec(a, b)
            | AddRow(a, b) => vec![*a, *b],
            Scale(a, _)
            | Shift(a)
            | Neg(a)
            | Exp(a)
            | Ln(a)
            | Tanh(a)
            | Square(a)
            | Abs(a)
            | Recip(a)
            | Relu(a)
            | LogRamp(a, _)
            | Sum(a)
            | Mean(a)
            | SumRows(a)
            | RepeatRows(a)
            | SelectColumns(a, _)
            | CumsumRows(a)
            | MinReduce(a, _)
            | GatherColumns(a, _) => vec![*a],
            ConcatColumns(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.by_leaf.get(&leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.by_leaf.iter()
    }

    pub fn into_map(self) -> BTreeMap<Var, Tensor> {
        self.by_leaf
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() == 2 {
        Ok((t.rows(), t.cols()))
    } else {
        Err(AutodiffError::InvalidArgument {
            op,
            reason: format!("expected a matrix, got shape {:?}", t.shape()),
        })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaves in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Records a leaf. Trainable leaves are registered for gradient collection.
    pub fn lift(&mut self, value: Tensor, trainable: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteLeaf);
        }
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: trainable,
        });
        if trainable {
            self.params.push(id);
        }
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.lift(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.lift(value, true)
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(op, value, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), value, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), value, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), value, "mul")
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), value, "div")
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = rank2("matmul", self.value(a))?;
        let (k2, m) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(
            Op::MatMul(a, b),
            Tensor::from_parts(vec![n, m], data),
            "matmul",
        )
    }

    /// `[n, k] x [k] -> [n]`.
    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (n, k) = rank2("matvec", self.value(a))?;
        let vt = self.value(v);
        if vt.shape() != [k] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matvec",
                lhs: self.value(a).shape().to_vec(),
                rhs: vt.shape().to_vec(),
            });
        }
        let data = matmul_raw(self.value(a).data(), vt.data(), n, k, 1);
        self.push(
            Op::MatVec(a, v),
            Tensor::from_parts(vec![n], data),
            "matvec",
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), "scale", |x| c * x)
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Shift(a), "shift", |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg(a), "neg", |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(AutodiffError::NonPositiveLog { value: bad });
        }
        self.unary(a, Op::Ln(a), "ln", f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), "square", |x| x * x)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), "abs", f64::abs)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Recip(a), "recip", |x| 1.0 / x)
    }

    /// `max(x, 0)`, with derivative 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    /// `ln v(x)` for the smooth ramp `v(x) = x` when `x >= delta`, `delta e^{x/delta - 1}` below.
    pub fn log_smooth_ramp(&mut self, a: Var, delta: f64) -> Result<Var> {
        if !(delta > 0.0) {
            return Err(AutodiffError::InvalidArgument {
                op: "log_smooth_ramp",
                reason: format!("delta must be positive, got {delta}"),
            });
        }
        self.unary(a, Op::LogRamp(a, delta), "log_smooth_ramp", |x| {
            if x >= delta {
                x.ln()
            } else {
                delta.ln() + x / delta - 1.0
            }
        })
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m), "mean")
    }

    /// `[n, k] -> [n, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, _) = rank2("sum_rows", self.value(a))?;
        let t = self.value(a);
        let data = (0..n).map(|i| t.row(i).iter().sum()).collect();
        self.push(
            Op::SumRows(a),
            Tensor::from_parts(vec![n, 1], data),
            "sum_rows",
        )
    }

    /// Adds the vector `row: [k]` to every row of `a: [n, k]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, k) = rank2("add_row", self.value(a))?;
        let r = self.value(row);
        if r.shape() != [k] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        let mut data = self.value(a).data().to_vec();
        for i in 0..n {
            for (d, &b) in data[i * k..(i + 1) * k].iter_mut().zip(r.data()) {
                *d += b;
            }
        }
        self.push(
            Op::AddRow(a, row),
            Tensor::from_parts(vec![n, k], data),
            "add_row",
        )
    }

    /// Repeats `row: [k]` to form `[n, k]`.
    pub fn repeat_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let r = self.value(row);
        if r.rank() != 1 {
            return Err(AutodiffError::InvalidArgument {
                op: "repeat_rows",
                reason: format!("expected a vector, got shape {:?}", r.shape()),
            });
        }
        let k = r.len();
        let mut data = Vec::with_capacity(n * k);
        for _ in 0..n {
            data.extend_from_slice(r.data());
        }
        self.push(
            Op::RepeatRows(row),
            Tensor::from_parts(vec![n, k], data),
            "repeat_rows",
        )
    }

    /// Picks the listed columns of `a: [n, k]` in the given order.
    pub fn select_columns(&mut self, a: Var, columns: &[usize]) -> Result<Var> {
        let (n, k) = rank2("select_columns", self.value(a))?;
        if let Some(&bad) = columns.iter().find(|&&c| c >= k) {
            return Err(AutodiffError::InvalidArgument {
                op: "select_columns",
                reason: format!("column {bad} out of range for {k} columns"),
            });
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(n * columns.len());
        for i in 0..n {
            let row = t.row(i);
            data.extend(columns.iter().map(|&c| row[c]));
        }
        let value = Tensor::from_parts(vec![n, columns.len()], data);
        self.push(
            Op::SelectColumns(a, columns.to_vec()),
            value,
            "select_columns",
        )
    }

    /// Contiguous column range `[start, end)`.
    pub fn column_range(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let columns: Vec<usize> = (start..end).collect();
        self.select_columns(a, &columns)
    }

    /// Joins `[n, k_i]` blocks side by side.
    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument {
                op: "concat_columns",
                reason: "no inputs".into(),
            })?;
        let (n, _) = rank2("concat_columns", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (rows, cols) = rank2("concat_columns", self.value(*p))?;
            if rows != n {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_columns",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(*p).shape().to_vec(),
                });
            }
            widths.push(cols);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor::from_parts(vec![n, total], data);
        self.push(Op::ConcatColumns(parts.to_vec()), value, "concat_columns")
    }

    /// Running sum along each row.
    pub fn cumsum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, k) = rank2("cumsum_rows", self.value(a))?;
        let mut data = self.value(a).data().to_vec();
        for i in 0..n {
            let row = &mut data[i * k..(i + 1) * k];
            for j in 1..k {
                row[j] += row[j - 1];
            }
        }
        self.push(
            Op::CumsumRows(a),
            Tensor::from_parts(vec![n, k], data),
            "cumsum_rows",
        )
    }

    /// Minimum of a vector (`[k] -> [1]`) or of each row of a matrix
    /// (`[n, k] -> [n, 1]`). Ties go to the lowest index.
    pub fn min_reduce(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, k) = match t.rank() {
            1 => (1, t.len()),
            2 => (t.rows(), t.cols()),
            _ => {
                return Err(AutodiffError::InvalidArgument {
                    op: "min_reduce",
                    reason: format!("expected rank 1 or 2, got shape {:?}", t.shape()),
                })
            }
        };
        if k == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "min_reduce",
                reason: "empty reduction".into(),
            });
        }
        let mut argmins = Vec::with_capacity(n);
        let mut mins = Vec::with_capacity(n);
        for i in 0..n {
            let row = &t.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v < row[best] {
                    best = j;
                }
            }
            argmins.push(best);
            mins.push(row[best]);
        }
        let shape = if t.rank() == 1 { vec![1] } else { vec![n, 1] };
        self.push(
            Op::MinReduce(a, argmins),
            Tensor::from_parts(shape, mins),
            "min_reduce",
        )
    }

    /// Position of each row's minimum as cached by a `min_reduce` node.
    pub fn argmins(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MinReduce(_, idx) => Some(idx),
            _ => None,
        }
    }

    /// Picks one column per row: `out[i] = a[i, columns[i]]`, shape `[n, 1]`.
    pub fn gather_columns(&mut self, a: Var, columns: &[usize]) -> Result<Var> {
        let (n, k) = rank2("gather_columns", self.value(a))?;
        if columns.len() != n {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_columns",
                reason: format!("{} indices for {n} rows", columns.len()),
            });
        }
        if let Some(&bad) = columns.iter().find(|&&c| c >= k) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_columns",
                reason: format!("column {bad} out of range for {k} columns"),
            });
        }
        let t = self.value(a);
        let data = columns
            .iter()
            .enumerate()
            .map(|(i, &c)| t.get(i, c))
            .collect();
        let value = Tensor::from_parts(vec![n, 1], data);
        self.push(
            Op::GatherColumns(a, columns.to_vec()),
            value,
            "gather_columns",
        )
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Nodes are visited in strictly decreasing id order. Contributions arriving
    /// at a node from several consumers are summed in ascending consumer id.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        // contributions are pushed in decreasing consumer id
        let mut pending: Vec<Vec<Tensor>> = vec![Vec::new(); root.0 + 1];
        pending[root.0].push(Tensor::filled(root_value.shape(), 1.0));
        let mut by_leaf = BTreeMap::new();

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut contributions = std::mem::take(&mut pending[id]);
            let Some(mut grad) = contributions.pop() else {
                continue;
            };
            while let Some(next) = contributions.pop() {
                for (g, c) in grad.data_mut().iter_mut().zip(next.data()) {
                    *g += c;
                }
            }
            if let Op::Leaf = node.op {
                by_leaf.insert(Var(id), grad);
                continue;
            }
            for (input, g) in self.local_gradients(node, &grad) {
                if self.nodes[input.0].requires_grad {
                    pending[input.0].push(g);
                }
            }
        }
        for &p in &self.params {
            if p.0 <= root.0 {
                by_leaf
                    .entry(p)
                    .or_insert_with(|| Tensor::zeros(self.value(p).shape()));
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn local_gradients(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        use Op::*;
        let y = &node.value;
        let val = |v: &Var| self.value(*v);
        match &node.op {
            Leaf => Vec::new(),
            Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Mul(a, b) => vec![
                (*a, zip_map(g, val(b), |gi, bi| gi * bi)),
                (*b, zip_map(g, val(a), |gi, ai| gi * ai)),
            ],
            Div(a, b) => {
                let ga = zip_map(g, val(b), |gi, bi| gi / bi);
                let gb = zip_map(&ga, y, |gai, yi| -gai * yi);
                vec![(*a, ga), (*b, gb)]
            }
            MatMul(a, b) => {
                let (n, k) = (val(a).rows(), val(a).cols());
                let m = val(b).cols();
                let ga = matmul_nt_raw(g.data(), val(b).data(), n, m, k);
                let gb = matmul_tn_raw(val(a).data(), g.data(), n, k, m);
                vec![
                    (*a, Tensor::from_parts(vec![n, k], ga)),
                    (*b, Tensor::from_parts(vec![k, m], gb)),
                ]
            }
            MatVec(a, v) => {
                let (n, k) = (val(a).rows(), val(a).cols());
                let ga = matmul_raw(g.data(), val(v).data(), n, 1, k);
                let gv = matmul_tn_raw(val(a).data(), g.data(), n, k, 1);
                vec![
                    (*a, Tensor::from_parts(vec![n, k], ga)),
                    (*v, Tensor::from_parts(vec![k], gv)),
                ]
            }
            Scale(a, c) => vec![(*a, g.map(|x| c * x))],
            Shift(a) => vec![(*a, g.clone())],
            Neg(a) => vec![(*a, g.map(|x| -x))],
            Exp(a) => vec![(*a, zip_map(g, y, |gi, yi| gi * yi))],
            Ln(a) => vec![(*a, zip_map(g, val(a), |gi, xi| gi / xi))],
            Tanh(a) => vec![(*a, zip_map(g, y, |gi, yi| gi * (1.0 - yi * yi)))],
            Square(a) => vec![(*a, zip_map(g, val(a), |gi, xi| 2.0 * xi * gi))],
            Abs(a) => vec![(
                *a,
                zip_map(g, val(a), |gi, xi| {
                    if xi > 0.0 {
                        gi
                    } else if xi < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                }),
            )],
            Recip(a) => vec![(*a, zip_map(g, y, |gi, yi| -gi * yi * yi))],
            Relu(a) => vec![(
                *a,
                zip_map(g, val(a), |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
            )],
            LogRamp(a, delta) => vec![(
                *a,
                zip_map(
                    g,
                    val(a),
                    |gi, xi| {
                        if xi >= *delta {
                            gi / xi
                        } else {
                            gi / delta
                        }
                    },
                ),
            )],
            Sum(a) => vec![(*a, Tensor::filled(val(a).shape(), g.data()[0]))],
            Mean(a) => {
                let t = val(a);
                vec![(*a, Tensor::filled(t.shape(), g.data()[0] / t.len() as f64))]
            }
            SumRows(a) => {
                let (n, k) = (val(a).rows(), val(a).cols());
                let mut data = Vec::with_capacity(n * k);
                for i in 0..n {
                    data.extend(std::iter::repeat_n(g.data()[i], k));
                }
                vec![(*a, Tensor::from_parts(vec![n, k], data))]
            }
            AddRow(a, row) => vec![(*a, g.clone()), (*row, column_sums(g))],
            RepeatRows(row) => vec![(*row, column_sums(g))],
            SelectColumns(a, columns) => {
                let (n, k) = (val(a).rows(), val(a).cols());
                let m = columns.len();
                let mut data = vec![0.0; n * k];
                for i in 0..n {
                    for (j, &c) in columns.iter().enumerate() {
                        data[i * k + c] += g.data()[i * m + j];
                    }
                }
                vec![(*a, Tensor::from_parts(vec![n, k], data))]
            }
            ConcatColumns(parts) => {
                let n = g.rows();
                let total = g.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = val(p).cols();
                    let mut data = Vec::with_capacity(n * w);
                    for i in 0..n {
                        data.extend_from_slice(
                            &g.data()[i * total + offset..i * total + offset + w],
                        );
                    }
                    out.push((*p, Tensor::from_parts(vec![n, w], data)));
                    offset += w;
                }
                out
            }
            CumsumRows(a) => {
                let (n, k) = (g.rows(), g.cols());
                let mut data = g.data().to_vec();
                for i in 0..n {
                    let row = &mut data[i * k..(i + 1) * k];
                    for j in (0..k.saturating_sub(1)).rev() {
                        row[j] += row[j + 1];
                    }
                }
                vec![(*a, Tensor::from_parts(vec![n, k], data))]
            }
            MinReduce(a, argmins) => {
                let t = val(a);
                let k = if t.rank() == 1 { t.len() } else { t.cols() };
                let mut data = vec![0.0; t.len()];
                for (i, &j) in argmins.iter().enumerate() {
                    data[i * k + j] = g.data()[i];
                }
                vec![(*a, Tensor::from_parts(t.shape().to_vec(), data))]
            }
            GatherColumns(a, columns) => {
                let (n, k) = (val(a).rows(), val(a).cols());
                let mut data = vec![0.0; n * k];
                for (i, &c) in columns.iter().enumerate() {
                    data[i * k + c] = g.data()[i];
                }
                vec![(*a, Tensor::from_parts(vec![n, k], data))]
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let (n, k) = (g.rows(), g.cols());
    let mut sums = vec![0.0; k];
    for i in 0..n {
        for (s, &v) in sums.iter_mut().zip(g.row(i)) {
            *s += v;
        }
    }
    Tensor::vector(sums)
}

/// Compares reverse-mode gradients of `f` at `x0` with central differences.
///
/// Returns the largest relative error `|a - b| / max(1e-8, |a|, |b|)` over all
/// coordinates.
pub fn grad_check<F>(f: F, x0: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            reason: format!("eps must lie in (0, 1e-3], got {eps}"),
        });
    }
    let mut tape = Tape::new();
    let x = tape.param(x0.clone())?;
    let root = f(&mut tape, x)?;
    let grads = tape.backward(root)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x0.shape()));

    let eval = |point: Tensor, coordinate: usize| -> Result<f64> {
        let mut t = Tape::new();
        let v = t
            .constant(point)
            .map_err(|_| AutodiffError::NonFiniteProbe { coordinate })?;
        let out = f(&mut t, v).map_err(|_| AutodiffError::NonFiniteProbe { coordinate })?;
        let value = t.value(out).data()[0];
        if value.is_finite() {
            Ok(value)
        } else {
            Err(AutodiffError::NonFiniteProbe { coordinate })
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus, i)? - eval(minus, i)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1e-8_f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
