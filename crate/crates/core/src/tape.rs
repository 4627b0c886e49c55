//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its value and the handles of its
//! inputs. `backward` walks the nodes in reverse recording order, so each node
//! is visited once and its gradient is complete before it is propagated.


use crate::attention::AttentionMask;
use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_kernel, matmul_tn_kernel, transpose_kernel, Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    AddConst,
    ScaleBy,
    Exp,
    Dot,
    Sum,
    Softmax,
    RmsNorm,
    Swish,
    Gelu,
    SliceCols,
    ConcatCols,
    ConcatRows,
    GatherRows,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::AddConst,
        OpKind::ScaleBy,
        OpKind::Exp,
        OpKind::Dot,
        OpKind::Sum,
        OpKind::Softmax,
        OpKind::RmsNorm,
        OpKind::Swish,
        OpKind::Gelu,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::GatherRows,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::AddConst => "add_const",
            OpKind::ScaleBy => "scale_by",
            OpKind::Exp => "exp",
            OpKind::Dot => "dot",
            OpKind::Sum => "sum",
            OpKind::Softmax => "softmax",
            OpKind::RmsNorm => "rms_norm",
            OpKind::Swish => "swish",
            OpKind::Gelu => "gelu",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::config(format!("unknown op `{s}`")))
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    ScaleBy(Var, Var),
    Exp(Var),
    Dot(Var, Var),
    Sum(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Swish(Var),
    Gelu(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::AddConst(..) => OpKind::AddConst,
            Op::ScaleBy(..) => OpKind::ScaleBy,
            Op::Exp(..) => OpKind::Exp,
            Op::Dot(..) => OpKind::Dot,
            Op::Sum(..) => OpKind::Sum,
            Op::Softmax(..) => OpKind::Softmax,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::Swish(..) => OpKind::Swish,
            Op::Gelu(..) => OpKind::Gelu,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes whose backward rule ran.
    pub visited: usize,
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<OpKind>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044_715;

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test fixture: scales the backward output of every `kind` node by 1.5.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut value = value;
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it receives a gradient when `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let shape = self.nodes[v.0].value.shape();
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(shape, g.clone()).expect("grad matches value shape"))
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).matrix_dims(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip("mul", self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(a, "add_row")?;
        if self.value(bias).numel() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % n])
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a), rg)
    }

    /// `a * s` where `s` holds a single element.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let c = self.scalar(s);
        let out = self.value(a).scale(c);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// Inner product of two equal-length tensors, as a one-element tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Row-wise softmax with per-row max subtraction. Disallowed mask
    /// positions get exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let (m, n) = self.dims(x, "softmax_rows")?;
        if let Some(mask) = mask {
            if mask.rows() != m || mask.cols() != n {
                return Err(Error::contract(format!(
                    "mask is {}x{} but scores are {m}x{n}",
                    mask.rows(),
                    mask.cols()
                )));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let allowed = |j: usize| mask.is_none_or(|mk| mk.allowed(i, j));
            let row = &xv[i * n..(i + 1) * n];
            let mx = (0..n)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            if mx == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for j in (0..n).filter(|&j| allowed(j)) {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                total = total + e;
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v = *v / total;
            }
        }
        let out = Tensor::new(self.value(x).shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Per-row `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x, "rms_norm")?;
        if self.value(gain).numel() != n {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let eps = T::lit(eps);
        let nt = T::lit(n as f64);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let mut inv_rms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xv.chunks(n) {
            let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / nt;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(&v, &gv)| v * r * gv));
        }
        let out = Tensor::new(self.value(x).shape(), out)?;
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Elementwise `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Swish(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let c = T::lit(GELU_C);
        let half = T::lit(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::contract(format!(
                "column slice {start}..{} out of range for width {n}",
                start + len
            )));
        }
        let xv = self.value(x).data();
        let data = (0..m)
            .flat_map(|i| xv[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let out = Tensor::new(&[m, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Concatenation along the channel (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (m, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p, "concat_cols")?;
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(&[m, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (_, n) = self.dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims(p, "concat_rows")?;
            if pn != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, n], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::contract("gather of zero rows"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::contract(format!("row index {bad} out of range for {m} rows")));
        }
        let tv = self.value(table).data();
        let data = ids
            .iter()
            .flat_map(|&i| tv[i * n..(i + 1) * n].iter().copied())
            .collect();
        let out = Tensor::new(&[ids.len(), n], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.dims(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.value(logits).shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::contract("cross-entropy needs at least one target"));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= n) {
            return Err(Error::contract(format!("target {bad} out of range for {n} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); m * n];
        let mut loss = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &lv[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total = row.iter().fold(T::zero(), |s, &v| s + (v - mx).exp());
            for j in 0..n {
                probs[i * n + j] = (row[j] - mx).exp() / total;
            }
            loss = loss - (row[t] - mx - total.ln());
        }
        let loss = loss / T::lit(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStats> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.rg(loss) {
            return Ok(BackwardStats { visited: 0 });
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].clone() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            visited += 1;
            let kind = self.nodes[idx].op.kind();
            let mut pending = self.backward_rule(idx, &g);
            if self.fault == Some(kind) {
                for (_, pg) in &mut pending {
                    for v in pg.iter_mut() {
                        *v = *v * T::lit(1.5);
                    }
                }
            }
            for (v, pg) in pending {
                self.accumulate(v, pg);
            }
        }
        Ok(BackwardStats { visited })
    }

    /// Gradient contributions from node `idx` to its inputs.
    fn backward_rule(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).matrix_dims("matmul").expect("recorded");
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    out.push((*a, matmul_nt_kernel(g, self.value(*b).data(), m, n, k)));
                }
                if self.rg(*b) {
                    out.push((*b, matmul_tn_kernel(self.value(*a).data(), g, m, k, n)));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).matrix_dims("transpose").expect("recorded");
                out.push((*a, transpose_kernel(g, n, m)));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect()));
                out.push((*b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect()));
            }
            Op::AddRow(a, bias) => {
                out.push((*a, g.to_vec()));
                if self.rg(*bias) {
                    let n = self.value(*bias).numel();
                    let mut gb = vec![T::zero(); n];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + gi;
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|&v| v * *c).collect())),
            Op::AddConst(a) => out.push((*a, g.to_vec())),
            Op::ScaleBy(a, s) => {
                let c = self.scalar(*s);
                out.push((*a, g.iter().map(|&v| v * c).collect()));
                if self.rg(*s) {
                    let ds = g
                        .iter()
                        .zip(self.value(*a).data())
                        .fold(T::zero(), |acc, (&gi, &ai)| acc + gi * ai);
                    out.push((*s, vec![ds]));
                }
            }
            Op::Exp(a) => out.push((*a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect())),
            Op::Dot(a, b) => {
                let g0 = g[0];
                out.push((*a, self.value(*b).data().iter().map(|&v| v * g0).collect()));
                out.push((*b, self.value(*a).data().iter().map(|&v| v * g0).collect()));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::Softmax(x) => {
                let n = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let inner = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - inner);
                    }
                }
                out.push((*x, dx));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let n = gv.len();
                let nt = T::lit(n as f64);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); n];
                for (i, (&r, (xr, gr))) in inv_rms.iter().zip(xv.chunks(n).zip(g.chunks(n))).enumerate() {
                    let proj = (0..n).fold(T::zero(), |s, j| s + gr[j] * gv[j] * xr[j]);
                    let coef = r * r * r * proj / nt;
                    for j in 0..n {
                        dx[i * n + j] = r * gv[j] * gr[j] - xr[j] * coef;
                        dg[j] = dg[j] + gr[j] * xr[j] * r;
                    }
                }
                out.push((*x, dx));
                if self.rg(*gain) {
                    out.push((*gain, dg));
                }
            }
            Op::Swish(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let s = sigmoid(v);
                        gi * (s + v * s * (T::one() - s))
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::Gelu(x) => {
                let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
                let c = T::lit(GELU_C);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let t = (k * (v + c * v * v * v)).tanh();
                        let du = k * (T::one() + three * c * v * v);
                        gi * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).matrix_dims("slice_cols").expect("recorded");
                let len = node.value.cols();
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                out.push((*x, dx));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let dp = (0..m)
                            .flat_map(|i| g[i * total + offset..i * total + offset + w].iter().copied())
                            .collect();
                        out.push((p, dp));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.rg(p) {
                        out.push((p, g[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let n = tv.cols();
                let mut dt = vec![T::zero(); tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..n {
                        dt[id * n + j] = dt[id * n + j] + g[r * n + j];
                    }
                }
                out.push((*table, dt));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let n = self.value(*logits).cols();
                let scale = g[0] / T::lit(*count as f64);
                let mut dl = vec![T::zero(); probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..n {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dl[i * n + j] = (probs[i * n + j] - onehot) * scale;
                    }
                }
                out.push((*logits, dl));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[vec![0.0, 0.0], vec![0.0, 3f64.ln()]]));
        let y = tape.softmax_rows(x, None).unwrap();
        let v = tape.value(y).data().to_vec();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 0.25).abs() < 1e-12 && (v[3] - 0.75).abs() < 1e-12);

        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1000.0f32, 1000.0, 1000.0]]).unwrap());
        let y = tape.softmax_rows(x, None).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_softmax_gives_exact_zeros() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]).unwrap());
        let mask = AttentionMask::causal(2);
        let y = tape.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).data()[0], 1.0);
        assert_eq!(tape.value(y).data()[1], 0.0);
    }

    #[test]
    fn rms_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[vec![1.0, 1.0, 1.0], vec![3.0, -3.0, 3.0]]));
        let g = tape.constant(Tensor::ones(&[3]));
        let y = tape.rms_norm(x, g, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn swish_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[3], vec![0.0, 1.0, 20.0]).unwrap());
        let y = tape.swish(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
        assert!((v[2] - 20.0).abs() < 1e-4);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]).with_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_visits_each_op_once() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let stats = tape.backward(s).unwrap();
        assert_eq!(stats.visited, 2);
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        // a second backward starts from scratch
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad(true));
        let c = tape.constant(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let d = tape.dot(x, c).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }
}
