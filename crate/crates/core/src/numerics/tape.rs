//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value. Inputs always precede the node that consumes them, so a single
//! reverse sweep over the node list applies each backward rule exactly once.
//! Parameters enter the tape by reference to a [`ParamStore`]; frozen
//! parameters and constants are leaves without gradient.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-wise neighbour lists for [`Tape::sparse_mean`].
pub type Adjacency = Arc<Vec<Vec<usize>>>;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    MulScalar {
        x: Var,
        s: Var,
    },
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    SparseMean {
        x: Var,
        adj: Adjacency,
    },
    Reshape(Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder for one forward/backward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    (numel.checked_div(cols).unwrap_or(0), cols)
}

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// A transposed operand is stored in the opposite orientation.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices above have exactly the extents described by the
    // dimensions and strides passed to the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        rows_cols(self.shape(v)).0
    }

    pub fn cols(&self, v: Var) -> usize {
        rows_cols(self.shape(v)).1
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    /// Registers a parameter leaf. Repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = self.params.get(id);
        let needs = t.requires_grad();
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), needs);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: false }, ng))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, 0.0);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: true }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![n, m], out, Op::Transpose(x), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(a));
        if self.value(bias).len() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self.value(a).iter().enumerate().map(|(i, v)| v + b[i % n]).collect();
        let ng = self.ng(&[a, bias]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, bias), ng))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::AddConst(x), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape {
                op: "mul_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * sv).collect();
        let ng = self.ng(&[x, s]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulScalar { x, s }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln σ(x)`, stable for large negative `x`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.min(0.0) - (-v.abs()).exp().ln_1p(), Op::LogSigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log. Inputs must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|v| **v <= 0.0) {
            return Err(Error::contract(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_masked(x, None)
            .expect("unmasked softmax has no shape preconditions")
    }

    /// Softmax along the last axis; entries whose mask is `false` get exactly
    /// zero probability. A fully masked row yields all zeros.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::Shape {
                    op: "softmax_masked",
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let src = self.value(x);
        let mut out = vec![0.0; rows * cols];
        let mut buf = Vec::with_capacity(cols);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let dst = &mut out[r * cols..(r + 1) * cols];
            match mask {
                None => softmax_row(row, dst),
                Some(m) => {
                    let m = &m[r * cols..(r + 1) * cols];
                    buf.clear();
                    buf.extend(row.iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| *v));
                    if buf.is_empty() {
                        continue;
                    }
                    let mut tmp = vec![0.0; buf.len()];
                    softmax_row(&buf, &mut tmp);
                    let mut it = tmp.into_iter();
                    for (d, &k) in dst.iter_mut().zip(m) {
                        if k {
                            *d = it.next().unwrap_or(0.0);
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        let src = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for (d, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmax(x), ng)
    }

    /// Normalizes each row to zero mean and unit (biased) variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if cols == 0 || self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over rows whose `mask` entry is true. With every row masked
    /// the loss is zero and carries zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(logits));
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t >= cols {
                return Err(Error::Index {
                    context: "cross_entropy target",
                    index: t,
                    len: cols,
                });
            }
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &src[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            total += lse - row[targets[r]];
            count += 1;
            for (p, v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(&[logits]) && count > 0;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Selects rows of a `V×d` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = rows_cols(self.shape(table));
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    context: "gather",
                    index: id,
                    len: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of zero tensors"));
        };
        let cols = self.cols(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.cols(p) != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += self.rows(p);
            out.extend_from_slice(self.value(p));
        }
        let ng = self.ng(parts);
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_cols of zero tensors"));
        };
        let rows = self.rows(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.rows(p) != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(self.cols(p));
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let ng = self.ng(parts);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if start + len > rows {
            return Err(Error::Index {
                context: "slice_rows",
                index: start + len,
                len: rows,
            });
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(vec![len, cols], out, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if start + len > cols {
            return Err(Error::Index {
                context: "slice_cols",
                index: start + len,
                len: cols,
            });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        };
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), ng)
    }

    /// Picks elements by flat row-major index into a 1-D result.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            let v = *src.get(i).ok_or(Error::Index {
                context: "pick",
                index: i,
                len: src.len(),
            })?;
            out.push(v);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![idx.len()], out, Op::Pick { x, idx: idx.to_vec() }, ng))
    }

    /// Row `i` of the result is the mean of the rows of `x` listed in
    /// `adj[i]`; an empty list yields a zero row.
    pub fn sparse_mean(&mut self, x: Var, adj: &Adjacency) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let src = self.value(x);
        let mut out = vec![0.0; adj.len() * cols];
        for (i, nbrs) in adj.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let w = 1.0 / nbrs.len() as f64;
            let dst = &mut out[i * cols..(i + 1) * cols];
            for &j in nbrs {
                if j >= rows {
                    return Err(Error::Index {
                        context: "sparse_mean",
                        index: j,
                        len: rows,
                    });
                }
                for (d, s) in dst.iter_mut().zip(&src[j * cols..(j + 1) * cols]) {
                    *d += w * s;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            vec![adj.len(), cols],
            out,
            Op::SparseMean {
                x,
                adj: Arc::clone(adj),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), ng))
    }

    /// Propagates gradients from the scalar `loss` to every trainable
    /// parameter registered on this tape. Trainable parameters that the loss
    /// does not reach receive a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut by_param: Vec<Option<Vec<f64>>> = self
            .params
            .ids()
            .map(|id| {
                let t = self.params.get(id);
                t.requires_grad().then(|| vec![0.0; t.numel()])
            })
            .collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.apply_backward(node, &g, &mut grads, &mut by_param);
        }
        Ok(Gradients { by_param })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let n = &self.nodes[v.0];
        if !n.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(dst) = self.slot(grads, v) {
            for (i, d) in dst.iter_mut().enumerate() {
                *d += f(i);
            }
        }
    }

    fn apply_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        by_param: &mut [Option<Vec<f64>>],
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                if let Some(dst) = by_param[id.0].as_mut() {
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            &Op::MatMul { a, b, trans_b } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = self.shape(a)[1];
                if let Some(ga) = self.slot(grads, a) {
                    // ga (m×k) += g (m×n) · op(b)ᵀ
                    gemm(m, n, k, g, false, self.value(b), !trans_b, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, b) {
                    if trans_b {
                        // gb (n×k) += gᵀ (n×m) · a (m×k)
                        gemm(n, m, k, g, true, self.value(a), false, gb, 1.0);
                    } else {
                        // gb (k×n) += aᵀ (k×m) · g (m×n)
                        gemm(k, m, n, self.value(a), true, g, false, gb, 1.0);
                    }
                }
            }
            &Op::Transpose(x) => {
                let (n, m) = (node.shape[0], node.shape[1]);
                // output is n×m, input m×n
                self.acc(grads, x, |idx| {
                    let (i, j) = (idx / n, idx % n);
                    g[j * m + i]
                });
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |i| g[i]);
                self.acc(grads, b, |i| g[i]);
            }
            &Op::AddRow(a, bias) => {
                self.acc(grads, a, |i| g[i]);
                if let Some(gb) = self.slot(grads, bias) {
                    let n = gb.len();
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                }
            }
            &Op::AddConst(x) => self.acc(grads, x, |i| g[i]),
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                self.acc(grads, a, |i| g[i] * vb[i]);
                self.acc(grads, b, |i| g[i] * va[i]);
            }
            &Op::MulScalar { x, s } => {
                let sv = self.value(s)[0];
                let vx = self.value(x);
                self.acc(grads, x, |i| g[i] * sv);
                let gs: f64 = g.iter().zip(vx).map(|(a, b)| a * b).sum();
                self.acc(grads, s, |_| gs);
            }
            &Op::Scale(x, c) => self.acc(grads, x, |i| g[i] * c),
            &Op::Relu(x) => {
                let vx = self.value(x);
                self.acc(grads, x, |i| if vx[i] > 0.0 { g[i] } else { 0.0 });
            }
            &Op::Tanh(x) => {
                let y = &node.value;
                self.acc(grads, x, |i| g[i] * (1.0 - y[i] * y[i]));
            }
            &Op::Sigmoid(x) => {
                let y = &node.value;
                self.acc(grads, x, |i| g[i] * y[i] * (1.0 - y[i]));
            }
            &Op::LogSigmoid(x) => {
                let vx = self.value(x);
                self.acc(grads, x, |i| g[i] * sigmoid(-vx[i]));
            }
            &Op::Exp(x) => {
                let y = &node.value;
                self.acc(grads, x, |i| g[i] * y[i]);
            }
            &Op::Log(x) => {
                let vx = self.value(x);
                self.acc(grads, x, |i| g[i] / vx[i]);
            }
            &Op::Softmax(x) => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                let dots: Vec<f64> = (0..rows)
                    .map(|r| (0..cols).map(|c| g[r * cols + c] * y[r * cols + c]).sum())
                    .collect();
                self.acc(grads, x, |i| y[i] * (g[i] - dots[i / cols]));
            }
            &Op::LogSoftmax(x) => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                let sums: Vec<f64> = (0..rows).map(|r| g[r * cols..(r + 1) * cols].iter().sum()).collect();
                self.acc(grads, x, |i| g[i] - y[i].exp() * sums[i / cols]);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = rows_cols(&node.shape);
                let gv = self.value(*gain);
                if let Some(gg) = self.slot(grads, *gain) {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % cols] += v * xhat[i];
                    }
                }
                if let Some(gbias) = self.slot(grads, *bias) {
                    for (i, v) in g.iter().enumerate() {
                        gbias[i % cols] += v;
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = cols as f64;
                    #[allow(clippy::needless_range_loop)]
                    for r in 0..rows {
                        let base = r * cols;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            let d = g[base + j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat[base + j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for j in 0..cols {
                            let d = g[base + j] * gv[j];
                            gx[base + j] += rstd[r] * (d - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let (_, cols) = rows_cols(self.shape(*logits));
                let scale = g[0] / *count as f64;
                self.acc(grads, *logits, |i| {
                    let r = i / cols;
                    if !mask[r] {
                        return 0.0;
                    }
                    let onehot = if targets[r] == i % cols { 1.0 } else { 0.0 };
                    scale * (probs[i] - onehot)
                });
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let d = node.shape[1];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |i| g[offset + i]);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.cols(p);
                    self.acc(grads, p, |i| g[(i / w) * total + offset + i % w]);
                    offset += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let cols = node.shape[1];
                let lo = start * cols;
                let hi = lo + g.len();
                self.acc(grads, x, |i| if i >= lo && i < hi { g[i - lo] } else { 0.0 });
            }
            &Op::SliceCols { x, start } => {
                let len = node.shape[1];
                let cols = self.cols(x);
                self.acc(grads, x, |i| {
                    let (r, c) = (i / cols, i % cols);
                    if c >= start && c < start + len {
                        g[r * len + c - start]
                    } else {
                        0.0
                    }
                });
            }
            &Op::Sum(x) => self.acc(grads, x, |_| g[0]),
            &Op::Mean(x) => {
                let n = self.value(x).len().max(1) as f64;
                self.acc(grads, x, |_| g[0] / n);
            }
            Op::Pick { x, idx } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
            }
            Op::SparseMean { x, adj } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let cols = node.shape[1];
                    for (i, nbrs) in adj.iter().enumerate() {
                        if nbrs.is_empty() {
                            continue;
                        }
                        let w = 1.0 / nbrs.len() as f64;
                        for &j in nbrs {
                            for c in 0..cols {
                                gx[j * cols + c] += w * g[i * cols + c];
                            }
                        }
                    }
                }
            }
            &Op::Reshape(x) => self.acc(grads, x, |i| g[i]),
        }
    }
}

/// Logistic function, evaluated without overflow.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
