use std::str::FromStr;

use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};
use crate::objective;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Gelu,
    Relu,
}

impl FromStr for Unary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Unary::Tanh),
            "gelu" => Ok(Unary::Gelu),
            "relu" => Ok(Unary::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Unary {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Gelu => 0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2)),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
                cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
            }
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SplitHeads {
        qkv: Var,
        part: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Sum(Var),
    Mean(Var),
    PearsonLoss { pred: Var, target: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations for one forward pass.
///
/// Nodes are appended in execution order, so the tape is always in
/// topological order and `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(
            value.values().iter().all(|v| v.is_finite()) || !self.inputs_finite(&op),
            "non-finite output from finite inputs in {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &Op<T>) -> bool {
        op_inputs(op)
            .iter()
            .all(|v| self.nodes[v.0].value.is_finite())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad())
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.grad.take()
    }

    fn vals(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.values()
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.vals(a), false, self.vals(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched matmul over the leading axis: `[n×m×k] · [n×k×p]`, or
    /// `[n×m×k] · [n×p×k]ᵀ` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.vals(a), self.vals(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([batch, m, n], out)?, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds `row` (length = last dim of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.value(row).numel() != w {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.vals(row).to_vec();
        let out: Vec<T> = self
            .vals(x)
            .chunks(w)
            .flat_map(|c| c.iter().zip(&r).map(|(&a, &b)| a + b))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.vals(x).iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Scale(x, c), rg))
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let out: Vec<T> = self
            .vals(x)
            .iter()
            .map(|&v| T::of(kind.eval(v.to64())))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Unary(x, kind), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    /// Softmax over the last dimension, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let w = self.value(x).last_dim();
        let mut out = self.vals(x).to_vec();
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Normalises every last-dim slice to zero mean and unit variance, then
    /// applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.value(gamma).numel() != w || self.value(beta).numel() != w {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (g, b) = (self.vals(gamma), self.vals(beta));
        let rows = self.value(x).rows();
        let mut normalized = Vec::with_capacity(rows * w);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * w);
        for row in self.vals(x).chunks(w) {
            let mean = row.iter().map(|v| v.to64()).sum::<f64>() / w as f64;
            let var = row
                .iter()
                .map(|v| (v.to64() - mean).powi(2))
                .sum::<f64>()
                / w as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let xh = (v.to64() - mean) * r;
                normalized.push(T::of(xh));
                out.push(T::of(xh * g[j].to64() + b[j].to64()));
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            },
            rg,
        ))
    }

    /// Valid (unpadded) 1-D cross-correlation.
    ///
    /// `x` is `[channels × length]` or `[batch × channels × length]`,
    /// `w` is `[out_channels × channels × kernel]` (a rank-1 `w` is treated as
    /// a single-channel kernel). Output length is `(length − kernel)/stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batch, ch, len) = match sx.as_slice() {
            [c, l] => (1, *c, *l),
            [b, c, l] => (*b, *c, *l),
            _ => return Err(Error::shape("conv1d", sx, sw)),
        };
        let (oc, wc, k) = match sw.as_slice() {
            [k] => (1, 1, *k),
            [o, c, k] => (*o, *c, *k),
            _ => return Err(Error::shape("conv1d", sx, sw)),
        };
        if wc != ch {
            return Err(Error::shape("conv1d", sx, sw));
        }
        if k > len {
            return Err(Error::Shape(format!(
                "conv1d kernel length {k} exceeds input length {len}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != oc {
                return Err(Error::shape("conv1d bias", [oc], self.shape(b)));
            }
        }
        let lo = (len - k) / stride + 1;
        let (xv, wv) = (self.vals(x), self.vals(w));
        let mut out = vec![T::zero(); batch * oc * lo];
        for bi in 0..batch {
            let xb = &xv[bi * ch * len..(bi + 1) * ch * len];
            for o in 0..oc {
                let dst = &mut out[(bi * oc + o) * lo..(bi * oc + o + 1) * lo];
                for c in 0..ch {
                    let xr = &xb[c * len..(c + 1) * len];
                    let wr = &wv[(o * ch + c) * k..(o * ch + c + 1) * k];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let s = t * stride;
                        let mut acc = T::zero();
                        for j in 0..k {
                            acc += wr[j] * xr[s + j];
                        }
                        *d += acc;
                    }
                }
                if let Some(b) = bias {
                    let bv = self.vals(b)[o];
                    dst.iter_mut().for_each(|d| *d += bv);
                }
            }
        }
        let shape = if sx.len() == 2 {
            vec![oc, lo]
        } else {
            vec![batch, oc, lo]
        };
        let rg = self.rg(x) || self.rg(w) || bias.map_or(false, |b| self.rg(b));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv1d { x, w, bias, stride },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("transpose needs rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_blocks(self.vals(x), r, c);
        let mut ns = s.clone();
        let n = ns.len();
        ns.swap(n - 2, n - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(ns, out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Stacks rank-2 tensors of equal width along the row axis. A rank-1
    /// input counts as a single row. Inputs may repeat.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let w = self.value(first).last_dim();
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() > 2 || self.value(p).last_dim() != w {
                return Err(Error::shape("concat_rows", self.shape(first), s));
            }
            out.extend_from_slice(self.vals(p));
        }
        let rows = out.len() / w;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new([rows, w], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Selects rows of a rank-2 tensor (embedding lookup, slicing).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if s.len() != 2 || idx.is_empty() {
            return Err(Error::Shape(format!(
                "gather_rows needs a matrix and at least one index, got {s:?}"
            )));
        }
        let (n, w) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Data(format!("row index {bad} out of range for {n} rows")));
        }
        let v = self.vals(src);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&v[i * w..(i + 1) * w]);
        }
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::new([idx.len(), w], out)?,
            Op::GatherRows(src, idx.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(src, &idx)
    }

    /// Extracts query (`part = 0`), key (1) or value (2) heads from a packed
    /// `[batch·seq × 3·hidden]` projection, giving `[batch·heads × seq × head_dim]`.
    pub fn split_heads(
        &mut self,
        qkv: Var,
        part: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if part > 2 || s.len() != 2 || s[0] != batch * seq || s[1] % (3 * heads) != 0 {
            return Err(Error::Shape(format!(
                "split_heads: {s:?} is not [{}×3·heads·d] with heads={heads}",
                batch * seq
            )));
        }
        let hidden = s[1] / 3;
        let hd = hidden / heads;
        let v = self.vals(qkv);
        let mut out = vec![T::zero(); batch * seq * hidden];
        for b in 0..batch {
            for t in 0..seq {
                let src = &v[(b * seq + t) * 3 * hidden + part * hidden..][..hidden];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * hd;
                    out[dst..dst + hd].copy_from_slice(&src[h * hd..(h + 1) * hd]);
                }
            }
        }
        let rg = self.rg(qkv);
        Ok(self.push(
            Tensor::new([batch * heads, seq, hd], out)?,
            Op::SplitHeads {
                qkv,
                part,
                batch,
                seq,
                heads,
            },
            rg,
        ))
    }

    /// Inverse of [`split_heads`](Self::split_heads) for a single part.
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(Error::Shape(format!(
                "merge_heads: {s:?} is not [{}×{seq}×d]",
                batch * heads
            )));
        }
        let hd = s[2];
        let hidden = hd * heads;
        let v = self.vals(x);
        let mut out = vec![T::zero(); batch * seq * hidden];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let src = ((b * heads + h) * seq + t) * hd;
                    let dst = (b * seq + t) * hidden + h * hd;
                    out[dst..dst + hd].copy_from_slice(&v[src..src + hd]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([batch * seq, hidden], out)?,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.vals(x).iter().map(|v| v.to64()).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(T::of(s)), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.vals(x).iter().map(|v| v.to64()).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(T::of(s / n)), Op::Mean(x), rg))
    }

    /// `1 − mean_v R_v` where `R_v` is the Pearson correlation of column `v`
    /// of `pred` with the same column of `target`, taken over rows.
    pub fn pearson_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if s.len() != 2 || s != target.shape() {
            return Err(Error::shape("pearson_loss", s, target.shape()));
        }
        let r = objective::pearson_columns(target.values(), self.vals(pred), s[0], s[1])?;
        let loss = 1.0 - r.iter().sum::<f64>() / r.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            Op::PearsonLoss {
                pred,
                target: target.values().to_vec(),
            },
            rg,
        ))
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`; fills the gradient of every node
    /// that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &|da| gemm(m, n, k, g, false, self.vals(*b), true, da, true));
                acc(*b, &|db| gemm(k, m, n, self.vals(*a), true, g, false, db, true));
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (av, bv) = (self.vals(*a), self.vals(*b));
                acc(*a, &|da| {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bv[t * k * n..(t + 1) * k * n];
                        let dt = &mut da[t * m * k..(t + 1) * m * k];
                        // da = g · bᵀ (b is k×n) or g · b (b is n×k)
                        gemm(m, n, k, gt, false, bt, !*trans_b, dt, true);
                    }
                });
                acc(*b, &|db| {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &av[t * m * k..(t + 1) * m * k];
                        let dt = &mut db[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gt, true, at, false, dt, true);
                        } else {
                            gemm(k, m, n, at, true, gt, false, dt, true);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &|d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                acc(*a, &|d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &|d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &|d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                let w = self.value(*x).last_dim();
                acc(*row, &|d| {
                    for chunk in g.chunks(w) {
                        d.iter_mut().zip(chunk).for_each(|(d, &g)| *d += g);
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &|d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c));
            }
            Op::Unary(x, kind) => {
                let (xv, yv) = (self.vals(*x), node.value.values());
                acc(*x, &|d| {
                    for ((d, &g), (&xi, &yi)) in d.iter_mut().zip(g).zip(xv.iter().zip(yv)) {
                        *d += g * T::of(kind.derivative(xi.to64(), yi.to64()));
                    }
                });
            }
            Op::Softmax(x) => {
                let w = node.value.last_dim();
                let y = node.value.values();
                acc(*x, &|d| {
                    for ((dr, gr), yr) in d.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.to64() * b.to64()).sum();
                        for j in 0..w {
                            dr[j] += T::of(yr[j].to64() * (gr[j].to64() - dot));
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let w = node.value.last_dim();
                let gam = self.vals(*gamma);
                acc(*beta, &|d| {
                    for gr in g.chunks(w) {
                        d.iter_mut().zip(gr).for_each(|(d, &g)| *d += g);
                    }
                });
                acc(*gamma, &|d| {
                    for (gr, xr) in g.chunks(w).zip(normalized.chunks(w)) {
                        for j in 0..w {
                            d[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(*x, &|d| {
                    for (r, ((dr, gr), xr)) in d
                        .chunks_mut(w)
                        .zip(g.chunks(w))
                        .zip(normalized.chunks(w))
                        .enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..w {
                            let dxh = gr[j].to64() * gam[j].to64();
                            m1 += dxh;
                            m2 += dxh * xr[j].to64();
                        }
                        m1 /= w as f64;
                        m2 /= w as f64;
                        for j in 0..w {
                            let dxh = gr[j].to64() * gam[j].to64();
                            dr[j] += T::of(rstd[r] * (dxh - m1 - xr[j].to64() * m2));
                        }
                    }
                });
            }
            Op::Conv1d { x, w, bias, stride } => {
                let sx = self.shape(*x);
                let (batch, ch, len) = if sx.len() == 2 {
                    (1, sx[0], sx[1])
                } else {
                    (sx[0], sx[1], sx[2])
                };
                let k = *self.shape(*w).last().unwrap();
                let oc = self.value(*w).numel() / (ch * k);
                let lo = (len - k) / stride + 1;
                let (xv, wv) = (self.vals(*x), self.vals(*w));
                if let Some(b) = bias {
                    acc(*b, &|d| {
                        for bi in 0..batch {
                            for o in 0..oc {
                                let gr = &g[(bi * oc + o) * lo..(bi * oc + o + 1) * lo];
                                d[o] += gr.iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                acc(*w, &|d| {
                    for bi in 0..batch {
                        for o in 0..oc {
                            let gr = &g[(bi * oc + o) * lo..(bi * oc + o + 1) * lo];
                            for c in 0..ch {
                                let xr = &xv[(bi * ch + c) * len..(bi * ch + c + 1) * len];
                                let dw = &mut d[(o * ch + c) * k..(o * ch + c + 1) * k];
                                for (t, &gv) in gr.iter().enumerate() {
                                    let s = t * stride;
                                    for j in 0..k {
                                        dw[j] += gv * xr[s + j];
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*x, &|d| {
                    for bi in 0..batch {
                        for o in 0..oc {
                            let gr = &g[(bi * oc + o) * lo..(bi * oc + o + 1) * lo];
                            for c in 0..ch {
                                let wr = &wv[(o * ch + c) * k..(o * ch + c + 1) * k];
                                let dx = &mut d[(bi * ch + c) * len..(bi * ch + c + 1) * len];
                                for (t, &gv) in gr.iter().enumerate() {
                                    let s = t * stride;
                                    for j in 0..k {
                                        dx[s + j] += gv * wr[j];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_blocks(g, r, c);
                acc(*x, &|d| d.iter_mut().zip(&back).for_each(|(d, &g)| *d += g));
            }
            Op::Reshape(x) => {
                acc(*x, &|d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let gs = &g[offset..offset + n];
                    acc(p, &|d| d.iter_mut().zip(gs).for_each(|(d, &g)| *d += g));
                    offset += n;
                }
            }
            Op::GatherRows(src, idx) => {
                let w = node.value.last_dim();
                acc(*src, &|d| {
                    for (r, &i) in idx.iter().enumerate() {
                        let gr = &g[r * w..(r + 1) * w];
                        d[i * w..(i + 1) * w]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, &g)| *d += g);
                    }
                });
            }
            Op::SplitHeads {
                qkv,
                part,
                batch,
                seq,
                heads,
            } => {
                let hidden = self.value(*qkv).last_dim() / 3;
                let hd = hidden / heads;
                acc(*qkv, &|d| {
                    for b in 0..*batch {
                        for t in 0..*seq {
                            let base = (b * seq + t) * 3 * hidden + part * hidden;
                            for h in 0..*heads {
                                let src = ((b * heads + h) * seq + t) * hd;
                                for j in 0..hd {
                                    d[base + h * hd + j] += g[src + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let hd = self.value(*x).last_dim();
                let hidden = hd * heads;
                acc(*x, &|d| {
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for t in 0..*seq {
                                let dst = ((b * heads + h) * seq + t) * hd;
                                let src = (b * seq + t) * hidden + h * hd;
                                for j in 0..hd {
                                    d[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &|d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mean(x) => {
                let g0 = g[0] / T::of(self.value(*x).numel() as f64);
                acc(*x, &|d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::PearsonLoss { pred, target } => {
                let s = self.shape(*pred);
                let (t, v) = (s[0], s[1]);
                let dr = objective::pearson_columns_grad(target, self.vals(*pred), t, v);
                let scale = -g[0].to64() / v as f64;
                acc(*pred, &|d| {
                    for (d, &r) in d.iter_mut().zip(&dr) {
                        *d += T::of(scale * r);
                    }
                });
            }
        }
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
        Op::Bmm { a, b, .. } => vec![*a, *b],
        Op::Scale(x, _)
        | Op::Unary(x, _)
        | Op::Softmax(x)
        | Op::Transpose(x)
        | Op::Reshape(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::GatherRows(x, _) => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Conv1d { x, w, bias, .. } => {
            let mut v = vec![*x, *w];
            v.extend(bias);
            v
        }
        Op::ConcatRows(p) => p.clone(),
        Op::SplitHeads { qkv, .. } => vec![*qkv],
        Op::MergeHeads { x, .. } => vec![*x],
        Op::PearsonLoss { pred, .. } => vec![*pred],
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        let e = (v.to64() - max.to64()).exp();
        total += e;
        *v = T::of(e);
    }
    for v in row.iter_mut() {
        *v = T::of(v.to64() / total);
    }
}

/// Transposes each trailing `r × c` block of `src`.
fn transpose_blocks<T: Real>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (s, d) in src.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
    out
}
