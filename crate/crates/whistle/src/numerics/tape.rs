//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Ops record themselves (with whatever forward state their backward needs)
//! as they execute; [`Tape::backward`] replays them in reverse, accumulating
//! vector-Jacobian products. Every op output and every gradient is checked
//! for finiteness — NaN/Inf never propagates silently.
//!
//! The tape is generic over [`Real`] so the gradient checker can run the
//! identical graph code in f64.

use super::kernels as k;
use super::tensor::{Real, TensorBase};
use crate::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// c[m,n] = a[m,k]·b[k,n]
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// c[g,m,n] = a[g,m,k]·b[g,k,n]
    Bmm { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize },
    /// c[g,m,n] = a[g,m,k]·b[g,n,k]ᵀ
    BmmNt { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize },
    Conv1d { x: Var, w: Var, bias: Var, meta: ConvMeta },
    ConvT1d { x: Var, w: Var, bias: Var, meta: ConvMeta },
    Embedding { table: Var, ids: Vec<u32>, dim: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, rows: usize, cols: usize, stats: Vec<T> },
    Softmax { x: Var, rows: usize, cols: usize },
    LogSoftmax { x: Var, rows: usize, cols: usize },
    Gelu { x: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    /// y[r,c] = x[r,c] + bias[c]
    AddBias { x: Var, bias: Var, rows: usize, cols: usize },
    /// y = x + tile(m, g): x[g·rows, cols], m[rows, cols]
    AddBcast { x: Var, m: Var, g: usize, rows: usize, cols: usize },
    /// [B·L, H·dh] -> [B·H, L, dh]
    SplitHeads { x: Var, b: usize, l: usize, heads: usize, dh: usize },
    /// [B·H, L, dh] -> [B·L, H·dh]
    MergeHeads { x: Var, b: usize, l: usize, heads: usize, dh: usize },
    /// [B, L, C] -> [B, C, L]
    NlcToNcl { x: Var, b: usize, l: usize, c: usize },
    /// [B, C, L] -> [B, L, C]
    NclToNlc { x: Var, b: usize, c: usize, l: usize },
    /// [B, P, C] -> [B, C], mean over P
    MeanPos { x: Var, b: usize, p: usize, c: usize },
    Reshape { x: Var },
    /// mean over all elements of (a−b)²
    Mse { a: Var, b: Var },
    /// weighted mean of −log softmax(logits)[target]; saves probs
    CeLogits { logits: Var, targets: Vec<u32>, weights: Vec<T>, rows: usize, cols: usize, probs: Vec<T>, inv_w: T },
    /// 0.5·Σ(μ² + eˡᵛ − 1 − lv) / batch
    KlDiag { mu: Var, logvar: Var, batch: usize },
}

#[derive(Debug, Clone, Copy)]
struct ConvMeta {
    batch: usize,
    c_in: usize,
    c_out: usize,
    l_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

struct Node<T> {
    op: Op<T>,
    value: TensorBase<T>,
    needs_grad: bool,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<TensorBase<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the loss w.r.t. `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&TensorBase<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<TensorBase<T>> {
        self.grads[v.0].take()
    }
}

/// The recording tape.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a graph input. Its `requires_grad` flag decides
    /// whether gradients are tracked through it.
    pub fn leaf(&mut self, value: TensorBase<T>) -> Var {
        let needs_grad = value.requires_grad;
        self.push(Op::Leaf, value, needs_grad)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, mut value: TensorBase<T>) -> Var {
        value.requires_grad = false;
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &TensorBase<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: TensorBase<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn finite(&self, op: &'static str, data: &[T]) -> Result<()> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch { op, detail }
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        k::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, kk, n);
        self.finite("matmul", &out)?;
        let needs = self.needs(a) || self.needs(b);
        let value = TensorBase::from_vec(&[m, n], out)?;
        Ok(self.push(Op::Matmul { a, b, m, k: kk, n }, value, needs))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Self::shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (g, m, kk, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::ZERO; g * m * n];
        k::bmm_nn(self.value(a).data(), self.value(b).data(), &mut out, g, m, kk, n);
        self.finite("bmm", &out)?;
        let needs = self.needs(a) || self.needs(b);
        let value = TensorBase::from_vec(&[g, m, n], out)?;
        Ok(self.push(Op::Bmm { a, b, g, m, k: kk, n }, value, needs))
    }

    /// a[g,m,k] · b[g,n,k]ᵀ — attention scores.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Self::shape_err("bmm_nt", format!("{sa:?} x {sb:?}")));
        }
        let (g, m, kk, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![T::ZERO; g * m * n];
        k::bmm_nt(self.value(a).data(), self.value(b).data(), &mut out, g, m, kk, n);
        self.finite("bmm_nt", &out)?;
        let needs = self.needs(a) || self.needs(b);
        let value = TensorBase::from_vec(&[g, m, n], out)?;
        Ok(self.push(Op::BmmNt { a, b, g, m, k: kk, n }, value, needs))
    }

    // ── Convolutions ─────────────────────────────────────────────────

    /// x: [B, C_in, L], w: [C_out, C_in, K], bias: [C_out].
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Self::shape_err("conv1d", format!("x {sx:?}, w {sw:?}")));
        }
        let meta = ConvMeta {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            l_in: sx[2],
            k: sw[2],
            stride,
            pad,
        };
        if sx[2] + 2 * pad < sw[2] {
            return Err(Self::shape_err("conv1d", format!("kernel {} wider than padded input {}", sw[2], sx[2] + 2 * pad)));
        }
        let l_out = k::conv1d_out_len(meta.l_in, meta.k, stride, pad);
        let mut out = vec![T::ZERO; meta.batch * meta.c_out * l_out];
        k::conv1d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
            &mut out,
            meta.batch,
            meta.c_in,
            meta.c_out,
            meta.l_in,
            meta.k,
            stride,
            pad,
        );
        self.finite("conv1d", &out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        let value = TensorBase::from_vec(&[meta.batch, meta.c_out, l_out], out)?;
        Ok(self.push(Op::Conv1d { x, w, bias, meta }, value, needs))
    }

    /// x: [B, C_in, L], w: [C_in, C_out, K], bias: [C_out].
    pub fn conv1d_transposed(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[0] {
            return Err(Self::shape_err("conv1d_transposed", format!("x {sx:?}, w {sw:?}")));
        }
        let meta = ConvMeta {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[1],
            l_in: sx[2],
            k: sw[2],
            stride,
            pad,
        };
        let l_out = k::conv1d_transposed_out_len(meta.l_in, meta.k, stride, pad);
        let mut out = vec![T::ZERO; meta.batch * meta.c_out * l_out];
        k::conv1d_transposed_fwd(
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
            &mut out,
            meta.batch,
            meta.c_in,
            meta.c_out,
            meta.l_in,
            meta.k,
            stride,
            pad,
        );
        self.finite("conv1d_transposed", &out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        let value = TensorBase::from_vec(&[meta.batch, meta.c_out, l_out], out)?;
        Ok(self.push(Op::ConvT1d { x, w, bias, meta }, value, needs))
    }

    // ── Lookup, normalization, activations ───────────────────────────

    /// table: [V, E]; out: [ids.len(), E].
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Self::shape_err("embedding", format!("table {st:?}")));
        }
        let (vocab, dim) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Self::shape_err("embedding", format!("id {bad} >= vocab {vocab}")));
        }
        let mut out = vec![T::ZERO; ids.len() * dim];
        let tdata = self.value(table).data();
        for (row, &id) in out.chunks_exact_mut(dim).zip(ids) {
            row.copy_from_slice(&tdata[id as usize * dim..(id as usize + 1) * dim]);
        }
        let needs = self.needs(table);
        let value = TensorBase::from_vec(&[ids.len(), dim], out)?;
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec(), dim }, value, needs))
    }

    /// Row-wise layernorm over the last dimension of a [rows, cols] view.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().ok_or_else(|| Self::shape_err("layernorm", "scalar input".into()))?;
        let rows = self.value(x).numel() / cols;
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Self::shape_err(
                "layernorm",
                format!("x {:?}, gamma {:?}", sx, self.shape(gamma)),
            ));
        }
        let mut out = vec![T::ZERO; rows * cols];
        let mut stats = vec![T::ZERO; 2 * rows];
        k::layernorm_fwd(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mut out,
            &mut stats,
            rows,
            cols,
            T::from_f64(1e-5),
        );
        self.finite("layernorm", &out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let value = TensorBase::from_vec(&sx, out)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, rows, cols, stats }, value, needs))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        let rows = self.value(x).numel() / cols;
        let mut out = vec![T::ZERO; rows * cols];
        k::softmax_rows(self.value(x).data(), &mut out, rows, cols);
        self.finite("softmax", &out)?;
        let needs = self.needs(x);
        let value = TensorBase::from_vec(&sx, out)?;
        Ok(self.push(Op::Softmax { x, rows, cols }, value, needs))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        let rows = self.value(x).numel() / cols;
        let mut out = vec![T::ZERO; rows * cols];
        k::log_softmax_rows(self.value(x).data(), &mut out, rows, cols);
        self.finite("log_softmax", &out)?;
        let needs = self.needs(x);
        let value = TensorBase::from_vec(&sx, out)?;
        Ok(self.push(Op::LogSoftmax { x, rows, cols }, value, needs))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let mut out = vec![T::ZERO; self.value(x).numel()];
        k::unary_map(self.value(x).data(), &mut out, k::gelu);
        self.finite("gelu", &out)?;
        let needs = self.needs(x);
        let value = TensorBase::from_vec(self.shape(x).to_vec().as_slice(), out)?;
        Ok(self.push(Op::Gelu { x }, value, needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = vec![T::ZERO; self.value(x).numel()];
        k::unary_map(self.value(x).data(), &mut out, |v| v.max_val(T::ZERO));
        self.finite("relu", &out)?;
        let needs = self.needs(x);
        let value = TensorBase::from_vec(self.shape(x).to_vec().as_slice(), out)?;
        Ok(self.push(Op::Relu { x }, value, needs))
    }

    // ── Elementwise and broadcasts ───────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        self.finite("add", &out)?;
        let needs = self.needs(a) || self.needs(b);
        let value = TensorBase::from_vec(self.shape(a).to_vec().as_slice(), out)?;
        Ok(self.push(Op::Add { a, b }, value, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        self.finite("mul", &out)?;
        let needs = self.needs(a) || self.needs(b);
        let value = TensorBase::from_vec(self.shape(a).to_vec().as_slice(), out)?;
        Ok(self.push(Op::Mul { a, b }, value, needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * c).collect();
        self.finite("scale", &out)?;
        let needs = self.needs(x);
        let value = TensorBase::from_vec(self.shape(x).to_vec().as_slice(), out)?;
        Ok(self.push(Op::Scale { x, c }, value, needs))
    }

    /// x viewed as [rows, cols] plus a [cols] bias on every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap();
        let rows = self.value(x).numel() / cols;
        if self.value(bias).numel() != cols {
            return Err(Self::shape_err(
                "add_bias",
                format!("x {:?}, bias {:?}", sx, self.shape(bias)),
            ));
        }
        let bdata = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            for (v, &b) in row.iter_mut().zip(&bdata) {
                *v += b;
            }
        }
        self.finite("add_bias", &out)?;
        let needs = self.needs(x) || self.needs(bias);
        let value = TensorBase::from_vec(&sx, out)?;
        Ok(self.push(Op::AddBias { x, bias, rows, cols }, value, needs))
    }

    /// x viewed as g blocks of [rows, cols]; m is one [rows, cols] block
    /// added to each (positions, attention masks).
    pub fn add_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let block = self.value(m).numel();
        let total = self.value(x).numel();
        if block == 0 || total % block != 0 {
            return Err(Self::shape_err(
                "add_broadcast",
                format!("x {:?}, m {:?}", self.shape(x), self.shape(m)),
            ));
        }
        let g = total / block;
        let sm = self.shape(m).to_vec();
        let cols = *sm.last().unwrap();
        let rows = block / cols;
        let mdata = self.value(m).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for blk in out.chunks_exact_mut(block) {
            for (v, &mv) in blk.iter_mut().zip(&mdata) {
                *v += mv;
            }
        }
        self.finite("add_broadcast", &out)?;
        let needs = self.needs(x) || self.needs(m);
        let value = TensorBase::from_vec(self.shape(x).to_vec().as_slice(), out)?;
        Ok(self.push(Op::AddBcast { x, m, g, rows, cols }, value, needs))
    }

    // ── Data movement ────────────────────────────────────────────────

    /// [B·L, H·dh] -> [B·H, L, dh]
    pub fn split_heads(&mut self, x: Var, b: usize, l: usize, heads: usize, dh: usize) -> Result<Var> {
        if self.value(x).numel() != b * l * heads * dh {
            return Err(Self::shape_err(
                "split_heads",
                format!("{:?} vs b{b} l{l} h{heads} dh{dh}", self.shape(x)),
            ));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; xd.len()];
        for bi in 0..b {
            for h in 0..heads {
                for li in 0..l {
                    let src = ((bi * l + li) * heads + h) * dh;
                    let dst = (((bi * heads + h) * l) + li) * dh;
                    out[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let needs = self.needs(x);
        let value = TensorBase::from_vec(&[b * heads, l, dh], out)?;
        Ok(self.push(Op::SplitHeads { x, b, l, heads, dh }, value, needs))
    }

    /// [B·H, L, dh] -> [B·L, H·dh]
    pub fn merge_heads(&mut self, x: Var, b: usize, l: usize, heads: usize, dh: usize) -> Result<Var> {
        if self.value(x).numel() != b * l * heads * dh {
            return Err(Self::shape_err(
                "merge_heads",
                format!("{:?} vs b{b} l{l} h{heads} dh{dh}", self.shape(x)),
            ));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; xd.len()];
        for bi in 0..b {
            for h in 0..heads {
                for li in 0..l {
                    let src = (((bi * heads + h) * l) + li) * dh;
                    let dst = ((bi * l + li) * heads + h) * dh;
                    out[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let needs = self.needs(x);
        let value = TensorBase::from_vec(&[b * l, heads * dh], out)?;
        Ok(self.push(Op::MergeHeads { x, b, l, heads, dh }, value, needs))
    }

    /// [B, L, C] -> [B, C, L] (rows-of-features to channel-major for conv).
    pub fn nlc_to_ncl(&mut self, x: Var, b: usize, l: usize, c: usize) -> Result<Var> {
        if self.value(x).numel() != b * l * c {
            return Err(Self::shape_err("nlc_to_ncl", format!("{:?}", self.shape(x))));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; xd.len()];
        for bi in 0..b {
            for li in 0..l {
                for ci in 0..c {
                    out[(bi * c + ci) * l + li] = xd[(bi * l + li) * c + ci];
                }
            }
        }
        let needs = self.needs(x);
        let value = TensorBase::from_vec(&[b, c, l], out)?;
        Ok(self.push(Op::NlcToNcl { x, b, l, c }, value, needs))
    }

    /// [B, C, L] -> [B, L, C]
    pub fn ncl_to_nlc(&mut self, x: Var, b: usize, c: usize, l: usize) -> Result<Var> {
        if self.value(x).numel() != b * l * c {
            return Err(Self::shape_err("ncl_to_nlc", format!("{:?}", self.shape(x))));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                for li in 0..l {
                    out[(bi * l + li) * c + ci] = xd[(bi * c + ci) * l + li];
                }
            }
        }
        let needs = self.needs(x);
        let value = TensorBase::from_vec(&[b, l, c], out)?;
        Ok(self.push(Op::NclToNlc { x, b, c, l }, value, needs))
    }

    /// [B, P, C] -> [B, C]: mean over positions.
    pub fn mean_positions(&mut self, x: Var, b: usize, p: usize, c: usize) -> Result<Var> {
        if self.value(x).numel() != b * p * c {
            return Err(Self::shape_err("mean_positions", format!("{:?}", self.shape(x))));
        }
        let xd = self.value(x).data();
        let inv_p = T::ONE / T::from_f64(p as f64);
        let mut out = vec![T::ZERO; b * c];
        for bi in 0..b {
            for pi in 0..p {
                let row = &xd[(bi * p + pi) * c..(bi * p + pi + 1) * c];
                for (o, &v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o += v * inv_p;
                }
            }
        }
        let needs = self.needs(x);
        let value = TensorBase::from_vec(&[b, c], out)?;
        Ok(self.push(Op::MeanPos { x, b, p, c }, value, needs))
    }

    /// Same data, different shape (copying; backward reshapes back).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Self::shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let out = self.value(x).data().to_vec();
        let needs = self.needs(x);
        let value = TensorBase::from_vec(shape, out)?;
        Ok(self.push(Op::Reshape { x }, value, needs))
    }

    // ── Losses ───────────────────────────────────────────────────────

    /// Mean over all elements of (a−b)².
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let n = T::from_f64(self.value(a).numel() as f64);
        let sum: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let loss = sum / n;
        self.finite("mse", &[loss])?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mse { a, b }, TensorBase::scalar(loss), needs))
    }

    /// Weighted mean of −log softmax(logits)[target] over rows.
    /// Rows with weight 0 (padding) contribute nothing.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[u32],
        weights: &[T],
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let cols = *s.last().unwrap();
        let rows = self.value(logits).numel() / cols;
        if targets.len() != rows || weights.len() != rows {
            return Err(Self::shape_err(
                "cross_entropy",
                format!("logits {s:?}, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= cols) {
            return Err(Self::shape_err("cross_entropy", format!("target {bad} >= classes {cols}")));
        }
        let total_w: T = weights.iter().copied().sum();
        if total_w.to_f64() <= 0.0 {
            return Err(Error::Train("cross-entropy needs at least one unmasked position".into()));
        }
        let inv_w = T::ONE / total_w;
        let mut probs = vec![T::ZERO; rows * cols];
        k::softmax_rows(self.value(logits).data(), &mut probs, rows, cols);
        let mut loss = T::ZERO;
        for r in 0..rows {
            let p = probs[r * cols + targets[r] as usize];
            loss += weights[r] * -(p.max_val(T::from_f64(1e-30))).ln();
        }
        loss *= inv_w;
        self.finite("cross_entropy", &[loss])?;
        let needs = self.needs(logits);
        let op = Op::CeLogits { logits, targets: targets.to_vec(), weights: weights.to_vec(), rows, cols, probs, inv_w };
        Ok(self.push(op, TensorBase::scalar(loss), needs))
    }

    /// 0.5·Σ(μ² + exp(lv) − 1 − lv), summed over elements, / batch.
    pub fn kl_diag_gaussian(&mut self, mu: Var, logvar: Var, batch: usize) -> Result<Var> {
        if self.shape(mu) != self.shape(logvar) {
            return Err(Self::shape_err(
                "kl_diag_gaussian",
                format!("{:?} vs {:?}", self.shape(mu), self.shape(logvar)),
            ));
        }
        let half = T::from_f64(0.5);
        let inv_b = T::ONE / T::from_f64(batch as f64);
        let sum: T = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(logvar).data())
            .map(|(&m, &lv)| m * m + lv.exp() - T::ONE - lv)
            .sum();
        let loss = half * sum * inv_b;
        self.finite("kl_diag_gaussian", &[loss])?;
        let needs = self.needs(mu) || self.needs(logvar);
        Ok(self.push(Op::KlDiag { mu, logvar, batch }, TensorBase::scalar(loss), needs))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Self::shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<TensorBase<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(TensorBase::scalar(T::ONE));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            // Keep leaf grads; interior grads are consumed here.
            let g_out = match &self.nodes[i].op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_op(i, &g_out, &mut grads)?;
        }

        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Grads { grads })
    }

    fn accum(&self, grads: &mut [Option<TensorBase<T>>], v: Var, delta: TensorBase<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += *dv;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(
        &self,
        idx: usize,
        g_out: &TensorBase<T>,
        grads: &mut [Option<TensorBase<T>>],
    ) -> Result<()> {
        let go = g_out.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}

            Op::Matmul { a, b, m, k: kk, n } => {
                if self.needs(*a) {
                    let mut da = vec![T::ZERO; m * kk];
                    k::matmul_nt(go, self.value(*b).data(), &mut da, *m, *n, *kk);
                    self.accum(grads, *a, TensorBase::from_vec(&[*m, *kk], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::ZERO; kk * n];
                    k::matmul_tn(self.value(*a).data(), go, &mut db, *kk, *m, *n);
                    self.accum(grads, *b, TensorBase::from_vec(&[*kk, *n], db)?);
                }
            }

            Op::Bmm { a, b, g, m, k: kk, n } => {
                if self.needs(*a) {
                    let mut da = vec![T::ZERO; g * m * kk];
                    k::bmm_nt(go, self.value(*b).data(), &mut da, *g, *m, *n, *kk);
                    self.accum(grads, *a, TensorBase::from_vec(&[*g, *m, *kk], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::ZERO; g * kk * n];
                    k::bmm_tn(self.value(*a).data(), go, &mut db, *g, *n, *kk, *m)
                        .pipe_unit();
                    self.accum(grads, *b, TensorBase::from_vec(&[*g, *kk, *n], db)?);
                }
            }

            Op::BmmNt { a, b, g, m, k: kk, n } => {
                // c[g,m,n] = a[g,m,k]·b[g,n,k]ᵀ
                if self.needs(*a) {
                    // da = dc · b  : [g,m,n]x[g,n,k]
                    let mut da = vec![T::ZERO; g * m * kk];
                    k::bmm_nn(go, self.value(*b).data(), &mut da, *g, *m, *n, *kk);
                    self.accum(grads, *a, TensorBase::from_vec(&[*g, *m, *kk], da)?);
                }
                if self.needs(*b) {
                    // db = dcᵀ · a : [g,n,m]x[g,m,k]
                    let mut db = vec![T::ZERO; g * n * kk];
                    k::bmm_tn(go, self.value(*a).data(), &mut db, *g, *n, *m, *kk)
                        .pipe_unit();
                    self.accum(grads, *b, TensorBase::from_vec(&[*g, *n, *kk], db)?);
                }
            }

            Op::Conv1d { x, w, bias, meta } => {
                let mut dx = vec![T::ZERO; meta.batch * meta.c_in * meta.l_in];
                let mut dw = vec![T::ZERO; meta.c_out * meta.c_in * meta.k];
                let mut db = vec![T::ZERO; meta.c_out];
                k::conv1d_bwd(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    go,
                    &mut dx,
                    &mut dw,
                    &mut db,
                    meta.batch,
                    meta.c_in,
                    meta.c_out,
                    meta.l_in,
                    meta.k,
                    meta.stride,
                    meta.pad,
                );
                if self.needs(*x) {
                    self.accum(grads, *x, TensorBase::from_vec(&[meta.batch, meta.c_in, meta.l_in], dx)?);
                }
                if self.needs(*w) {
                    self.accum(grads, *w, TensorBase::from_vec(&[meta.c_out, meta.c_in, meta.k], dw)?);
                }
                if self.needs(*bias) {
                    self.accum(grads, *bias, TensorBase::from_vec(&[meta.c_out], db)?);
                }
            }

            Op::ConvT1d { x, w, bias, meta } => {
                let mut dx = vec![T::ZERO; meta.batch * meta.c_in * meta.l_in];
                let mut dw = vec![T::ZERO; meta.c_in * meta.c_out * meta.k];
                let mut db = vec![T::ZERO; meta.c_out];
                k::conv1d_transposed_bwd(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    go,
                    &mut dx,
                    &mut dw,
                    &mut db,
                    meta.batch,
                    meta.c_in,
                    meta.c_out,
                    meta.l_in,
                    meta.k,
                    meta.stride,
                    meta.pad,
                );
                if self.needs(*x) {
                    self.accum(grads, *x, TensorBase::from_vec(&[meta.batch, meta.c_in, meta.l_in], dx)?);
                }
                if self.needs(*w) {
                    self.accum(grads, *w, TensorBase::from_vec(&[meta.c_in, meta.c_out, meta.k], dw)?);
                }
                if self.needs(*bias) {
                    self.accum(grads, *bias, TensorBase::from_vec(&[meta.c_out], db)?);
                }
            }

            Op::Embedding { table, ids, dim } => {
                if self.needs(*table) {
                    let vocab = self.shape(*table)[0];
                    let mut dt = vec![T::ZERO; vocab * dim];
                    for (row, &id) in go.chunks_exact(*dim).zip(ids) {
                        let dst = &mut dt[id as usize * dim..(id as usize + 1) * dim];
                        for (d, &r) in dst.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accum(grads, *table, TensorBase::from_vec(&[vocab, *dim], dt)?);
                }
            }

            Op::LayerNorm { x, gamma, beta, rows, cols, stats } => {
                let mut dx = vec![T::ZERO; rows * cols];
                let mut dgamma = vec![T::ZERO; *cols];
                let mut dbeta = vec![T::ZERO; *cols];
                k::layernorm_bwd(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    stats,
                    go,
                    &mut dx,
                    &mut dgamma,
                    &mut dbeta,
                    *rows,
                    *cols,
                );
                if self.needs(*x) {
                    self.accum(grads, *x, TensorBase::from_vec(self.shape(*x).to_vec().as_slice(), dx)?);
                }
                if self.needs(*gamma) {
                    self.accum(grads, *gamma, TensorBase::from_vec(&[*cols], dgamma)?);
                }
                if self.needs(*beta) {
                    self.accum(grads, *beta, TensorBase::from_vec(&[*cols], dbeta)?);
                }
            }

            Op::Softmax { x, rows, cols } => {
                if self.needs(*x) {
                    let mut dx = vec![T::ZERO; rows * cols];
                    k::softmax_rows_bwd(self.nodes[idx].value.data(), go, &mut dx, *rows, *cols);
                    self.accum(grads, *x, TensorBase::from_vec(self.shape(*x).to_vec().as_slice(), dx)?);
                }
            }

            Op::LogSoftmax { x, rows, cols } => {
                if self.needs(*x) {
                    let mut dx = vec![T::ZERO; rows * cols];
                    k::log_softmax_rows_bwd(self.nodes[idx].value.data(), go, &mut dx, *rows, *cols);
                    self.accum(grads, *x, TensorBase::from_vec(self.shape(*x).to_vec().as_slice(), dx)?);
                }
            }

            Op::Gelu { x } => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    let dx: Vec<T> =
                        xd.iter().zip(go).map(|(&xv, &g)| g * k::gelu_grad(xv)).collect();
                    self.accum(grads, *x, TensorBase::from_vec(self.shape(*x).to_vec().as_slice(), dx)?);
                }
            }

            Op::Relu { x } => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    let dx: Vec<T> = xd
                        .iter()
                        .zip(go)
                        .map(|(&xv, &g)| if xv > T::ZERO { g } else { T::ZERO })
                        .collect();
                    self.accum(grads, *x, TensorBase::from_vec(self.shape(*x).to_vec().as_slice(), dx)?);
                }
            }

            Op::Add { a, b } => {
                if self.needs(*a) {
                    self.accum(grads, *a, g_out.clone().reshaped(self.shape(*a).to_vec().as_slice())?);
                }
                if self.needs(*b) {
                    self.accum(grads, *b, g_out.clone().reshaped(self.shape(*b).to_vec().as_slice())?);
                }
            }

            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<T> =
                        self.value(*b).data().iter().zip(go).map(|(&bv, &g)| bv * g).collect();
                    self.accum(grads, *a, TensorBase::from_vec(self.shape(*a).to_vec().as_slice(), da)?);
                }
                if self.needs(*b) {
                    let db: Vec<T> =
                        self.value(*a).data().iter().zip(go).map(|(&av, &g)| av * g).collect();
                    self.accum(grads, *b, TensorBase::from_vec(self.shape(*b).to_vec().as_slice(), db)?);
                }
            }

            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let dx: Vec<T> = go.iter().map(|&g| g * *c).collect();
                    self.accum(grads, *x, TensorBase::from_vec(self.shape(*x).to_vec().as_slice(), dx)?);
                }
            }

            Op::AddBias { x, bias, rows: _, cols } => {
                if self.needs(*x) {
                    self.accum(grads, *x, g_out.clone().reshaped(self.shape(*x).to_vec().as_slice())?);
                }
                if self.needs(*bias) {
                    let mut db = vec![T::ZERO; *cols];
                    for row in go.chunks_exact(*cols) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accum(grads, *bias, TensorBase::from_vec(&[*cols], db)?);
                }
            }

            Op::AddBcast { x, m, g: _, rows, cols } => {
                if self.needs(*x) {
                    self.accum(grads, *x, g_out.clone().reshaped(self.shape(*x).to_vec().as_slice())?);
                }
                if self.needs(*m) {
                    let block = rows * cols;
                    let mut dm = vec![T::ZERO; block];
                    for blk in go.chunks_exact(block) {
                        for (d, &g) in dm.iter_mut().zip(blk) {
                            *d += g;
                        }
                    }
                    self.accum(grads, *m, TensorBase::from_vec(self.shape(*m).to_vec().as_slice(), dm)?);
                }
            }

            Op::SplitHeads { x, b, l, heads, dh } => {
                if self.needs(*x) {
                    let mut dx = vec![T::ZERO; go.len()];
                    for bi in 0..*b {
                        for h in 0..*heads {
                            for li in 0..*l {
                                let dst = ((bi * l + li) * heads + h) * dh;
                                let src = (((bi * heads + h) * l) + li) * dh;
                                dx[dst..dst + dh].copy_from_slice(&go[src..src + dh]);
                            }
                        }
                    }
                    self.accum(grads, *x, TensorBase::from_vec(self.shape(*x).to_vec().as_slice(), dx)?);
                }
            }

            Op::MergeHeads { x, b, l, heads, dh } => {
                if self.needs(*x) {
                    let mut dx = vec![T::ZERO; go.len()];
                    for bi in 0..*b {
                        for h in 0..*heads {
                            for li in 0..*l {
                                let dst = (((bi * heads + h) * l) + li) * dh;
                                let src = ((bi * l + li) * heads + h) * dh;
                                dx[dst..dst + dh].copy_from_slice(&go[src..src + dh]);
                            }
                        }
                    }
                    self.accum(grads, *x, TensorBase::from_vec(self.shape(*x).to_vec().as_slice(), dx)?);
                }
            }

            Op::NlcToNcl { x, b, l, c } => {
                if self.needs(*x) {
                    let mut dx = vec![T::ZERO; go.len()];
                    for bi in 0..*b {
                        for li in 0..*l {
                            for ci in 0..*c {
                                dx[(bi * l + li) * c + ci] = go[(bi * c + ci) * l + li];
                            }
                        }
                    }
                    self.accum(grads, *x, TensorBase::from_vec(self.shape(*x).to_vec().as_slice(), dx)?);
                }
            }

            Op::NclToNlc { x, b, c, l } => {
                if self.needs(*x) {
                    let mut dx = vec![T::ZERO; go.len()];
                    for bi in 0..*b {
                        for ci in 0..*c {
                            for li in 0..*l {
                                dx[(bi * c + ci) * l + li] = go[(bi * l + li) * c + ci];
                            }
                        }
                    }
                    self.accum(grads, *x, TensorBase::from_vec(self.shape(*x).to_vec().as_slice(), dx)?);
                }
            }

            Op::MeanPos { x, b, p, c } => {
                if self.needs(*x) {
                    let inv_p = T::ONE / T::from_f64(*p as f64);
                    let mut dx = vec![T::ZERO; b * p * c];
                    for bi in 0..*b {
                        let g_row = &go[bi * c..(bi + 1) * c];
                        for pi in 0..*p {
                            let dst = &mut dx[(bi * p + pi) * c..(bi * p + pi + 1) * c];
                            for (d, &g) in dst.iter_mut().zip(g_row) {
                                *d += g * inv_p;
                            }
                        }
                    }
                    self.accum(grads, *x, TensorBase::from_vec(self.shape(*x).to_vec().as_slice(), dx)?);
                }
            }

            Op::Reshape { x } => {
                if self.needs(*x) {
                    self.accum(grads, *x, g_out.clone().reshaped(self.shape(*x).to_vec().as_slice())?);
                }
            }

            Op::Mse { a, b } => {
                let n = self.value(*a).numel();
                let scale = g_out.item() * T::from_f64(2.0 / n as f64);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let da: Vec<T> = ad.iter().zip(bd).map(|(&x, &y)| scale * (x - y)).collect();
                    self.accum(grads, *a, TensorBase::from_vec(self.shape(*a).to_vec().as_slice(), da)?);
                }
                if self.needs(*b) {
                    let db: Vec<T> = ad.iter().zip(bd).map(|(&x, &y)| -scale * (x - y)).collect();
                    self.accum(grads, *b, TensorBase::from_vec(self.shape(*b).to_vec().as_slice(), db)?);
                }
            }

            Op::CeLogits { logits, targets, weights, rows, cols, probs, inv_w } => {
                if self.needs(*logits) {
                    let g = g_out.item();
                    let mut dl = vec![T::ZERO; rows * cols];
                    for r in 0..*rows {
                        let w = weights[r] * *inv_w * g;
                        if w.to_f64() == 0.0 {
                            continue;
                        }
                        let p_row = &probs[r * cols..(r + 1) * cols];
                        let d_row = &mut dl[r * cols..(r + 1) * cols];
                        for (d, &p) in d_row.iter_mut().zip(p_row) {
                            *d = w * p;
                        }
                        d_row[targets[r] as usize] -= w;
                    }
                    self.accum(grads, *logits, TensorBase::from_vec(self.shape(*logits).to_vec().as_slice(), dl)?);
                }
            }

            Op::KlDiag { mu, logvar, batch } => {
                let g = g_out.item();
                let half = T::from_f64(0.5);
                let scale = g / T::from_f64(*batch as f64);
                if self.needs(*mu) {
                    let dmu: Vec<T> =
                        self.value(*mu).data().iter().map(|&m| m * scale).collect();
                    self.accum(grads, *mu, TensorBase::from_vec(self.shape(*mu).to_vec().as_slice(), dmu)?);
                }
                if self.needs(*logvar) {
                    let dlv: Vec<T> = self
                        .value(*logvar)
                        .data()
                        .iter()
                        .map(|&lv| half * (lv.exp() - T::ONE) * scale)
                        .collect();
                    self.accum(grads, *logvar, TensorBase::from_vec(self.shape(*logvar).to_vec().as_slice(), dlv)?);
                }
            }
        }
        Ok(())
    }
}

// bmm_tn returns (); this keeps the call sites uniform with the other kernels.
trait PipeUnit {
    fn pipe_unit(self);
}
impl PipeUnit for () {
    fn pipe_unit(self) {}
}
