//! Define-by-run computation tape.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::{Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias(Var, Var),
    AddTokenBroadcast(Var, Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    ReluSquared(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<F>,
    },
    Softmax(Var),
    Rope {
        x: Var,
        cos: Vec<F>,
        sin: Vec<F>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    ConcatTokens(Vec<Var>),
    ConcatLast(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded forward computation plus gradient buffers.
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    has_grads: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, len: usize) -> &mut [F] {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            has_grads: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. `v`, if `v` took part in it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grad(v)?;
        Tensor::new(self.shape(v), g.to_vec()).ok()
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.has_grads = false;
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v * c).collect())
            .expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `x[..., n] + bias[n]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &bj) in row.iter_mut().zip(b) {
                *v = *v + bj;
            }
        }
        let out = Tensor::new(self.shape(x), data)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// `x[B, T, n] + y[B, n]`, broadcasting `y` over the token axis.
    pub fn add_token_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if xs.len() != 3 || ys.len() != 2 || xs[0] != ys[0] || xs[2] != ys[1] {
            return Err(mismatch("add_token_broadcast", xs, ys));
        }
        let (t, n) = (xs[1], xs[2]);
        let yd = self.value(y).data();
        let mut data = self.value(x).data().to_vec();
        for (seq, yrow) in data.chunks_exact_mut(t * n).zip(yd.chunks_exact(n)) {
            for tok in seq.chunks_exact_mut(n) {
                for (v, &w) in tok.iter_mut().zip(yrow) {
                    *v = *v + w;
                }
            }
        }
        let out = Tensor::new(self.shape(x), data)?;
        let rg = self.needs(&[x, y]);
        Ok(self.push(out, Op::AddTokenBroadcast(x, y), rg))
    }

    /// Elementwise `max(x, 0)²`.
    pub fn relu_squared(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| {
                let r = if v < F::zero() { F::zero() } else { v };
                r * r
            })
            .collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::ReluSquared(x), rg)
    }

    // ---- linear algebra -------------------------------------------------

    /// `x[..., k] · w[k, n]`; a rank-2 `x` is the plain matrix product.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        let k = *xs.last().expect("rank >= 1");
        if ws.len() != 2 || ws[0] != k {
            return Err(mismatch("matmul", &xs, ws));
        }
        let n = ws[1];
        let m = self.value(x).numel() / k;
        let mut c = vec![F::zero(); m * n];
        gemm_nn(m, k, n, self.value(x).data(), self.value(w).data(), &mut c);
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = n;
        let out = Tensor::new(&shape, c)?;
        let rg = self.needs(&[x, w]);
        Ok(self.push(out, Op::MatMul(x, w), rg))
    }

    /// Batched product over the leading axis: `a[G, m, k] · b[G, k, n]`,
    /// or `a[G, m, k] · b[G, n, k]ᵀ` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(mismatch("batch_matmul", &as_, &bs));
        }
        let (groups, m, k) = (as_[0], as_[1], as_[2]);
        let (bk, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if bk != k {
            return Err(mismatch("batch_matmul", &as_, &bs));
        }
        let mut c = vec![F::zero(); groups * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for g in 0..groups {
                let ag = &ad[g * m * k..(g + 1) * m * k];
                let bg = &bd[g * k * n..(g + 1) * k * n];
                let cg = &mut c[g * m * n..(g + 1) * m * n];
                if trans_b {
                    gemm_nt(m, k, n, ag, bg, cg);
                } else {
                    gemm_nn(m, k, n, ag, bg, cg);
                }
            }
        }
        let out = Tensor::new(&[groups, m, n], c)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            out,
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                groups,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    // ---- normalization --------------------------------------------------

    /// `x / sqrt(mean(x²) + eps) · gain` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: F) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] {
            return Err(mismatch("rms_norm", self.shape(x), self.shape(gain)));
        }
        if !(eps >= F::zero()) {
            return Err(invalid("rms_norm", "eps must be non-negative"));
        }
        let dn = F::from_usize(d).expect("dim fits");
        let g = self.value(gain).data();
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(xd.len());
        let mut inv_rms = Vec::with_capacity(xd.len() / d);
        for row in xd.chunks_exact(d) {
            let ms = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / dn;
            let r = (ms + eps).sqrt().recip();
            inv_rms.push(r);
            data.extend(row.iter().zip(g).map(|(&v, &gj)| v * r * gj));
        }
        let out = Tensor::new(self.shape(x), data)?;
        let rg = self.needs(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(n) {
            let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let start = data.len();
            let mut sum = F::zero();
            for &v in row {
                let e = (v - max).exp();
                sum = sum + e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v = *v / sum;
            }
        }
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    // ---- attention plumbing ---------------------------------------------

    /// Rotary embedding on `x[G, T, D]` (or `x[T, D]`): the pair
    /// `(2i, 2i+1)` of token `t` is rotated by `positions[t] · base^(-2i/D)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (t, d) = match shape.as_slice() {
            [t, d] | [_, t, d] => (*t, *d),
            _ => return Err(invalid("rope", format!("expected rank 2 or 3, got {shape:?}"))),
        };
        if d % 2 != 0 {
            return Err(invalid("rope", format!("head dimension {d} is odd")));
        }
        if positions.len() != t {
            return Err(invalid(
                "rope",
                format!("{} positions for {t} tokens", positions.len()),
            ));
        }
        let half = d / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for &p in positions {
            for i in 0..half {
                let theta = base.powf(-2.0 * i as f64 / d as f64);
                let angle = p as f64 * theta;
                cos.push(F::from_f64_lossy(angle.cos()));
                sin.push(F::from_f64_lossy(angle.sin()));
            }
        }
        let mut data = self.value(x).data().to_vec();
        rotate(&mut data, &cos, &sin, t, half, false);
        let out = Tensor::new(&shape, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Rope { x, cos, sin }, rg))
    }

    /// `[B, T, H·D] → [B·H, T, D]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(invalid("split_heads", format!("shape {s:?}, heads {heads}")));
        }
        let (b, t, d) = (s[0], s[1], s[2] / heads);
        let src = self.value(x).data();
        let mut data = vec![F::zero(); src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let from = (bi * t + ti) * heads * d + h * d;
                    let to = ((bi * heads + h) * t + ti) * d;
                    data[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let out = Tensor::new(&[b * heads, t, d], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SplitHeads { x, heads }, rg))
    }

    /// `[B·H, T, D] → [B, T, H·D]`
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(invalid("merge_heads", format!("shape {s:?}, heads {heads}")));
        }
        let (b, t, d) = (s[0] / heads, s[1], s[2]);
        let src = self.value(x).data();
        let mut data = vec![F::zero(); src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let to = (bi * t + ti) * heads * d + h * d;
                    let from = ((bi * heads + h) * t + ti) * d;
                    data[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let out = Tensor::new(&[b, t, heads * d], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::MergeHeads { x, heads }, rg))
    }

    /// `x[B, T, n] → x[:, index, :]`
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(invalid("select_token", format!("index {index} for shape {s:?}")));
        }
        let (t, n) = (s[1], s[2]);
        let data = self
            .value(x)
            .data()
            .chunks_exact(t * n)
            .flat_map(|seq| seq[index * n..(index + 1) * n].iter().copied())
            .collect();
        let out = Tensor::new(&[s[0], n], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SelectToken { x, index }, rg))
    }

    /// Concatenate `[B, T_i, n]` tensors along the token axis.
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| invalid("concat_tokens", "no inputs"))?).to_vec();
        if first.len() != 3 {
            return Err(invalid("concat_tokens", format!("expected rank 3, got {first:?}")));
        }
        let (b, n) = (first[0], first[2]);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != b || s[2] != n {
                return Err(mismatch("concat_tokens", &first, s));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(b * total * n);
        for bi in 0..b {
            for &p in parts {
                let tp = self.shape(p)[1];
                let src = self.value(p).data();
                data.extend_from_slice(&src[bi * tp * n..(bi + 1) * tp * n]);
            }
        }
        let out = Tensor::new(&[b, total, n], data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatTokens(parts.to_vec()), rg))
    }

    /// Concatenate tensors with identical leading axes along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| invalid("concat_last", "no inputs"))?).to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(mismatch("concat_last", &first, s));
            }
            width += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let w = self.value(p).last_dim();
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let out = Tensor::new(&shape, data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), rg))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(F::zero(), |a, &b| a + b);
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = F::from_usize(xv.numel()).expect("count fits");
        let s = xv.data().iter().fold(F::zero(), |a, &b| a + b) / n;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of `(a - b)²` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.sub(a, b)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean(sq))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. A second call without
    /// [`Tape::zero_grad`] is rejected rather than accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        if self.has_grads {
            return Err(TensorError::GradientsNotZeroed);
        }
        self.has_grads = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, dy: &[F]) {
        // Split borrows: node values are read while gradient slots are written.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = grad_slot(nodes, grads, v) {
                        add_into(g, dy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = grad_slot(nodes, grads, *a) {
                    add_into(g, dy);
                }
                if let Some(g) = grad_slot(nodes, grads, *b) {
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi = *gi - d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if rg(a) {
                    let bv = val(b).to_vec();
                    let g = grad_slot(nodes, grads, a).expect("requires grad");
                    for ((gi, &d), &bj) in g.iter_mut().zip(dy).zip(&bv) {
                        *gi = *gi + d * bj;
                    }
                }
                if rg(b) {
                    let av = val(a).to_vec();
                    let g = grad_slot(nodes, grads, b).expect("requires grad");
                    for ((gi, &d), &aj) in g.iter_mut().zip(dy).zip(&av) {
                        *gi = *gi + d * aj;
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi = *gi + d * c;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    add_into(g, dy);
                }
                if let Some(g) = grad_slot(nodes, grads, *bias) {
                    let n = g.len();
                    for row in dy.chunks_exact(n) {
                        add_into(g, row);
                    }
                }
            }
            Op::AddTokenBroadcast(x, y) => {
                let s = nodes[x.0].value.shape();
                let (t, n) = (s[1], s[2]);
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    add_into(g, dy);
                }
                if let Some(g) = grad_slot(nodes, grads, *y) {
                    for (seq, grow) in dy.chunks_exact(t * n).zip(g.chunks_exact_mut(n)) {
                        for tok in seq.chunks_exact(n) {
                            add_into(grow, tok);
                        }
                    }
                }
            }
            Op::MatMul(x, w) => {
                let (x, w) = (*x, *w);
                let ws = nodes[w.0].value.shape();
                let (k, n) = (ws[0], ws[1]);
                let m = nodes[x.0].value.numel() / k;
                if rg(x) {
                    let wv = val(w);
                    let g = accumulate(&mut grads[x.0], m * k);
                    gemm_nt(m, n, k, dy, wv, g);
                }
                if rg(w) {
                    let xv = val(x);
                    let g = accumulate(&mut grads[w.0], k * n);
                    gemm_tn(k, m, n, xv, dy, g);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                groups,
                m,
                k,
                n,
            } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let (groups, m, k, n) = (*groups, *m, *k, *n);
                if rg(a) {
                    let bv = val(b);
                    let g = accumulate(&mut grads[a.0], groups * m * k);
                    for gi in 0..groups {
                        let dyg = &dy[gi * m * n..(gi + 1) * m * n];
                        let bg = &bv[gi * k * n..(gi + 1) * k * n];
                        let ga = &mut g[gi * m * k..(gi + 1) * m * k];
                        if trans_b {
                            // b is [n, k]
                            gemm_nn(m, n, k, dyg, bg, ga);
                        } else {
                            gemm_nt(m, n, k, dyg, bg, ga);
                        }
                    }
                }
                if rg(b) {
                    let av = val(a);
                    let g = accumulate(&mut grads[b.0], groups * k * n);
                    for gi in 0..groups {
                        let dyg = &dy[gi * m * n..(gi + 1) * m * n];
                        let ag = &av[gi * m * k..(gi + 1) * m * k];
                        let gb = &mut g[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            // d(bᵀ) = aᵀ·dy  =>  db = dyᵀ·a, shape [n, k]
                            gemm_tn(n, m, k, dyg, ag, gb);
                        } else {
                            gemm_tn(k, m, n, ag, dyg, gb);
                        }
                    }
                }
            }
            Op::ReluSquared(x) => {
                let x = *x;
                let xv = val(x).to_vec();
                if let Some(g) = grad_slot(nodes, grads, x) {
                    let two = F::one() + F::one();
                    for ((gi, &d), &v) in g.iter_mut().zip(dy).zip(&xv) {
                        *gi = *gi + d * two * if v < F::zero() { F::zero() } else { v };
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let d = nodes[gain.0].value.numel();
                let dn = F::from_usize(d).expect("dim fits");
                let xv = val(x);
                let gv = val(gain);
                if rg(x) {
                    let g = accumulate(&mut grads[x.0], xv.len());
                    for (((grow, xrow), dyrow), &r) in g
                        .chunks_exact_mut(d)
                        .zip(xv.chunks_exact(d))
                        .zip(dy.chunks_exact(d))
                        .zip(inv_rms)
                    {
                        let mut dot = F::zero();
                        for ((&dyj, &gj), &xj) in dyrow.iter().zip(gv).zip(xrow) {
                            dot = dot + dyj * gj * xj;
                        }
                        let coef = r * r * r * dot / dn;
                        for (((gi, &dyj), &gj), &xj) in
                            grow.iter_mut().zip(dyrow).zip(gv).zip(xrow)
                        {
                            *gi = *gi + r * gj * dyj - xj * coef;
                        }
                    }
                }
                if rg(gain) {
                    let g = accumulate(&mut grads[gain.0], d);
                    for ((xrow, dyrow), &r) in
                        xv.chunks_exact(d).zip(dy.chunks_exact(d)).zip(inv_rms)
                    {
                        for ((gi, &dyj), &xj) in g.iter_mut().zip(dyrow).zip(xrow) {
                            *gi = *gi + dyj * xj * r;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let yv = nodes[i].value.data();
                let n = nodes[i].value.last_dim();
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    for ((grow, yrow), dyrow) in g
                        .chunks_exact_mut(n)
                        .zip(yv.chunks_exact(n))
                        .zip(dy.chunks_exact(n))
                    {
                        let dot = yrow
                            .iter()
                            .zip(dyrow)
                            .fold(F::zero(), |acc, (&y, &d)| acc + y * d);
                        for ((gi, &y), &d) in grow.iter_mut().zip(yrow).zip(dyrow) {
                            *gi = *gi + y * (d - dot);
                        }
                    }
                }
            }
            Op::Rope { x, cos, sin } => {
                let s = nodes[x.0].value.shape();
                let (t, d) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    let mut back = dy.to_vec();
                    rotate(&mut back, cos, sin, t, d / 2, true);
                    add_into(g, &back);
                }
            }
            Op::SplitHeads { x, heads } => {
                let s = nodes[x.0].value.shape();
                let (b, t, d) = (s[0], s[1], s[2] / heads);
                let heads = *heads;
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..heads {
                                let to = (bi * t + ti) * heads * d + h * d;
                                let from = ((bi * heads + h) * t + ti) * d;
                                add_into(&mut g[to..to + d], &dy[from..from + d]);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let s = nodes[x.0].value.shape();
                let heads = *heads;
                let (b, t, d) = (s[0] / heads, s[1], s[2]);
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..heads {
                                let from = (bi * t + ti) * heads * d + h * d;
                                let to = ((bi * heads + h) * t + ti) * d;
                                add_into(&mut g[to..to + d], &dy[from..from + d]);
                            }
                        }
                    }
                }
            }
            Op::SelectToken { x, index } => {
                let s = nodes[x.0].value.shape();
                let (t, n) = (s[1], s[2]);
                let index = *index;
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    for (seq, drow) in g.chunks_exact_mut(t * n).zip(dy.chunks_exact(n)) {
                        add_into(&mut seq[index * n..(index + 1) * n], drow);
                    }
                }
            }
            Op::ConcatTokens(parts) => {
                let s = nodes[i].value.shape();
                let (b, total, n) = (s[0], s[1], s[2]);
                let mut offset = 0;
                for &p in parts {
                    let tp = nodes[p.0].value.shape()[1];
                    if let Some(g) = grad_slot(nodes, grads, p) {
                        for bi in 0..b {
                            let from = (bi * total + offset) * n;
                            add_into(
                                &mut g[bi * tp * n..(bi + 1) * tp * n],
                                &dy[from..from + tp * n],
                            );
                        }
                    }
                    offset += tp;
                }
            }
            Op::ConcatLast(parts) => {
                let width = nodes[i].value.last_dim();
                let rows = nodes[i].value.numel() / width;
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    if let Some(g) = grad_slot(nodes, grads, p) {
                        for r in 0..rows {
                            let from = r * width + offset;
                            add_into(&mut g[r * w..(r + 1) * w], &dy[from..from + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => {
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    for gi in g.iter_mut() {
                        *gi = *gi + dy[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = F::from_usize(nodes[x.0].value.numel()).expect("count fits");
                if let Some(g) = grad_slot(nodes, grads, *x) {
                    let d = dy[0] / n;
                    for gi in g.iter_mut() {
                        *gi = *gi + d;
                    }
                }
            }
        }
    }
}

fn grad_slot<'a, F: Real>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'a mut [F]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(accumulate(&mut grads[v.0], nodes[v.0].value.numel()))
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Rotates consecutive pairs of every `t × (2·half)` block; `inverse` applies
/// the transpose rotation (used for the backward pass).
fn rotate<F: Real>(data: &mut [F], cos: &[F], sin: &[F], t: usize, half: usize, inverse: bool) {
    let d = 2 * half;
    for block in data.chunks_exact_mut(t * d) {
        for (ti, tok) in block.chunks_exact_mut(d).enumerate() {
            let cs = &cos[ti * half..(ti + 1) * half];
            let sn = &sin[ti * half..(ti + 1) * half];
            for ((pair, &c), &s) in tok.chunks_exact_mut(2).zip(cs).zip(sn) {
                let s = if inverse { -s } else { s };
                let (x0, x1) = (pair[0], pair[1]);
                pair[0] = x0 * c - x1 * s;
                pair[1] = x0 * s + x1 * c;
            }
        }
    }
}
