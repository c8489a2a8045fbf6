//! Reverse-mode automatic differentiation on a linear tape of rank-2 tensors.
//!
//! Operations execute eagerly during graph construction and record enough
//! information to replay the chain rule in reverse. Gradients only flow into
//! nodes created with [`Graph::param`]; everything reachable from a param
//! inherits `requires_grad`, so frozen parameters cost nothing on the
//! backward pass.

use crate::error::{BicoError, Result};
use crate::tensor::{erf, mm_nn, mm_nt, mm_tn, sc, Scalar, Tensor};

pub type ValueId = usize;

const LN_EPS: f64 = 1e-5;

/// How the right-hand operand of an elementwise op maps onto the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    /// Same shape.
    Same,
    /// rhs is [1, n]: one row broadcast down the rows of lhs.
    Row,
    /// rhs is [m, 1]: one column broadcast across the columns of lhs.
    Col,
    /// rhs is [1, 1].
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: ValueId, b: ValueId },
    /// out = a @ b^T with a: [m,k], b: [n,k].
    MatmulNT { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId, bc: Broadcast },
    Sub { a: ValueId, b: ValueId, bc: Broadcast },
    Mul { a: ValueId, b: ValueId, bc: Broadcast },
    /// out = mul * a + add (compile-time constants, no grad for them).
    Affine { a: ValueId, mul: f64 },
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId },
    Gelu { a: ValueId },
    Sigmoid { a: ValueId },
    Softmax { a: ValueId },
    Mse { a: ValueId, b: ValueId },
    Embedding { table: ValueId, ids: Vec<usize> },
    ConcatRows { parts: Vec<ValueId> },
    ConcatCols { parts: Vec<ValueId> },
    SliceRows { a: ValueId, start: usize, end: usize },
    SliceCols { a: ValueId, start: usize, end: usize },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a constant/input leaf. No gradient flows into it.
    pub fn leaf(&mut self, value: Tensor<S>) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a trainable leaf. `backward` will produce a gradient for it.
    pub fn param(&mut self, value: Tensor<S>) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires_grad: bool) -> ValueId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn mat(&self, op: &str, id: ValueId) -> Result<(usize, usize)> {
        let d = self.nodes[id].value.dims();
        if d.len() != 2 {
            return Err(BicoError::dim(op, format!("expected rank-2 tensor, got {:?}", d)));
        }
        Ok((d[0], d[1]))
    }

    // ── primitives ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.mat("matmul", a)?;
        let (kb, n) = self.mat("matmul", b)?;
        if ka != kb {
            return Err(BicoError::dim(
                "matmul",
                format!("[{},{}] @ [{},{}]", m, ka, kb, n),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        mm_nn(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            out.data_mut(),
            m,
            ka,
            n,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Matmul { a, b }, rg))
    }

    /// a @ b^T with a: [m,k], b: [n,k] -> [m,n].
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.mat("matmul_nt", a)?;
        let (n, kb) = self.mat("matmul_nt", b)?;
        if ka != kb {
            return Err(BicoError::dim(
                "matmul_nt",
                format!("[{},{}] @ [{},{}]^T", m, ka, n, kb),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        mm_nt(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            out.data_mut(),
            m,
            ka,
            n,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatmulNT { a, b }, rg))
    }

    fn broadcast_of(&self, op: &str, a: ValueId, b: ValueId) -> Result<Broadcast> {
        let (m, n) = self.mat(op, a)?;
        let (bm, bn) = self.mat(op, b)?;
        let bc = if (bm, bn) == (m, n) {
            Broadcast::Same
        } else if (bm, bn) == (1, 1) {
            Broadcast::Scalar
        } else if (bm, bn) == (1, n) {
            Broadcast::Row
        } else if (bm, bn) == (m, 1) {
            Broadcast::Col
        } else {
            return Err(BicoError::dim(
                op,
                format!("lhs [{},{}] incompatible with rhs [{},{}]", m, n, bm, bn),
            ));
        };
        Ok(bc)
    }

    fn elementwise(
        &mut self,
        op_name: &str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(S, S) -> S,
        make: impl Fn(ValueId, ValueId, Broadcast) -> Op,
    ) -> Result<ValueId> {
        let bc = self.broadcast_of(op_name, a, b)?;
        let (m, n) = self.mat(op_name, a)?;
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let mut out = Tensor::zeros(&[m, n]);
        {
            let o = out.data_mut();
            let ad = av.data();
            let bd = bv.data();
            match bc {
                Broadcast::Same => {
                    for i in 0..m * n {
                        o[i] = f(ad[i], bd[i]);
                    }
                }
                Broadcast::Scalar => {
                    let s = bd[0];
                    for i in 0..m * n {
                        o[i] = f(ad[i], s);
                    }
                }
                Broadcast::Row => {
                    for i in 0..m {
                        for j in 0..n {
                            o[i * n + j] = f(ad[i * n + j], bd[j]);
                        }
                    }
                }
                Broadcast::Col => {
                    for i in 0..m {
                        let s = bd[i];
                        for j in 0..n {
                            o[i * n + j] = f(ad[i * n + j], s);
                        }
                    }
                }
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, make(a, b, bc), rg))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise("add", a, b, |x, y| x + y, |a, b, bc| Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise("sub", a, b, |x, y| x - y, |a, b, bc| Op::Sub { a, b, bc })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise("mul", a, b, |x, y| x * y, |a, b, bc| Op::Mul { a, b, bc })
    }

    /// out = mul * a + add with f64 constants.
    pub fn affine(&mut self, a: ValueId, mul: f64, add: f64) -> ValueId {
        let (ms, ad) = (sc::<S>(mul), sc::<S>(add));
        let out = self.nodes[a].value.map(|v| ms * v + ad);
        let rg = self.needs(&[a]);
        self.push(out, Op::Affine { a, mul }, rg)
    }

    /// Per-row layer normalization over the last axis with affine params
    /// gamma, beta of shape [1, n]. Zero-variance rows normalize to zero
    /// (variance is floored by eps inside the square root).
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
        let (m, n) = self.mat("layer_norm", x)?;
        let (gm, gn) = self.mat("layer_norm", gamma)?;
        let (bm, bn) = self.mat("layer_norm", beta)?;
        if (gm, gn) != (1, n) || (bm, bn) != (1, n) {
            return Err(BicoError::dim(
                "layer_norm",
                format!("x [{},{}], gamma [{},{}], beta [{},{}]", m, n, gm, gn, bm, bn),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        {
            let xd = self.nodes[x].value.data();
            let gd = self.nodes[gamma].value.data();
            let bd = self.nodes[beta].value.data();
            let od = out.data_mut();
            let inv_n = sc::<S>(1.0 / n as f64);
            let eps = sc::<S>(LN_EPS);
            for i in 0..m {
                let row = &xd[i * n..(i + 1) * n];
                let mut mean = S::zero();
                for &v in row {
                    mean += v;
                }
                mean *= inv_n;
                let mut var = S::zero();
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_n;
                let rstd = (var + eps).sqrt().recip();
                for j in 0..n {
                    let xhat = (row[j] - mean) * rstd;
                    od[i * n + j] = gd[j] * xhat + bd[j];
                }
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta }, rg))
    }

    /// Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let half = sc::<S>(0.5);
        let inv_sqrt2 = sc::<S>(std::f64::consts::FRAC_1_SQRT_2);
        let out = self.nodes[a]
            .value
            .map(|v| half * v * (S::one() + erf(v * inv_sqrt2)));
        let rg = self.needs(&[a]);
        self.push(out, Op::Gelu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let out = self.nodes[a].value.map(|v| (S::one() + (-v).exp()).recip());
        let rg = self.needs(&[a]);
        self.push(out, Op::Sigmoid { a }, rg)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let (m, n) = self.mat("softmax", a)?;
        let mut out = Tensor::zeros(&[m, n]);
        {
            let ad = self.nodes[a].value.data();
            let od = out.data_mut();
            for i in 0..m {
                let row = &ad[i * n..(i + 1) * n];
                let mut mx = row[0];
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = S::zero();
                for j in 0..n {
                    let e = (row[j] - mx).exp();
                    od[i * n + j] = e;
                    sum += e;
                }
                let inv = sum.recip();
                for j in 0..n {
                    od[i * n + j] *= inv;
                }
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Softmax { a }, rg))
    }

    /// Mean squared error over all elements; returns a [1,1] scalar.
    pub fn mse(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, n) = self.mat("mse", a)?;
        let (bm, bn) = self.mat("mse", b)?;
        if (m, n) != (bm, bn) {
            return Err(BicoError::dim(
                "mse",
                format!("[{},{}] vs [{},{}]", m, n, bm, bn),
            ));
        }
        let ad = self.nodes[a].value.data();
        let bd = self.nodes[b].value.data();
        let mut acc = S::zero();
        for (&x, &y) in ad.iter().zip(bd) {
            let d = x - y;
            acc += d * d;
        }
        let out = Tensor::scalar(acc * sc::<S>(1.0 / (m * n) as f64));
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mse { a, b }, rg))
    }

    /// Row gather from an embedding table: out[r] = table[ids[r]].
    pub fn embedding(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        let (v, d) = self.mat("embedding", table)?;
        if ids.is_empty() {
            return Err(BicoError::dim("embedding", "empty id list".to_string()));
        }
        for &id in ids {
            if id >= v {
                return Err(BicoError::UnknownToken {
                    what: format!("id {} out of vocabulary range {}", id, v),
                });
            }
        }
        let td = self.nodes[table].value.data();
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenate along the token (row) axis.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(BicoError::dim("concat_rows", "no parts".to_string()));
        }
        let (_, n) = self.mat("concat_rows", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.mat("concat_rows", p)?;
            if pn != n {
                return Err(BicoError::dim(
                    "concat_rows",
                    format!("column mismatch: {} vs {}", pn, n),
                ));
            }
            total += pm;
        }
        let mut out = Tensor::zeros(&[total, n]);
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            out.data_mut()[off..off + pv.numel()].copy_from_slice(pv.data());
            off += pv.numel();
        }
        let rg = self.needs(parts);
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(BicoError::dim("concat_cols", "no parts".to_string()));
        }
        let (m, _) = self.mat("concat_cols", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.mat("concat_cols", p)?;
            if pm != m {
                return Err(BicoError::dim(
                    "concat_cols",
                    format!("row mismatch: {} vs {}", pm, m),
                ));
            }
            total += pn;
        }
        let mut out = Tensor::zeros(&[m, total]);
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            let pn = pv.dims()[1];
            for i in 0..m {
                out.data_mut()[i * total + off..i * total + off + pn]
                    .copy_from_slice(&pv.data()[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        let rg = self.needs(parts);
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let (m, n) = self.mat("slice_rows", a)?;
        if start >= end || end > m {
            return Err(BicoError::dim(
                "slice_rows",
                format!("range {}..{} out of {} rows", start, end, m),
            ));
        }
        let av = &self.nodes[a].value;
        let out = Tensor::new(
            vec![end - start, n],
            av.data()[start * n..end * n].to_vec(),
        )?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::SliceRows { a, start, end }, rg))
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let (m, n) = self.mat("slice_cols", a)?;
        if start >= end || end > n {
            return Err(BicoError::dim(
                "slice_cols",
                format!("range {}..{} out of {} cols", start, end, n),
            ));
        }
        let av = &self.nodes[a].value;
        let w = end - start;
        let mut out = Tensor::zeros(&[m, w]);
        for i in 0..m {
            out.data_mut()[i * w..(i + 1) * w]
                .copy_from_slice(&av.data()[i * n + start..i * n + end]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::SliceCols { a, start, end }, rg))
    }

    // ── composites ──────────────────────────────────────────────────

    /// x @ w + b with b broadcast as a row.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Multi-head scaled dot-product attention. q: [Nq,d], k/v: [Nk,d],
    /// d divisible by n_heads. Softmax over the key axis per head.
    pub fn attention(
        &mut self,
        q: ValueId,
        k: ValueId,
        v: ValueId,
        n_heads: usize,
    ) -> Result<ValueId> {
        let (_, d) = self.mat("attention", q)?;
        let (nk, dk) = self.mat("attention", k)?;
        let (nv, dv) = self.mat("attention", v)?;
        if dk != d || dv != d || nk != nv {
            return Err(BicoError::dim(
                "attention",
                format!("q[.,{}], k[{},{}], v[{},{}]", d, nk, dk, nv, dv),
            ));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(BicoError::dim(
                "attention",
                format!("d_model {} not divisible by {} heads", d, n_heads),
            ));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = self.slice_cols(q, s, e)?;
            let kh = self.slice_cols(k, s, e)?;
            let vh = self.slice_cols(v, s, e)?;
            let scores = self.matmul_nt(qh, kh)?;
            let scaled = self.affine(scores, scale, 0.0);
            let weights = self.softmax(scaled)?;
            outs.push(self.matmul(weights, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            self.concat_cols(&outs)
        }
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a [1,1] loss node. Returns one gradient slot per
    /// node; only nodes with `requires_grad` are populated.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<S>> {
        let ldims = self.nodes[loss].value.dims();
        if ldims != [1, 1] {
            return Err(BicoError::dim(
                "backward",
                format!("loss must be [1,1], got {:?}", ldims),
            ));
        }
        if !self.nodes[loss].value.all_finite() {
            return Err(BicoError::NonFiniteLoss {
                context: "loss value is not finite".to_string(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(S::one()));

        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc_into(&self, grads: &mut [Option<Tensor<S>>], id: ValueId, delta: Tensor<S>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reduce a full-shape gradient onto the broadcast rhs shape.
    fn reduce_bc(g: &Tensor<S>, bc: Broadcast) -> Tensor<S> {
        let (m, n) = (g.dims()[0], g.dims()[1]);
        let gd = g.data();
        match bc {
            Broadcast::Same => g.clone(),
            Broadcast::Scalar => {
                let mut acc = S::zero();
                for &v in gd {
                    acc += v;
                }
                Tensor::scalar(acc)
            }
            Broadcast::Row => {
                let mut out = Tensor::zeros(&[1, n]);
                for i in 0..m {
                    for j in 0..n {
                        out.data_mut()[j] += gd[i * n + j];
                    }
                }
                out
            }
            Broadcast::Col => {
                let mut out = Tensor::zeros(&[m, 1]);
                for i in 0..m {
                    let mut acc = S::zero();
                    for j in 0..n {
                        acc += gd[i * n + j];
                    }
                    out.data_mut()[i] = acc;
                }
                out
            }
        }
    }

    /// Expand-multiply: full-shape tensor `like` dims, value = g ⊙ broadcast(b).
    fn mul_bc(g: &Tensor<S>, b: &Tensor<S>, bc: Broadcast) -> Tensor<S> {
        let (m, n) = (g.dims()[0], g.dims()[1]);
        let gd = g.data();
        let bd = b.data();
        let mut out = Tensor::zeros(&[m, n]);
        let od = out.data_mut();
        match bc {
            Broadcast::Same => {
                for i in 0..m * n {
                    od[i] = gd[i] * bd[i];
                }
            }
            Broadcast::Scalar => {
                for i in 0..m * n {
                    od[i] = gd[i] * bd[0];
                }
            }
            Broadcast::Row => {
                for i in 0..m {
                    for j in 0..n {
                        od[i * n + j] = gd[i * n + j] * bd[j];
                    }
                }
            }
            Broadcast::Col => {
                for i in 0..m {
                    for j in 0..n {
                        od[i * n + j] = gd[i * n + j] * bd[i];
                    }
                }
            }
        }
        out
    }

    fn backprop_node(&self, id: ValueId, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let (m, k) = (av.dims()[0], av.dims()[1]);
                let n = bv.dims()[1];
                if self.nodes[a].requires_grad {
                    let mut da = Tensor::zeros(&[m, k]);
                    mm_nt(g.data(), bv.data(), da.data_mut(), m, n, k);
                    self.acc_into(grads, a, da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = Tensor::zeros(&[k, n]);
                    mm_tn(av.data(), g.data(), db.data_mut(), m, k, n);
                    self.acc_into(grads, b, db);
                }
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let (m, k) = (av.dims()[0], av.dims()[1]);
                let n = bv.dims()[0];
                if self.nodes[a].requires_grad {
                    // da = g @ b, g: [m,n], b: [n,k]
                    let mut da = Tensor::zeros(&[m, k]);
                    mm_nn(g.data(), bv.data(), da.data_mut(), m, n, k);
                    self.acc_into(grads, a, da);
                }
                if self.nodes[b].requires_grad {
                    // db = g^T @ a, g: [m,n], a: [m,k] -> [n,k]
                    let mut db = Tensor::zeros(&[n, k]);
                    mm_tn(g.data(), av.data(), db.data_mut(), m, n, k);
                    self.acc_into(grads, b, db);
                }
            }
            Op::Add { a, b, bc } => {
                let (a, b, bc) = (*a, *b, *bc);
                if self.nodes[a].requires_grad {
                    self.acc_into(grads, a, g.clone());
                }
                if self.nodes[b].requires_grad {
                    self.acc_into(grads, b, Self::reduce_bc(g, bc));
                }
            }
            Op::Sub { a, b, bc } => {
                let (a, b, bc) = (*a, *b, *bc);
                if self.nodes[a].requires_grad {
                    self.acc_into(grads, a, g.clone());
                }
                if self.nodes[b].requires_grad {
                    let mut r = Self::reduce_bc(g, bc);
                    for v in r.data_mut() {
                        *v = -*v;
                    }
                    self.acc_into(grads, b, r);
                }
            }
            Op::Mul { a, b, bc } => {
                let (a, b, bc) = (*a, *b, *bc);
                if self.nodes[a].requires_grad {
                    let da = Self::mul_bc(g, &self.nodes[b].value, bc);
                    self.acc_into(grads, a, da);
                }
                if self.nodes[b].requires_grad {
                    // db = reduce(g ⊙ a)
                    let full = {
                        let av = &self.nodes[a].value;
                        let mut t = g.clone();
                        for (x, &y) in t.data_mut().iter_mut().zip(av.data()) {
                            *x *= y;
                        }
                        t
                    };
                    self.acc_into(grads, b, Self::reduce_bc(&full, bc));
                }
            }
            Op::Affine { a, mul } => {
                let (a, mul) = (*a, *mul);
                if self.nodes[a].requires_grad {
                    let ms = sc::<S>(mul);
                    self.acc_into(grads, a, g.map(|v| v * ms));
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xv = &self.nodes[x].value;
                let gv = &self.nodes[gamma].value;
                let (m, n) = (xv.dims()[0], xv.dims()[1]);
                let inv_n = sc::<S>(1.0 / n as f64);
                let eps = sc::<S>(LN_EPS);
                let xd = xv.data();
                let gd = gv.data();
                let godat = g.data();
                let mut dx = Tensor::zeros(&[m, n]);
                let mut dgamma = Tensor::zeros(&[1, n]);
                let mut dbeta = Tensor::zeros(&[1, n]);
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let grow = &godat[i * n..(i + 1) * n];
                    let mut mean = S::zero();
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_n;
                    let mut var = S::zero();
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_n;
                    let rstd = (var + eps).sqrt().recip();
                    // xhat_j = (x_j - mean) * rstd; h_j = grow_j * gamma_j
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..n {
                        let xhat = (row[j] - mean) * rstd;
                        let h = grow[j] * gd[j];
                        m1 += h;
                        m2 += h * xhat;
                        dgamma.data_mut()[j] += grow[j] * xhat;
                        dbeta.data_mut()[j] += grow[j];
                    }
                    m1 *= inv_n;
                    m2 *= inv_n;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * rstd;
                        let h = grow[j] * gd[j];
                        dx.data_mut()[i * n + j] = (h - m1 - xhat * m2) * rstd;
                    }
                }
                if self.nodes[x].requires_grad {
                    self.acc_into(grads, x, dx);
                }
                if self.nodes[gamma].requires_grad {
                    self.acc_into(grads, gamma, dgamma);
                }
                if self.nodes[beta].requires_grad {
                    self.acc_into(grads, beta, dbeta);
                }
            }
            Op::Gelu { a } => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let av = &self.nodes[a].value;
                    let half = sc::<S>(0.5);
                    let inv_sqrt2 = sc::<S>(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = sc::<S>(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                    let mut da = g.clone();
                    for (gv, &x) in da.data_mut().iter_mut().zip(av.data()) {
                        let phi_cdf = half * (S::one() + erf(x * inv_sqrt2));
                        let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                        *gv *= phi_cdf + x * pdf;
                    }
                    self.acc_into(grads, a, da);
                }
            }
            Op::Sigmoid { a } => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let sv = &self.nodes[id].value;
                    let mut da = g.clone();
                    for (gv, &s) in da.data_mut().iter_mut().zip(sv.data()) {
                        *gv *= s * (S::one() - s);
                    }
                    self.acc_into(grads, a, da);
                }
            }
            Op::Softmax { a } => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let sv = &self.nodes[id].value;
                    let (m, n) = (sv.dims()[0], sv.dims()[1]);
                    let sd = sv.data();
                    let gd = g.data();
                    let mut da = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        let srow = &sd[i * n..(i + 1) * n];
                        let grow = &gd[i * n..(i + 1) * n];
                        let mut dot = S::zero();
                        for j in 0..n {
                            dot += srow[j] * grow[j];
                        }
                        for j in 0..n {
                            da.data_mut()[i * n + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    self.acc_into(grads, a, da);
                }
            }
            Op::Mse { a, b } => {
                let (a, b) = (*a, *b);
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let count = av.numel();
                let scale = g.scalar_value() * sc::<S>(2.0 / count as f64);
                if self.nodes[a].requires_grad {
                    let mut da = Tensor::zeros(av.dims());
                    for ((o, &x), &y) in da.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *o = scale * (x - y);
                    }
                    self.acc_into(grads, a, da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = Tensor::zeros(bv.dims());
                    for ((o, &x), &y) in db.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *o = scale * (y - x);
                    }
                    self.acc_into(grads, b, db);
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if self.nodes[table].requires_grad {
                    let tv = &self.nodes[table].value;
                    let d = tv.dims()[1];
                    let mut dt = Tensor::zeros(tv.dims());
                    for (r, &tok) in ids.iter().enumerate() {
                        let grow = &g.data()[r * d..(r + 1) * d];
                        let trow = &mut dt.data_mut()[tok * d..(tok + 1) * d];
                        for (o, &gv) in trow.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                    self.acc_into(grads, table, dt);
                }
            }
            Op::ConcatRows { parts } => {
                let n = g.dims()[1];
                let mut off = 0;
                for &p in parts {
                    let pm = self.nodes[p].value.dims()[0];
                    if self.nodes[p].requires_grad {
                        let piece = Tensor::new(
                            vec![pm, n],
                            g.data()[off * n..(off + pm) * n].to_vec(),
                        )
                        .unwrap();
                        self.acc_into(grads, p, piece);
                    }
                    off += pm;
                }
            }
            Op::ConcatCols { parts } => {
                let (m, total) = (g.dims()[0], g.dims()[1]);
                let mut off = 0;
                for &p in parts {
                    let pn = self.nodes[p].value.dims()[1];
                    if self.nodes[p].requires_grad {
                        let mut piece = Tensor::zeros(&[m, pn]);
                        for i in 0..m {
                            piece.data_mut()[i * pn..(i + 1) * pn].copy_from_slice(
                                &g.data()[i * total + off..i * total + off + pn],
                            );
                        }
                        self.acc_into(grads, p, piece);
                    }
                    off += pn;
                }
            }
            Op::SliceRows { a, start, end } => {
                let (a, start, end) = (*a, *start, *end);
                if self.nodes[a].requires_grad {
                    let av = &self.nodes[a].value;
                    let (m, n) = (av.dims()[0], av.dims()[1]);
                    let mut da = Tensor::zeros(&[m, n]);
                    da.data_mut()[start * n..end * n].copy_from_slice(g.data());
                    self.acc_into(grads, a, da);
                }
            }
            Op::SliceCols { a, start, end } => {
                let (a, start, end) = (*a, *start, *end);
                if self.nodes[a].requires_grad {
                    let av = &self.nodes[a].value;
                    let (m, n) = (av.dims()[0], av.dims()[1]);
                    let w = end - start;
                    let mut da = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        da.data_mut()[i * n + start..i * n + end]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    self.acc_into(grads, a, da);
                }
            }
        }
    }
}

pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent high-precision erf oracle: Abramowitz & Stegun 7.1.5
    /// series for small |x|, continued-fraction complement for large |x|.
    /// Used only to cross-check the implementation's erf-based ops.
    fn erf_oracle(x: f64) -> f64 {
        if x < 0.0 {
            return -erf_oracle(-x);
        }
        if x < 3.0 {
            // erf(x) = 2/sqrt(pi) * sum_{n>=0} (-1)^n x^(2n+1) / (n! (2n+1))
            let mut term = x;
            let mut sum = x;
            let x2 = x * x;
            for n in 1..200 {
                term *= -x2 / n as f64;
                let add = term / (2 * n + 1) as f64;
                sum += add;
                if add.abs() < 1e-18 {
                    break;
                }
            }
            sum * 2.0 / std::f64::consts::PI.sqrt()
        } else {
            1.0 - erfc_cf(x)
        }
    }

    fn erfc_cf(x: f64) -> f64 {
        // Lentz continued fraction for erfc, x >= 3
        let mut f = x;
        let mut c = f;
        let mut d = 0.0f64;
        for i in 1..300 {
            let a = i as f64 / 2.0;
            d = x + a * d;
            if d == 0.0 {
                d = 1e-300;
            }
            c = x + a / c;
            if c == 0.0 {
                c = 1e-300;
            }
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        (-x * x).exp() / std::f64::consts::PI.sqrt() / f
    }

    #[test]
    fn gelu_fixed_points() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3], vec![0.0, 1.0, -2.0]).unwrap());
        let y = g.gelu(x);
        let out = g.value(y).data();
        assert_eq!(out[0], 0.0);
        // independent oracle for gelu(1)
        let want = 0.5 * (1.0 + erf_oracle(1.0 / 2f64.sqrt()));
        assert!((out[1] - want).abs() < 1e-12);
        assert!((out[1] - 0.841345).abs() < 1e-5);
        let want2 = 0.5 * -2.0 * (1.0 + erf_oracle(-2.0 / 2f64.sqrt()));
        assert!((out[2] - want2).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 4], 3.7));
        let gamma = g.leaf(Tensor::full(&[1, 4], 1.0));
        let beta = g.leaf(Tensor::zeros(&[1, 4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn add_zero_and_matmul_identity_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::<f32>::randn(&[5, 7], 1.3, &mut rng);
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(t.clone());
        let z = g.leaf(Tensor::zeros(&[5, 7]));
        let sum = g.add(x, z).unwrap();
        assert!(g.value(sum).bit_eq(&t));

        let eye = Tensor::from_fn(&[7, 7], |i| if i / 7 == i % 7 { 1.0f32 } else { 0.0 });
        let i = g.leaf(eye);
        let prod = g.matmul(x, i).unwrap();
        assert!(g.value(prod).bit_eq(&t));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let a = Tensor::<f32>::randn(&[4, 6], 1.0, &mut rng);
            let b = Tensor::<f32>::randn(&[6, 3], 1.0, &mut rng);
            let mut g: Graph<f32> = Graph::new();
            let ai = g.leaf(a);
            let bi = g.leaf(b);
            let c = g.matmul(ai, bi).unwrap();
            let s = g.softmax(c).unwrap();
            g.value(s).clone()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn dim_mismatch_names_op() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    // Central-difference gradient check of every primitive on random small
    // tensors at f64 precision.
    fn fd_check<FB>(build: FB, inputs: Vec<Tensor<f64>>, tol: f64)
    where
        FB: Fn(&mut Graph<f64>, &[ValueId]) -> ValueId,
    {
        let eval = |vals: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
            let mut g: Graph<f64> = Graph::new();
            let ids: Vec<ValueId> = vals.iter().map(|t| g.param(t.clone())).collect();
            let loss = build(&mut g, &ids);
            let grads = g.backward(loss).unwrap();
            let gs = ids
                .iter()
                .map(|&i| {
                    grads
                        .get(i)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.value(i).dims()))
                })
                .collect();
            (g.value(loss).scalar_value(), gs)
        };
        let (_, analytic) = eval(&inputs);
        let eps = 3e-5;
        for (pi, t) in inputs.iter().enumerate() {
            for ci in 0..t.numel() {
                let mut plus = inputs.clone();
                plus[pi].data_mut()[ci] += eps;
                let (lp, _) = eval(&plus);
                let mut minus = inputs.clone();
                minus[pi].data_mut()[ci] -= eps;
                let (lm, _) = eval(&minus);
                let numeric = (lp - lm) / (2.0 * eps);
                let a = analytic[pi].data()[ci];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    rel < tol,
                    "param {} coord {}: analytic {} vs numeric {} (rel {})",
                    pi,
                    ci,
                    a,
                    numeric,
                    rel
                );
            }
        }
    }

    fn rt(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(dims, 0.8, &mut rng)
    }

    #[test]
    fn grad_matmul() {
        fd_check(
            |g, ids| {
                let c = g.matmul(ids[0], ids[1]).unwrap();
                let t = g.leaf(Tensor::zeros(&[3, 2]));
                g.mse(c, t).unwrap()
            },
            vec![rt(&[3, 4], 1), rt(&[4, 2], 2)],
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_nt() {
        fd_check(
            |g, ids| {
                let c = g.matmul_nt(ids[0], ids[1]).unwrap();
                let t = g.leaf(rt(&[3, 5], 99));
                g.mse(c, t).unwrap()
            },
            vec![rt(&[3, 4], 3), rt(&[5, 4], 4)],
            1e-6,
        );
    }

    #[test]
    fn grad_elementwise_broadcasts() {
        for (dims_b, seed) in [
            (vec![4, 3], 10u64),
            (vec![1, 3], 11),
            (vec![4, 1], 12),
            (vec![1, 1], 13),
        ] {
            let db = dims_b.clone();
            fd_check(
                move |g, ids| {
                    let s = g.add(ids[0], ids[1]).unwrap();
                    let p = g.mul(s, ids[2]).unwrap();
                    let q = g.sub(p, ids[1]).unwrap();
                    let t = g.leaf(Tensor::zeros(&[4, 3]));
                    g.mse(q, t).unwrap()
                },
                vec![rt(&[4, 3], seed), rt(&db, seed + 50), rt(&db, seed + 100)],
                1e-6,
            );
        }
    }

    #[test]
    fn grad_layer_norm() {
        fd_check(
            |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2]).unwrap();
                let t = g.leaf(rt(&[3, 6], 98));
                g.mse(y, t).unwrap()
            },
            vec![rt(&[3, 6], 20), rt(&[1, 6], 21), rt(&[1, 6], 22)],
            1e-6,
        );
    }

    #[test]
    fn grad_gelu_sigmoid_softmax() {
        fd_check(
            |g, ids| {
                let a = g.gelu(ids[0]);
                let b = g.sigmoid(a);
                let c = g.softmax(b).unwrap();
                let t = g.leaf(rt(&[2, 5], 97));
                g.mse(c, t).unwrap()
            },
            vec![rt(&[2, 5], 30)],
            1e-6,
        );
    }

    #[test]
    fn grad_affine_and_mse_pair() {
        fd_check(
            |g, ids| {
                let a = g.affine(ids[0], -1.7, 0.4);
                g.mse(a, ids[1]).unwrap()
            },
            vec![rt(&[3, 3], 40), rt(&[3, 3], 41)],
            1e-6,
        );
    }

    #[test]
    fn grad_embedding() {
        fd_check(
            |g, ids| {
                let rows = g.embedding(ids[0], &[2, 0, 2, 1]).unwrap();
                let t = g.leaf(rt(&[4, 3], 96));
                g.mse(rows, t).unwrap()
            },
            vec![rt(&[4, 3], 50)],
            1e-6,
        );
    }

    #[test]
    fn grad_concat_slice() {
        fd_check(
            |g, ids| {
                let cat = g.concat_rows(&[ids[0], ids[1]]).unwrap();
                let sl = g.slice_rows(cat, 1, 4).unwrap();
                let catc = g.concat_cols(&[sl, ids[2]]).unwrap();
                let slc = g.slice_cols(catc, 1, 5).unwrap();
                let t = g.leaf(rt(&[3, 4], 95));
                g.mse(slc, t).unwrap()
            },
            vec![rt(&[2, 4], 60), rt(&[3, 4], 61), rt(&[3, 2], 62)],
            1e-6,
        );
    }

    #[test]
    fn grad_attention() {
        fd_check(
            |g, ids| {
                let a = g.attention(ids[0], ids[1], ids[2], 2).unwrap();
                let t = g.leaf(rt(&[3, 4], 94));
                g.mse(a, t).unwrap()
            },
            vec![rt(&[3, 4], 70), rt(&[5, 4], 71), rt(&[5, 4], 72)],
            1e-6,
        );
    }

    #[test]
    fn grad_skips_frozen_leaves() {
        let mut g: Graph<f64> = Graph::new();
        let frozen = g.leaf(rt(&[2, 2], 80));
        let live = g.param(rt(&[2, 2], 81));
        let prod = g.matmul(frozen, live).unwrap();
        let t = g.leaf(Tensor::zeros(&[2, 2]));
        let loss = g.mse(prod, t).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(live).is_some());
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut g: Graph<f32> = Graph::new();
        let table = g.leaf(Tensor::zeros(&[4, 3]));
        assert!(g.embedding(table, &[5]).is_err());
    }
}
