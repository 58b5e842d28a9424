use super::kernels::{self, dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a `[batch, seq, heads * head_dim]` activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnGeom {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Embedding { table: Var, ids: Vec<u32> },
    Rope { x: Var, geom: AttnGeom, base: f64 },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<f64> },
    WeightedSeqSum { x: Var, weights: Vec<f64>, seq: usize },
    L2Normalize { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Dynamic computation graph recorded during one forward pass.
///
/// Nodes are appended in execution order, so insertion order is a valid
/// topological order; [`Graph::backward`] walks it in reverse once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if the node requires one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(
            self.nodes[v.0].value.shape().to_vec(),
            g.clone(),
        ))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, .. } => vec![*x, *w],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Silu(x) | Op::Sum(x) | Op::Mean(x) => vec![*x],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Softmax { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::Rope { x, .. } => vec![*x],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::WeightedSeqSum { x, .. } => vec![*x],
            Op::L2Normalize { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::SliceRows { x, .. } => vec![*x],
            Op::ConcatRows(xs) => xs.clone(),
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
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

    /// `a[m,k] · b[k,n]`
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
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n })
    }

    /// `x[..., k] · w[n, k]ᵀ`, the usual dense-layer product with leading batch axes.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[1] {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let k = sw[1];
        let n = sw[0];
        let m = self.nodes[x.0].value.numel() / k;
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm_nt(self.data(x), self.data(w), &mut out, m, k, n);
        self.push("linear", shape, out, Op::Linear { x, w, m, k, n })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        self.push("sub", self.shape(a).to_vec(), out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, factor))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * kernels::sigmoid(v)).collect();
        self.push("silu", self.shape(x).to_vec(), out, Op::Silu(x))
    }

    /// RMS-normalizes the last axis and multiplies by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.nodes[x.0].value.last_dim();
        if self.shape(gain) != [d] {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let rows = xs.len() / d;
        let mut out = vec![0.0; xs.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let ms = dot(row, row) / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (j, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
                *o = row[j] * inv * g[j];
            }
        }
        self.push("rms_norm", self.shape(x).to_vec(), out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.data(x);
        let mut out = vec![0.0; xs.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (t, b) in buf.iter_mut().enumerate() {
                    *b = xs[(o * len + t) * inner + i];
                }
                kernels::softmax_inplace(&mut buf);
                for (t, b) in buf.iter().enumerate() {
                    out[(o * len + t) * inner + i] = *b;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax { x, outer, len, inner })
    }

    /// Gathers rows of `table[vocab, d]`; the result has shape `out_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], out_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "embedding",
                lhs: ts.to_vec(),
                rhs: out_shape.to_vec(),
            });
        }
        let (vocab, d) = (ts[0], ts[1]);
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: id as u32,
                    vocab_size: vocab,
                });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        self.push("embedding", shape, out, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Rotary position embedding over each head (half-split pairing), position = sequence index.
    pub fn rope(&mut self, x: Var, geom: AttnGeom, base: f64) -> Result<Var> {
        self.check_geom("rope", x, geom)?;
        if !geom.head_dim.is_multiple_of(2) {
            return Err(Error::Config("rotary embedding needs an even head dimension".into()));
        }
        let mut out = self.data(x).to_vec();
        rope_apply(&mut out, geom, base, false);
        self.push("rope", self.shape(x).to_vec(), out, Op::Rope { x, geom, base })
    }

    fn check_geom(&self, op: &'static str, x: Var, geom: AttnGeom) -> Result<()> {
        let expected = [geom.batch, geom.seq, geom.width()];
        if self.shape(x) != expected {
            return Err(Error::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: expected.to_vec(),
            });
        }
        Ok(())
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    /// Position `i` only reads keys `0..=i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, geom: AttnGeom) -> Result<Var> {
        for t in [q, k, v] {
            self.check_geom("causal_attention", t, geom)?;
        }
        let AttnGeom { batch, seq, heads, head_dim } = geom;
        let width = geom.width();
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; batch * seq * width];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * head_dim;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * width + off..][..head_dim];
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..i + 1];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kd[(b * seq + j) * width + off..][..head_dim];
                        *pj = dot(qi, kj) * scale;
                    }
                    kernels::softmax_inplace(p);
                    let oi = &mut out[(b * seq + i) * width + off..][..head_dim];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(b * seq + j) * width + off..][..head_dim];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        self.push(
            "causal_attention",
            vec![batch, seq, width],
            out,
            Op::Attention { q, k, v, geom, probs },
        )
    }

    /// `out[b] = Σ_s weights[b, s] · x[b, s]` for `x[batch, seq, d]`.
    pub fn weighted_seq_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || weights.len() != sx[0] * sx[1] {
            return Err(Error::Shape {
                op: "weighted_seq_sum",
                lhs: sx,
                rhs: vec![weights.len()],
            });
        }
        let (batch, seq, d) = (sx[0], sx[1], sx[2]);
        let xs = self.data(x);
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let o = &mut out[b * d..(b + 1) * d];
            for s in 0..seq {
                let w = weights[b * seq + s];
                if w == 0.0 {
                    continue;
                }
                for (ov, &xv) in o.iter_mut().zip(&xs[(b * seq + s) * d..][..d]) {
                    *ov += w * xv;
                }
            }
        }
        self.push(
            "weighted_seq_sum",
            vec![batch, d],
            out,
            Op::WeightedSeqSum { x, weights: weights.to_vec(), seq },
        )
    }

    /// Scales each row (last axis) to unit L2 norm; a zero row is an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let d = self.nodes[x.0].value.last_dim();
        let xs = self.data(x);
        let rows = xs.len() / d;
        let mut out = vec![0.0; xs.len()];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let norm = dot(row, row).sqrt();
            if norm == 0.0 || !norm.is_normal() {
                return Err(Error::ZeroNorm);
            }
            norms.push(norm);
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        self.push("l2_normalize", self.shape(x).to_vec(), out, Op::L2Normalize { x, norms })
    }

    /// Mean over rows of `logsumexp(logits[i]) − logits[i, targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() || targets.iter().any(|&t| t >= sl[1]) {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: sl,
                rhs: vec![targets.len()],
            });
        }
        let (rows, c) = (sl[0], sl[1]);
        let ld = self.data(logits);
        let mut probs = ld.to_vec();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &ld[r * c..(r + 1) * c];
            total += kernels::log_sum_exp(row) - row[t];
            kernels::softmax_inplace(&mut probs[r * c..(r + 1) * c]);
        }
        let loss = total / rows as f64;
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.numel().max(1) as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.push("mean", vec![1], vec![s], Op::Mean(x))
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || start + len > sx[0] {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: sx,
                rhs: vec![start, len],
            });
        }
        let stride: usize = sx[1..].iter().product();
        let out = self.data(x)[start * stride..(start + len) * stride].to_vec();
        let mut shape = sx;
        shape[0] = len;
        self.push("slice_rows", shape, out, Op::SliceRows { x, start })
    }

    /// Concatenates along the first axis; trailing axes must agree.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::Shape {
            op: "concat_rows",
            lhs: vec![],
            rhs: vec![],
        })?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            out.extend_from_slice(self.data(x));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push("concat_rows", shape, out, Op::ConcatRows(xs.to_vec()))
    }

    /// Populates gradients for every node that requires one and is reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, target: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let n = self.nodes[target.0].value.numel();
        let slot = self.grads[target.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot, &self.nodes);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Ops borrow node data by index inside the closures to avoid cloning values.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                self.accum(a, |ga, nodes| gemm_nt(g, nodes[b.0].value.data(), ga, m, n, k));
                self.accum(b, |gb, nodes| gemm_tn(nodes[a.0].value.data(), g, gb, m, k, n));
            }
            Op::Linear { x, w, m, k, n } => {
                let (x, w, m, k, n) = (*x, *w, *m, *k, *n);
                self.accum(x, |gx, nodes| gemm_nn(g, nodes[w.0].value.data(), gx, m, n, k));
                self.accum(w, |gw, nodes| gemm_tn(g, nodes[x.0].value.data(), gw, m, n, k));
            }
            Op::Add(a, b) => {
                self.accum(*a, |ga, _| add_into(ga, g));
                self.accum(*b, |gb, _| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accum(*a, |ga, _| add_into(ga, g));
                self.accum(*b, |gb, _| {
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, |ga, nodes| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(nodes[b.0].value.data()) {
                        *o += gv * bv;
                    }
                });
                self.accum(b, |gb, nodes| {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.accum(*x, |gx, _| {
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += gv * f;
                    }
                });
            }
            Op::Silu(x) => {
                let x = *x;
                self.accum(x, |gx, nodes| {
                    for ((o, gv), &xv) in gx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                        let s = kernels::sigmoid(xv);
                        *o += gv * s * (1.0 + xv * (1.0 - s));
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let d = self.nodes[gain.0].value.numel();
                self.accum(x, |gx, nodes| {
                    let xs = nodes[x.0].value.data();
                    let gs = nodes[gain.0].value.data();
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xs[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        // dx = inv · (dy⊙γ − x̂ · mean(dy⊙γ⊙x̂))
                        let mut m = 0.0;
                        for j in 0..d {
                            m += grow[j] * gs[j] * row[j] * inv;
                        }
                        m /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv * (grow[j] * gs[j] - row[j] * inv * m);
                        }
                    }
                });
                self.accum(gain, |gg, nodes| {
                    let xs = nodes[x.0].value.data();
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xs[r * d + j] * inv;
                        }
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let y = self.nodes[i].value.data().to_vec();
                self.accum(*x, |gx, _| {
                    for o in 0..outer {
                        for c in 0..inner {
                            let idx = |t: usize| (o * len + t) * inner + c;
                            let s: f64 = (0..len).map(|t| g[idx(t)] * y[idx(t)]).sum();
                            for t in 0..len {
                                gx[idx(t)] += y[idx(t)] * (g[idx(t)] - s);
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].value.shape()[1];
                self.accum(*table, |gt, _| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id as usize * d..(id as usize + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Rope { x, geom, base } => {
                let mut back = g.to_vec();
                rope_apply(&mut back, *geom, *base, true);
                self.accum(*x, |gx, _| add_into(gx, &back));
            }
            Op::Attention { q, k, v, geom, probs } => {
                self.attention_backward(*q, *k, *v, *geom, probs, g);
            }
            Op::WeightedSeqSum { x, weights, seq } => {
                let seq = *seq;
                let d = self.nodes[i].value.last_dim();
                self.accum(*x, |gx, _| {
                    for (bs, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let b = bs / seq;
                        for (o, gv) in gx[bs * d..(bs + 1) * d].iter_mut().zip(&g[b * d..(b + 1) * d]) {
                            *o += w * gv;
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = self.nodes[i].value.last_dim();
                self.accum(*x, |gx, _| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let proj = dot(yr, gr);
                        for j in 0..d {
                            gx[r * d + j] += (gr[j] - yr[j] * proj) / norm;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let rows = targets.len();
                let c = probs.len() / rows;
                let scale = g[0] / rows as f64;
                self.accum(*logits, |gl, _| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accum(*x, |gx, _| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(x) => {
                self.accum(*x, |gx, _| {
                    let n = gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += g[0] / n);
                });
            }
            Op::SliceRows { x, start } => {
                let start = *start;
                let stride: usize = self.nodes[i].value.shape()[1..].iter().product();
                self.accum(*x, |gx, _| add_into(&mut gx[start * stride..start * stride + g.len()], g));
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x.0].value.numel();
                    self.accum(x, |gx, _| add_into(gx, &g[off..off + n]));
                    off += n;
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn attention_backward(&mut self, q: Var, k: Var, v: Var, geom: AttnGeom, probs: &[f64], g: &[f64]) {
        let AttnGeom { batch, seq, heads, head_dim } = geom;
        let width = geom.width();
        let scale = 1.0 / (head_dim as f64).sqrt();
        let n = batch * seq * width;
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut gq = vec![0.0; n];
        let mut gk = vec![0.0; n];
        let mut gv = vec![0.0; n];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * head_dim;
                let at = |t: usize| (b * seq + t) * width + off;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..i + 1];
                    let gi = &g[at(i)..][..head_dim];
                    let mut s = 0.0;
                    for j in 0..=i {
                        dp[j] = dot(gi, &vd[at(j)..][..head_dim]);
                        s += p[j] * dp[j];
                        for (o, &gg) in gv[at(j)..][..head_dim].iter_mut().zip(gi) {
                            *o += p[j] * gg;
                        }
                    }
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..head_dim {
                            gq[at(i) + c] += ds * kd[at(j) + c];
                            gk[at(j) + c] += ds * qd[at(i) + c];
                        }
                    }
                }
            }
        }
        self.accum(q, |o, _| add_into(o, &gq));
        self.accum(k, |o, _| add_into(o, &gk));
        self.accum(v, |o, _| add_into(o, &gv));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Rotates pairs `(c, c + head_dim/2)` by `pos · base^(−2c/head_dim)`; `inverse` rotates back.
fn rope_apply(data: &mut [f64], geom: AttnGeom, base: f64, inverse: bool) {
    let half = geom.head_dim / 2;
    let width = geom.width();
    let freqs: Vec<f64> = (0..half)
        .map(|c| base.powf(-2.0 * c as f64 / geom.head_dim as f64))
        .collect();
    for pos in 0..geom.seq {
        let trig: Vec<(f64, f64)> = freqs
            .iter()
            .map(|f| {
                let (s, c) = (pos as f64 * f).sin_cos();
                (if inverse { -s } else { s }, c)
            })
            .collect();
        for b in 0..geom.batch {
            for h in 0..geom.heads {
                let base_idx = (b * geom.seq + pos) * width + h * geom.head_dim;
                for (c, &(s, co)) in trig.iter().enumerate() {
                    let x1 = data[base_idx + c];
                    let x2 = data[base_idx + c + half];
                    data[base_idx + c] = x1 * co - x2 * s;
                    data[base_idx + c + half] = x1 * s + x2 * co;
                }
            }
        }
    }
}
