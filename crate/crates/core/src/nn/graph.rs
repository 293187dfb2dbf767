//! Reverse-mode tape over row-major matrices.
//!
//! Every node holds a `rows × cols` value; parameters are read in place from
//! the borrowed [`ParamStore`]. Frozen parameters get no weight gradient
//! unless the graph was built with [`Graph::with_frozen_grads`].

use matrixmultiply::dgemm;

use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBroadcast {
        x: NodeId,
        rows: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Relu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanTokens {
        x: NodeId,
        tokens: usize,
    },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    grad_frozen: bool,
}

/// `c = alpha * a * b + beta * c` on strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let need = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    if k > 0 {
        assert!(a.len() >= need(m, k, rsa, csa) && b.len() >= need(k, n, rsb, csb));
    }
    assert!(c.len() >= need(m, n, rsc, csc));
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn mismatch(expected: &[usize], got: &[usize]) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            grad_frozen: false,
        }
    }

    /// A graph that also differentiates frozen parameters, for audits.
    pub fn with_frozen_grads(store: &'a ParamStore) -> Self {
        Graph {
            grad_frozen: true,
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        match self.nodes[id.0].op {
            Op::Param(p) => self.store.get(p).data(),
            _ => &self.nodes[id.0].value,
        }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        if data.len() != rows * cols {
            return Err(mismatch(&[rows, cols], &[data.len()]));
        }
        Ok(self.push(Op::Input, rows, cols, data, false))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let t = self.store.get(id);
        let (rows, cols) = t.matrix_dims();
        let ng = t.requires_grad() || self.grad_frozen;
        self.push(Op::Param(id), rows, cols, Vec::new(), ng)
    }

    /// `x · wᵀ + b` for `x: [m, k]`, `w: [n, k]`, `b: [1, n]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (m, k) = self.dims(x);
        let (n, kw) = self.dims(w);
        if k != kw {
            return Err(mismatch(&[n, k], &[n, kw]));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            if self.dims(b) != (1, n) {
                let (r, c) = self.dims(b);
                return Err(mismatch(&[1, n], &[r, c]));
            }
            let bv = self.value(b);
            out.chunks_exact_mut(n).for_each(|row| row.copy_from_slice(bv));
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm((m, k, n), 1.0, self.value(x), (k, 1), self.value(w), (1, k), beta, &mut out, (n, 1));
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Op::Linear { x, w, b }, m, n, out, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            let ((r1, c1), (r2, c2)) = (self.dims(a), self.dims(b));
            return Err(mismatch(&[r1, c1], &[r2, c2]));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), r, c, out, ng))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).iter().map(|x| s * x).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), r, c, out, ng)
    }

    /// Adds the `[p, c]` block `rows` to every consecutive group of `p` rows of `x`.
    pub fn add_broadcast(&mut self, x: NodeId, rows: NodeId) -> Result<NodeId> {
        let (m, c) = self.dims(x);
        let (p, cr) = self.dims(rows);
        if cr != c || p == 0 || m % p != 0 {
            return Err(mismatch(&[m, c], &[p, cr]));
        }
        let rv = self.value(rows);
        let out = self
            .value(x)
            .chunks_exact(p * c)
            .flat_map(|blk| blk.iter().zip(rv).map(|(a, b)| a + b))
            .collect();
        let ng = self.ng(x) || self.ng(rows);
        Ok(self.push(Op::AddBroadcast { x, rows }, m, c, out, ng))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (m, c) = self.dims(x);
        for p in [gamma, beta] {
            if self.dims(p) != (1, c) {
                let (r, cc) = self.dims(p);
                return Err(mismatch(&[1, c], &[r, cc]));
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = vec![0.0; m * c];
        let mut xhat = vec![0.0; m * c];
        let mut rstd = vec![0.0; m];
        for (i, row) in self.value(x).chunks_exact(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..c {
                let h = (row[j] - mean) * r;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            m,
            c,
            out,
            ng,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| gelu(v).0).collect();
        let (r, c) = self.dims(x);
        let ng = self.ng(x);
        self.push(Op::Gelu(x), r, c, out, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let (r, c) = self.dims(x);
        let ng = self.ng(x);
        self.push(Op::Relu(x), r, c, out, ng)
    }

    /// Multi-head scaled dot-product self-attention over `batch` sequences of
    /// `tokens` rows each. `q`, `k`, `v` are `[batch·tokens, d]`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, batch: usize, tokens: usize, heads: usize) -> Result<NodeId> {
        let (m, d) = self.dims(q);
        if self.dims(k) != (m, d) || self.dims(v) != (m, d) {
            let (r, c) = self.dims(k);
            return Err(mismatch(&[m, d], &[r, c]));
        }
        if m != batch * tokens || heads == 0 || d % heads != 0 {
            return Err(mismatch(&[batch * tokens, heads], &[m, d]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let mut out = vec![0.0; m * d];
        let nn = tokens * tokens;
        for b in 0..batch {
            for h in 0..heads {
                let off = b * tokens * d + h * dh;
                let p = &mut probs[(b * heads + h) * nn..][..nn];
                gemm((tokens, dh, tokens), scale, &qv[off..], (d, 1), &kv[off..], (1, d), 0.0, p, (tokens, 1));
                for row in p.chunks_exact_mut(tokens) {
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for e in row.iter_mut() {
                        *e = (*e - mx).exp();
                        s += *e;
                    }
                    row.iter_mut().for_each(|e| *e /= s);
                }
                gemm((tokens, tokens, dh), 1.0, p, (tokens, 1), &vv[off..], (d, 1), 0.0, &mut out[off..], (d, 1));
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
            },
            m,
            d,
            out,
            ng,
        ))
    }

    /// Mean over each consecutive group of `tokens` rows.
    pub fn mean_tokens(&mut self, x: NodeId, tokens: usize) -> Result<NodeId> {
        let (m, c) = self.dims(x);
        if tokens == 0 || m % tokens != 0 {
            return Err(mismatch(&[tokens], &[m]));
        }
        let batch = m / tokens;
        let mut out = vec![0.0; batch * c];
        for (b, blk) in self.value(x).chunks_exact(tokens * c).enumerate() {
            let o = &mut out[b * c..][..c];
            for row in blk.chunks_exact(c) {
                o.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            o.iter_mut().for_each(|a| *a /= tokens as f64);
        }
        let ng = self.ng(x);
        Ok(self.push(Op::MeanTokens { x, tokens }, batch, c, out, ng))
    }

    /// Backpropagates the given output cotangents and returns parameter
    /// gradients.
    pub fn backward(&self, seeds: &[(NodeId, &[f64])]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(id, g) in seeds {
            let (r, c) = self.dims(id);
            if g.len() != r * c {
                return Err(mismatch(&[r, c], &[g.len()]));
            }
            acc(&mut grads, id, g);
        }
        let mut out = Gradients::new(self.store.len());
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let (m, n) = (node.rows, node.cols);
        match &node.op {
            Op::Input => {}
            Op::Param(p) => out.add(*p, gy),
            Op::Linear { x, w, b } => {
                let (_, k) = self.dims(*x);
                if self.ng(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm((m, n, k), 1.0, gy, (n, 1), self.value(*w), (k, 1), 0.0, &mut dx, (k, 1));
                    acc(grads, *x, &dx);
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; n * k];
                    gemm((n, m, k), 1.0, gy, (1, n), self.value(*x), (k, 1), 0.0, &mut dw, (k, 1));
                    acc(grads, *w, &dw);
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    let mut db = vec![0.0; n];
                    for row in gy.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    acc(grads, b, &db);
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.ng(id) {
                        acc(grads, id, gy);
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.ng(*a) {
                    let d: Vec<f64> = gy.iter().map(|g| s * g).collect();
                    acc(grads, *a, &d);
                }
            }
            Op::AddBroadcast { x, rows } => {
                if self.ng(*x) {
                    acc(grads, *x, gy);
                }
                if self.ng(*rows) {
                    let (p, c) = self.dims(*rows);
                    let mut d = vec![0.0; p * c];
                    for blk in gy.chunks_exact(p * c) {
                        d.iter_mut().zip(blk).for_each(|(a, v)| *a += v);
                    }
                    acc(grads, *rows, &d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = n;
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (grow, hrow) in gy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    if self.ng(*gamma) {
                        acc(grads, *gamma, &dg);
                    }
                    if self.ng(*beta) {
                        acc(grads, *beta, &db);
                    }
                }
                if self.ng(*x) {
                    let g = self.value(*gamma);
                    let mut dx = vec![0.0; m * c];
                    for i in 0..m {
                        let grow = &gy[i * c..][..c];
                        let hrow = &xhat[i * c..][..c];
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..c {
                            let dh = grow[j] * g[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                        }
                        let (s1, s2) = (s1 / c as f64, s2 / c as f64);
                        for j in 0..c {
                            dx[i * c + j] = rstd[i] * (grow[j] * g[j] - s1 - hrow[j] * s2);
                        }
                    }
                    acc(grads, *x, &dx);
                }
            }
            Op::Gelu(x) => {
                if self.ng(*x) {
                    let d: Vec<f64> = self.value(*x).iter().zip(gy).map(|(&v, g)| g * gelu(v).1).collect();
                    acc(grads, *x, &d);
                }
            }
            Op::Relu(x) => {
                if self.ng(*x) {
                    let d: Vec<f64> = self
                        .value(*x)
                        .iter()
                        .zip(gy)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    acc(grads, *x, &d);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
            } => {
                let (batch, tokens, heads) = (*batch, *tokens, *heads);
                let d = n;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![0.0; m * d];
                let mut dk = vec![0.0; m * d];
                let mut dv = vec![0.0; m * d];
                let nn = tokens * tokens;
                let mut dp = vec![0.0; nn];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * tokens * d + h * dh;
                        let p = &probs[(b * heads + h) * nn..][..nn];
                        // dV = Pᵀ dO ; dP = dO Vᵀ
                        gemm((tokens, tokens, dh), 1.0, p, (1, tokens), &gy[off..], (d, 1), 0.0, &mut dv[off..], (d, 1));
                        gemm((tokens, dh, tokens), 1.0, &gy[off..], (d, 1), &vv[off..], (1, d), 0.0, &mut dp, (tokens, 1));
                        // softmax backward, in place: dS = P ∘ (dP − rowsum(dP ∘ P))
                        for (drow, prow) in dp.chunks_exact_mut(tokens).zip(p.chunks_exact(tokens)) {
                            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                            drow.iter_mut().zip(prow).for_each(|(a, pv)| *a = pv * (*a - dot));
                        }
                        gemm((tokens, tokens, dh), scale, &dp, (tokens, 1), &kv[off..], (d, 1), 0.0, &mut dq[off..], (d, 1));
                        gemm((tokens, tokens, dh), scale, &dp, (1, tokens), &qv[off..], (d, 1), 0.0, &mut dk[off..], (d, 1));
                    }
                }
                for (id, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.ng(id) {
                        acc(grads, id, &g);
                    }
                }
            }
            Op::MeanTokens { x, tokens } => {
                if self.ng(*x) {
                    let c = n;
                    let inv = 1.0 / *tokens as f64;
                    let mut d = Vec::with_capacity(m * tokens * c);
                    for row in gy.chunks_exact(c) {
                        for _ in 0..*tokens {
                            d.extend(row.iter().map(|g| g * inv));
                        }
                    }
                    acc(grads, *x, &d);
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
