//! A small reverse-mode tape over 2-D activations.
//!
//! Every value on the tape is a [`Tensor`] viewed as `[rows, cols]`. Ops push
//! a node that remembers its inputs plus whatever the backward pass needs.
//! Parameters enter as leaves tagged with their store index so gradients can
//! be collected per parameter after [`Tape::backward`].

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape and masking of one fused multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `batch * k_len` flags; `false` keys are never attended.
    pub key_mask: Vec<bool>,
}

impl AttnSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_mask[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Unfold {
        x: Var,
        batch: usize,
        len: usize,
        width: usize,
    },
    MaxPoolTime {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Kron(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<usize>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    // tanh approximation; returns (value, derivative)
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, deriv)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            param: Some(index),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-D");
        assert_eq!(bv.shape()[0], k, "matmul inner dims {k} vs {}", bv.shape()[0]);
        let n = bv.cols();
        let mut out = vec![0.0; m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Add(a, b), &[a, b])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        assert_eq!(bv.len(), n, "bias length mismatch");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * s).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_parts(v).0).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (rows, n) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; rows * n];
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Row lookup; `ids` must be in range of the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let rows = tv.rows();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < rows, "embedding id {id} out of range {rows}");
            out.extend_from_slice(tv.row(id));
        }
        self.push(
            Tensor::from_vec(&[ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Fused scaled dot-product multi-head attention. `q` is
    /// `[batch*q_len, d]`, `k` and `v` are `[batch*k_len, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(d % spec.heads, 0);
        assert_eq!(qv.rows(), spec.batch * spec.q_len);
        assert_eq!(kv.rows(), spec.batch * spec.k_len);
        assert_eq!(spec.key_mask.len(), spec.batch * spec.k_len);
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk) = (spec.q_len, spec.k_len);
        let mut probs = vec![0.0; spec.batch * spec.heads * tq * tk];
        let mut out = vec![0.0; qv.len()];
        let mut scores = vec![0.0; tk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let off = h * dh;
                for i in 0..tq {
                    let qrow = &qv.row(b * tq + i)[off..off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tk {
                        if spec.allowed(b, i, j) {
                            let krow = &kv.row(b * tk + j)[off..off + dh];
                            let s = crate::tensor::dot(qrow, krow) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((b * spec.heads + h) * tq + i) * tk..][..tk];
                    let mut total = 0.0;
                    for j in 0..tk {
                        if spec.allowed(b, i, j) {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            total += e;
                        }
                    }
                    let orow = &mut out[(b * tq + i) * d + off..][..dh];
                    for j in 0..tk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        p[j] /= total;
                        let vrow = &vv.row(b * tk + j)[off..off + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p[j] * x;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(&[spec.batch * tq, d], out),
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::Softmax(x), &[x])
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    /// Panics if every target is `None`; callers validate that first.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        let n = lv.cols();
        assert_eq!(lv.rows(), targets.len());
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert!(count > 0, "cross_entropy with no targets");
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, (row, t)) in probs.chunks_mut(n).zip(targets).enumerate() {
            let Some(t) = *t else { continue };
            let raw = lv.row(r);
            let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + raw.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - raw[t];
            softmax_in_place(row);
        }
        let loss = total / count as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy over a `[n, 1]` logit column.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len());
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&s, &y)| {
                // -[y log σ(s) + (1-y) log(1-σ(s))] in a stable form
                s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
            })
            .sum();
        let loss = total / targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// `mask` holds 0 or the inverted keep-probability per element.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len());
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Dropout { x, mask }, &[x])
    }

    /// Sliding windows: `[batch*len, e]` to `[batch*(len-width+1), width*e]`.
    pub fn unfold(&mut self, x: Var, batch: usize, len: usize, width: usize) -> Var {
        let xv = self.value(x);
        let e = xv.cols();
        assert_eq!(xv.rows(), batch * len);
        assert!(width <= len, "window {width} longer than sequence {len}");
        let windows = len - width + 1;
        let mut out = Vec::with_capacity(batch * windows * width * e);
        for b in 0..batch {
            for w in 0..windows {
                for o in 0..width {
                    out.extend_from_slice(xv.row(b * len + w + o));
                }
            }
        }
        self.push(
            Tensor::from_vec(&[batch * windows, width * e], out),
            Op::Unfold {
                x,
                batch,
                len,
                width,
            },
            &[x],
        )
    }

    /// Max over the first `valid[b]` rows of each of `valid.len()` blocks of
    /// `block` rows.
    pub fn max_pool_time(&mut self, x: Var, block: usize, valid: &[usize]) -> Var {
        let xv = self.value(x);
        let f = xv.cols();
        assert_eq!(xv.rows(), block * valid.len());
        let mut out = vec![0.0; valid.len() * f];
        let mut argmax = vec![0; valid.len() * f];
        for (b, &n) in valid.iter().enumerate() {
            assert!(n >= 1 && n <= block);
            for c in 0..f {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for t in 0..n {
                    let r = b * block + t;
                    let v = xv.data()[r * f + c];
                    if v > best {
                        best = v;
                        at = r;
                    }
                }
                out[b * f + c] = best;
                argmax[b * f + c] = at;
            }
        }
        self.push(
            Tensor::from_vec(&[valid.len(), f], out),
            Op::MaxPoolTime { x, argmax },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        self.push(
            Tensor::from_vec(&[rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        let rows = xv.rows();
        assert!(start + width <= xv.cols());
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        self.push(
            Tensor::from_vec(&[rows, width], out),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    /// Kronecker product of two 2-D tensors.
    pub fn kron(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (p, q) = (av.rows(), av.cols());
        let (r, s) = (bv.rows(), bv.cols());
        let mut out = vec![0.0; p * r * q * s];
        let width = q * s;
        for i in 0..p {
            for j in 0..q {
                let aij = av.data()[i * q + j];
                for k in 0..r {
                    for l in 0..s {
                        out[(i * r + k) * width + j * s + l] = aij * bv.data()[k * s + l];
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(&[p * r, q * s], out),
            Op::Kron(a, b),
            &[a, b],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradient of every trainable parameter leaf reachable from `loss`,
    /// summed when the same store index appears on the tape more than once.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(usize, Tensor)> {
        let mut out: Vec<(usize, Tensor)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(idx), Some(g)) = (node.param, grads.grads[i].as_ref()) else {
                continue;
            };
            if let Some((_, acc)) = out.iter_mut().find(|(j, _)| *j == idx) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            } else {
                out.push((idx, g.clone()));
            }
        }
        out
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(da) = self.acc(grads, *a) {
                    gemm_nt(gd, bv.data(), da, m, n, k);
                }
                if let Some(db) = self.acc(grads, *b) {
                    gemm_tn(av.data(), gd, db, k, m, n);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(grads, *v) {
                        for (x, y) in d.iter_mut().zip(gd) {
                            *x += y;
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (a, b) in dx.iter_mut().zip(gd) {
                        *a += b;
                    }
                }
                let n = g.cols();
                if let Some(db) = self.acc(grads, *bias) {
                    for row in gd.chunks(n) {
                        for (a, b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (a, b) in dx.iter_mut().zip(gd) {
                        *a += b * s;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data().to_vec();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((a, b), v) in dx.iter_mut().zip(gd).zip(&xv) {
                        if *v > 0.0 {
                            *a += b;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data().to_vec();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((a, b), v) in dx.iter_mut().zip(gd).zip(&xv) {
                        *a += b * gelu_parts(*v).1;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = g.cols();
                let gain_v = self.value(*gain).data().to_vec();
                if let Some(dg) = self.acc(grads, *gain) {
                    for (row_g, row_h) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += row_g[c] * row_h[c];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for row_g in gd.chunks(n) {
                        for c in 0..n {
                            db[c] += row_g[c];
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, (row_g, row_h)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for c in 0..n {
                            dxhat[c] = row_g[c] * gain_v[c];
                        }
                        let sum: f64 = dxhat.iter().sum();
                        let sum_h: f64 = dxhat.iter().zip(row_h).map(|(a, b)| a * b).sum();
                        let k = rstd[r] / n as f64;
                        let out = &mut dx[r * n..(r + 1) * n];
                        for c in 0..n {
                            out[c] += k * (n as f64 * dxhat[c] - sum - row_h[c] * sum_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = g.cols();
                if let Some(dt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += gd[r * d + c];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, gd, grads),
            Op::Softmax(x) => {
                let n = g.cols();
                let y = node.value.data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((row_y, row_g), row_d) in
                        y.chunks(n).zip(gd.chunks(n)).zip(dx.chunks_mut(n))
                    {
                        let s: f64 = row_y.iter().zip(row_g).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            row_d[c] += row_y[c] * (row_g[c] - s);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let n = self.value(*logits).cols();
                let k = gd[0] / *count as f64;
                if let Some(dl) = self.acc(grads, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut dl[r * n..(r + 1) * n];
                        for c in 0..n {
                            row[c] += k * probs[r * n + c];
                        }
                        row[t] -= k;
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits).data().to_vec();
                let k = gd[0] / targets.len() as f64;
                if let Some(dl) = self.acc(grads, *logits) {
                    for ((d, s), y) in dl.iter_mut().zip(&lv).zip(targets) {
                        *d += k * (sigmoid(*s) - y);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((a, b), m) in dx.iter_mut().zip(gd).zip(mask) {
                        *a += b * m;
                    }
                }
            }
            Op::Unfold {
                x,
                batch,
                len,
                width,
            } => {
                let e = self.value(*x).cols();
                let windows = len - width + 1;
                if let Some(dx) = self.acc(grads, *x) {
                    let row_w = width * e;
                    for b in 0..*batch {
                        for w in 0..windows {
                            let grow = &gd[(b * windows + w) * row_w..][..row_w];
                            for o in 0..*width {
                                let dst = &mut dx[(b * len + w + o) * e..][..e];
                                for (a, v) in dst.iter_mut().zip(&grow[o * e..(o + 1) * e]) {
                                    *a += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPoolTime { x, argmax } => {
                let f = g.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for (i, &r) in argmax.iter().enumerate() {
                        dx[r * f + i % f] += gd[i];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(dp) = self.acc(grads, *p) {
                        for (r, row) in dp.chunks_mut(w).enumerate() {
                            for (a, b) in row.iter_mut().zip(&gd[r * total + off..]) {
                                *a += b;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let width = g.cols();
                let n = self.value(*x).cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, row) in gd.chunks(width).enumerate() {
                        for (a, b) in dx[r * n + start..][..width].iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Kron(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                let (p, q) = (av.rows(), av.cols());
                let (r, s) = (bv.rows(), bv.cols());
                let width = q * s;
                let at = |i: usize, j: usize, k: usize, l: usize| gd[(i * r + k) * width + j * s + l];
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..p {
                        for j in 0..q {
                            let mut acc = 0.0;
                            for k in 0..r {
                                for l in 0..s {
                                    acc += at(i, j, k, l) * bv.data()[k * s + l];
                                }
                            }
                            da[i * q + j] += acc;
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for k in 0..r {
                        for l in 0..s {
                            let mut acc = 0.0;
                            for i in 0..p {
                                for j in 0..q {
                                    acc += at(i, j, k, l) * av.data()[i * q + j];
                                }
                            }
                            db[k * s + l] += acc;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk) = (spec.q_len, spec.k_len);
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; tk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let off = h * dh;
                for i in 0..tq {
                    let p = &probs[((b * spec.heads + h) * tq + i) * tk..][..tk];
                    let go = &gd[(b * tq + i) * d + off..][..dh];
                    let mut s = 0.0;
                    for j in 0..tk {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = &vv.row(b * tk + j)[off..off + dh];
                        dp[j] = crate::tensor::dot(go, vrow);
                        s += p[j] * dp[j];
                        let dvrow = &mut dv[(b * tk + j) * d + off..][..dh];
                        for (a, x) in dvrow.iter_mut().zip(go) {
                            *a += p[j] * x;
                        }
                    }
                    let qrow = &qv.row(b * tq + i)[off..off + dh];
                    for j in 0..tk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        let krow = &kv.row(b * tk + j)[off..off + dh];
                        let dqrow = &mut dq[(b * tq + i) * d + off..][..dh];
                        for (a, x) in dqrow.iter_mut().zip(krow) {
                            *a += ds * x;
                        }
                        let dkrow = &mut dk[(b * tk + j) * d + off..][..dh];
                        for (a, x) in dkrow.iter_mut().zip(qrow) {
                            *a += ds * x;
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(dst) = self.acc(grads, var) {
                for (a, b) in dst.iter_mut().zip(&delta) {
                    *a += b;
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` around `x`, checked against the tape.
    fn check(shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(s, shape)| {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|i| ((i * 7 + s * 13) as f64 * 0.618).sin() * 0.9 + 0.05)
                    .collect();
                Tensor::from_vec(shape, data)
            })
            .collect();
        let eval = |ins: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.variable(t.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eps = 1e-6;
        for (s, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[s]).expect("missing grad").clone();
            for i in 0..input.len() {
                let mut plus = inputs.clone();
                plus[s].data_mut()[i] += eps;
                let mut minus = inputs.clone();
                minus[s].data_mut()[i] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-7));
                assert!(
                    err < 1e-5 || (a - numeric).abs() < 1e-8,
                    "input {s} elem {i}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn weighted_sum(tape: &mut Tape, x: Var) -> Var {
        // a fixed non-uniform readout so every element's gradient differs
        let n = tape.value(x).len();
        let cols = tape.value(x).cols();
        let w = Tensor::from_vec(&[cols, 1], (0..cols).map(|i| 0.3 + 0.1 * i as f64).collect());
        let w = tape.constant(w);
        let y = tape.matmul(x, w);
        let rows = n / cols;
        let ones = tape.constant(Tensor::full(&[1, rows], 1.0));
        tape.matmul(ones, y)
    }

    #[test]
    fn matmul_bias_gelu_gradients() {
        check(&[&[3, 4], &[4, 2], &[2]], |t, v| {
            let y = t.matmul(v[0], v[1]);
            let y = t.add_bias(y, v[2]);
            let y = t.gelu(y);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        check(&[&[3, 5], &[5], &[5]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn attention_gradients_causal_and_masked() {
        check(&[&[6, 4], &[6, 4], &[6, 4]], |t, v| {
            let spec = AttnSpec {
                batch: 2,
                q_len: 3,
                k_len: 3,
                heads: 2,
                causal: true,
                key_mask: vec![true, true, false, true, true, true],
            };
            let y = t.attention(v[0], v[1], v[2], spec);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn cross_entropy_and_softmax_gradients() {
        check(&[&[3, 4]], |t, v| t.cross_entropy(v[0], &[Some(1), None, Some(3)]));
        check(&[&[2, 3]], |t, v| {
            let s = t.softmax(v[0]);
            weighted_sum(t, s)
        });
        check(&[&[4, 1]], |t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn conv_pool_concat_slice_kron_gradients() {
        check(&[&[8, 3], &[6, 2]], |t, v| {
            let u = t.unfold(v[0], 2, 4, 2);
            let y = t.matmul(u, v[1]);
            let p = t.max_pool_time(y, 3, &[3, 2]);
            let s = t.slice_cols(p, 1, 1);
            let c = t.concat_cols(&[p, s]);
            weighted_sum(t, c)
        });
        check(&[&[2, 2], &[2, 3]], |t, v| {
            let k = t.kron(v[0], v[1]);
            weighted_sum(t, k)
        });
    }

    #[test]
    fn embedding_scatter_accumulates_repeats() {
        let mut t = Tape::new();
        let table = t.variable(Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let e = t.embedding(table, &[2, 0, 2]);
        assert_eq!(t.value(e).row(0), &[5.0, 6.0]);
        let ones = t.constant(Tensor::full(&[1, 3], 1.0));
        let s = t.matmul(ones, e);
        let w = t.constant(Tensor::full(&[2, 1], 1.0));
        let out = t.matmul(s, w);
        let g = t.backward(out);
        assert_eq!(g.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_v() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[2, 8]));
        let loss = t.cross_entropy(l, &[Some(3), Some(5)]);
        assert!((t.value(loss).item() - 8f64.ln()).abs() < 1e-12);
    }
}
