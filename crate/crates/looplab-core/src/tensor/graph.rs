//! Tape-style reverse-mode autodiff.
//!
//! A [`Graph`] records operations in creation order, which is already a
//! topological order, so backward is a single reverse sweep that visits each
//! node exactly once. Saved activations are the node values themselves; no
//! recompute or checkpointing happens at desk scale.

use super::{matmul_slices, Result, Tensor, TensorError};

/// Handle to a node inside one [`Graph`]. Handles are only meaningful for the
/// graph that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Multiply-accumulate counts observed by a graph, split by pass. The counter
/// covers matmul-class work only (matmul, diagonal/row scaling); elementwise
/// and normalization work is excluded by convention. FLOPs = 2 * MACs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlopCount {
    pub forward_macs: f64,
    pub backward_macs: f64,
}

impl FlopCount {
    pub fn total_flops(&self) -> f64 {
        2.0 * (self.forward_macs + self.backward_macs)
    }

    pub fn add(&mut self, other: FlopCount) {
        self.forward_macs += other.forward_macs;
        self.backward_macs += other.backward_macs;
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Exp(usize),
    Softplus(usize),
    ReluSquared(usize),
    Matmul(usize, usize),
    Transpose(usize),
    RmsNorm { x: usize, gain: usize, eps: f64 },
    Rotary { x: usize, theta: f64 },
    CausalSoftmax(usize),
    CrossEntropy { logits: usize, targets: Vec<usize> },
    Sum(usize),
    Mean(usize),
    MulRowVec { x: usize, v: usize },
    ScaleRows { x: usize, v: usize },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize, len: usize },
    Embed { table: usize, ids: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Topologically ordered op record with per-node activations and grad slots.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    flops: FlopCount,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a node after `backward`. Absent for nodes that do not
    /// require gradients (never zero-filled).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        self.grads[v.0].as_deref()
    }

    pub fn flops(&self) -> FlopCount {
        self.flops
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
        if data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    fn push_checked(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs: bool, name: &'static str) -> Result<Var> {
        Self::check_finite(&data, name)?;
        let t = Tensor { shape, data, requires_grad: false };
        Ok(self.push(op, t, needs))
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Binds a tensor as a graph leaf; differentiable iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(Op::Leaf, t, needs)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let needs = false;
        let mut t = t;
        t.requires_grad = false;
        self.push(Op::Leaf, t, needs)
    }

    fn binary_same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape { op, details: format!("{sa:?} vs {sb:?}") });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push_checked(Op::Add(a.0, b.0), shape, data, needs, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push_checked(Op::Sub(a.0, b.0), shape, data, needs, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push_checked(Op::Mul(a.0, b.0), shape, data, needs, "mul")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| -x).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a.0);
        self.push_checked(Op::Neg(a.0), shape, data, needs, "neg")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| c * x).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a.0);
        self.push_checked(Op::Scale(a.0, c), shape, data, needs, "scale")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.exp()).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a.0);
        self.push_checked(Op::Exp(a.0), shape, data, needs, "exp")
    }

    /// softplus(x) = ln(1 + e^x), computed stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| softplus(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a.0);
        self.push_checked(Op::Softplus(a.0), shape, data, needs, "softplus")
    }

    /// max(x, 0)^2
    pub fn relu_squared(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                let r = x.max(0.0);
                r * r
            })
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a.0);
        self.push_checked(Op::ReluSquared(a.0), shape, data, needs, "relu_squared")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape { op: "matmul", details: format!("{sa:?} x {sb:?}") });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_slices(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.flops.forward_macs += (m * k * n) as f64;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push_checked(Op::Matmul(a.0, b.0), vec![m, n], out, needs, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        if sa.len() != 2 {
            return Err(TensorError::Shape { op: "transpose", details: format!("{sa:?}") });
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a.0);
        self.push_checked(Op::Transpose(a.0), vec![c, r], out, needs, "transpose")
    }

    /// y = gain .* x / sqrt(mean(x^2) + eps) along the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let d = self.value(x).last_dim();
        let sg = self.value(gain).shape();
        if sx.is_empty() || sg != [d] {
            return Err(TensorError::Shape {
                op: "rms_norm",
                details: format!("x {sx:?}, gain {sg:?}"),
            });
        }
        let rows = self.value(x).numel() / d;
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let mut out = vec![0.0; xv.len()];
        for i in 0..rows {
            let row = &xv[i * d..(i + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = gv[j] * row[j] * inv;
            }
        }
        let needs = self.needs(x.0) || self.needs(gain.0);
        self.push_checked(Op::RmsNorm { x: x.0, gain: gain.0, eps }, sx, out, needs, "rms_norm")
    }

    /// Rotary position rotation (interleaved-pair convention) over rows of a
    /// [n, d] tensor; row index is the position.
    pub fn rotary(&mut self, x: Var, theta: f64) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 2 || !sx[1].is_multiple_of(2) {
            return Err(TensorError::Shape {
                op: "rotary",
                details: format!("need [n, even d], got {sx:?}"),
            });
        }
        let (n, d) = (sx[0], sx[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        rotary_apply(xv, &mut out, n, d, theta, false);
        let needs = self.needs(x.0);
        self.push_checked(Op::Rotary { x: x.0, theta }, sx, out, needs, "rotary")
    }

    /// Row-wise softmax over the causal prefix: row i is a softmax over
    /// columns 0..=i, zero beyond. Avoids materializing -inf masks.
    pub fn causal_softmax(&mut self, scores: Var) -> Result<Var> {
        let s = self.value(scores).shape().to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(TensorError::Shape {
                op: "causal_softmax",
                details: format!("need square [n, n], got {s:?}"),
            });
        }
        let n = s[0];
        let sv = self.value(scores).data();
        let mut out = vec![0.0; sv.len()];
        for i in 0..n {
            let row = &sv[i * n..i * n + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..=i {
                out[i * n + j] /= z;
            }
        }
        let needs = self.needs(scores.0);
        self.push_checked(Op::CausalSoftmax(scores.0), s, out, needs, "causal_softmax")
    }

    /// Mean negative log-softmax of `logits` at `targets`; scalar output.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                details: format!("logits {s:?} vs {} targets", targets.len()),
            });
        }
        let (n, v) = (s[0], s[1]);
        for &t in targets {
            if t >= v {
                return Err(TensorError::TokenOutOfRange { id: t, vocab: v });
            }
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / n as f64;
        let needs = self.needs(logits.0);
        self.push_checked(
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec() },
            vec![],
            vec![loss],
            needs,
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a.0);
        self.push_checked(Op::Sum(a.0), vec![], vec![total], needs, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let total: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a.0);
        self.push_checked(Op::Mean(a.0), vec![], vec![total / n], needs, "mean")
    }

    /// y[i, j] = x[i, j] * v[j]; per-channel (diagonal) scaling of a [n, d].
    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sv = self.value(v).shape();
        if sx.len() != 2 || sv != [sx[1]] {
            return Err(TensorError::Shape {
                op: "mul_row_vec",
                details: format!("x {sx:?}, v {sv:?}"),
            });
        }
        let (n, d) = (sx[0], sx[1]);
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = xv[i * d + j] * vv[j];
            }
        }
        self.flops.forward_macs += (n * d) as f64;
        let needs = self.needs(x.0) || self.needs(v.0);
        self.push_checked(Op::MulRowVec { x: x.0, v: v.0 }, sx, out, needs, "mul_row_vec")
    }

    /// y[i, j] = v[i] * x[i, j]; scales row i of x by v[i].
    pub fn scale_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sv = self.value(v).shape();
        if sx.len() != 2 || sv != [sx[0]] {
            return Err(TensorError::Shape {
                op: "scale_rows",
                details: format!("x {sx:?}, v {sv:?}"),
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let xv = self.value(x).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; xv.len()];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = vv[i] * xv[i * n + j];
            }
        }
        self.flops.forward_macs += (m * n) as f64;
        let needs = self.needs(x.0) || self.needs(v.0);
        self.push_checked(Op::ScaleRows { x: x.0, v: v.0 }, sx, out, needs, "scale_rows")
    }

    /// Concatenates [n, d_i] inputs along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Shape { op: "concat_cols", details: "no inputs".into() });
        }
        let n = self.value(parts[0]).shape().first().copied().unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != n {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    details: format!("inconsistent row counts: {s:?}"),
                });
            }
            total += s[1];
        }
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let d = s[1];
            let pv = self.value(p).data();
            for i in 0..n {
                out[i * total + offset..i * total + offset + d]
                    .copy_from_slice(&pv[i * d..(i + 1) * d]);
            }
            offset += d;
        }
        let needs = parts.iter().any(|p| self.needs(p.0));
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push_checked(Op::ConcatCols(ids), vec![n, total], out, needs, "concat_cols")
    }

    /// Column slice [start, start+len) of a [n, d] tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 2 || start + len > sx[1] {
            return Err(TensorError::Shape {
                op: "slice_cols",
                details: format!("x {sx:?}, slice {start}..{}", start + len),
            });
        }
        let (n, d) = (sx[0], sx[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len].copy_from_slice(&xv[i * d + start..i * d + start + len]);
        }
        let needs = self.needs(x.0);
        self.push_checked(Op::SliceCols { x: x.0, start, len }, vec![n, len], out, needs, "slice_cols")
    }

    /// Row lookup into an embedding table [V, d]; output [n, d].
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.value(table).shape().to_vec();
        if st.len() != 2 {
            return Err(TensorError::Shape { op: "embed", details: format!("table {st:?}") });
        }
        let (vocab, d) = (st[0], st[1]);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::TokenOutOfRange { id, vocab });
            }
        }
        let tv = self.value(table).data();
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table.0);
        self.push_checked(
            Op::Embed { table: table.0, ids: ids.to_vec() },
            vec![ids.len(), d],
            out,
            needs,
            "embed",
        )
    }

    /// Single-head causal attention: softmax(q k^T / sqrt(d_head), causal) v,
    /// with rotary rotation applied to q and k when `rope_theta` is set.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, rope_theta: Option<f64>) -> Result<Var> {
        let (sq, sk, sv) = (
            self.value(q).shape().to_vec(),
            self.value(k).shape().to_vec(),
            self.value(v).shape().to_vec(),
        );
        if sq.len() != 2 || sq != sk || sq[0] != sv[0] {
            return Err(TensorError::Shape {
                op: "causal_attention",
                details: format!("q {sq:?}, k {sk:?}, v {sv:?}"),
            });
        }
        let d_head = sq[1];
        let (qr, kr) = match rope_theta {
            Some(theta) => (self.rotary(q, theta)?, self.rotary(k, theta)?),
            None => (q, k),
        };
        let kt = self.transpose(kr)?;
        let raw = self.matmul(qr, kt)?;
        let scores = self.scale(raw, 1.0 / (d_head as f64).sqrt())?;
        let probs = self.causal_softmax(scores)?;
        self.matmul(probs, v)
    }

    /// Reverse sweep from a scalar loss. Rejects non-scalar seeds and a second
    /// backward on the same graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardReentry);
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarSeed(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || self.grads[id].is_none() {
                continue;
            }
            let g = self.grads[id].take().expect("grad present");
            self.propagate(id, &g);
            // Leaves keep their accumulated gradient for retrieval.
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.grads[id] = Some(g);
            }
        }
        Ok(())
    }

    fn acc(&mut self, id: usize, contribution: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(slot) => {
                for (s, c) in slot.iter_mut().zip(contribution) {
                    *s += c;
                }
            }
            None => self.grads[id] = Some(contribution.to_vec()),
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::Sub(a, b) => {
                self.acc(a, g);
                if self.nodes[b].needs_grad {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.acc(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a].needs_grad {
                    let da: Vec<f64> =
                        g.iter().zip(self.nodes[b].value.data()).map(|(g, y)| g * y).collect();
                    self.acc(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let db: Vec<f64> =
                        g.iter().zip(self.nodes[a].value.data()).map(|(g, x)| g * x).collect();
                    self.acc(b, &db);
                }
            }
            Op::Neg(a) => {
                let da: Vec<f64> = g.iter().map(|x| -x).collect();
                self.acc(a, &da);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| c * x).collect();
                self.acc(a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> =
                    g.iter().zip(self.nodes[id].value.data()).map(|(g, y)| g * y).collect();
                self.acc(a, &da);
            }
            Op::Softplus(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(g, &x)| g * sigmoid(x))
                    .collect();
                self.acc(a, &da);
            }
            Op::ReluSquared(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(g, &x)| g * 2.0 * x.max(0.0))
                    .collect();
                self.acc(a, &da);
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = self.nodes[a].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b].value.shape()[1];
                if self.nodes[a].needs_grad {
                    // da = g . b^T
                    let bv = self.nodes[b].value.data();
                    let mut bt = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bv[p * n + j];
                        }
                    }
                    let mut da = vec![0.0; m * k];
                    matmul_slices(g, &bt, m, n, k, &mut da);
                    self.flops.backward_macs += (m * n * k) as f64;
                    self.acc(a, &da);
                }
                if self.nodes[b].needs_grad {
                    // db = a^T . g
                    let av = self.nodes[a].value.data();
                    let mut at = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            at[p * m + i] = av[i * k + p];
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    matmul_slices(&at, g, k, m, n, &mut db);
                    self.flops.backward_macs += (k * m * n) as f64;
                    self.acc(b, &db);
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[id].value.shape();
                let (r, c) = (s[0], s[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = g[i * c + j];
                    }
                }
                self.acc(a, &da);
            }
            Op::RmsNorm { x, gain, eps } => {
                let d = self.nodes[x].value.last_dim();
                let rows = self.nodes[x].value.numel() / d;
                let (dx, dg) = {
                    let xv = self.nodes[x].value.data();
                    let gv = self.nodes[gain].value.data();
                    let mut dx = self.nodes[x].needs_grad.then(|| vec![0.0; xv.len()]);
                    let mut dg = self.nodes[gain].needs_grad.then(|| vec![0.0; d]);
                    for i in 0..rows {
                        let row = &xv[i * d..(i + 1) * d];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                        let r = (ms + eps).sqrt();
                        if let Some(dx) = dx.as_mut() {
                            let mut inner = 0.0;
                            for j in 0..d {
                                inner += g[i * d + j] * gv[j] * row[j];
                            }
                            let coef = inner / (d as f64 * r * r * r);
                            for j in 0..d {
                                dx[i * d + j] = g[i * d + j] * gv[j] / r - row[j] * coef;
                            }
                        }
                        if let Some(dg) = dg.as_mut() {
                            for j in 0..d {
                                dg[j] += g[i * d + j] * row[j] / r;
                            }
                        }
                    }
                    (dx, dg)
                };
                if let Some(dx) = dx {
                    self.acc(x, &dx);
                }
                if let Some(dg) = dg {
                    self.acc(gain, &dg);
                }
            }
            Op::Rotary { x, theta } => {
                let s = self.nodes[id].value.shape();
                let (n, d) = (s[0], s[1]);
                let mut dx = vec![0.0; g.len()];
                // The rotation is orthogonal; its adjoint rotates backwards.
                rotary_apply(g, &mut dx, n, d, theta, true);
                self.acc(x, &dx);
            }
            Op::CausalSoftmax(a) => {
                let n = self.nodes[id].value.shape()[0];
                let pv = self.nodes[id].value.data();
                let mut da = vec![0.0; pv.len()];
                for i in 0..n {
                    let mut inner = 0.0;
                    for j in 0..=i {
                        inner += g[i * n + j] * pv[i * n + j];
                    }
                    for j in 0..=i {
                        da[i * n + j] = pv[i * n + j] * (g[i * n + j] - inner);
                    }
                }
                self.acc(a, &da);
            }
            Op::CrossEntropy { logits, targets } => {
                let s = self.nodes[logits].value.shape();
                let (n, v) = (s[0], s[1]);
                let lv = self.nodes[logits].value.data();
                let seed = g[0] / n as f64;
                let mut dl = vec![0.0; lv.len()];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &lv[i * v..(i + 1) * v];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..v {
                        let p = (row[j] - max).exp() / z;
                        dl[i * v + j] = seed * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.acc(logits, &dl);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.nodes[a].value.numel()];
                self.acc(a, &da);
            }
            Op::Mean(a) => {
                let n = self.nodes[a].value.numel();
                let da = vec![g[0] / n as f64; n];
                self.acc(a, &da);
            }
            Op::MulRowVec { x, v } => {
                let s = self.nodes[x].value.shape();
                let (n, d) = (s[0], s[1]);
                if self.nodes[x].needs_grad {
                    let vv = self.nodes[v].value.data();
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            dx[i * d + j] = g[i * d + j] * vv[j];
                        }
                    }
                    self.flops.backward_macs += (n * d) as f64;
                    self.acc(x, &dx);
                }
                if self.nodes[v].needs_grad {
                    let xv = self.nodes[x].value.data();
                    let mut dv = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dv[j] += g[i * d + j] * xv[i * d + j];
                        }
                    }
                    self.flops.backward_macs += (n * d) as f64;
                    self.acc(v, &dv);
                }
            }
            Op::ScaleRows { x, v } => {
                let s = self.nodes[x].value.shape();
                let (m, n) = (s[0], s[1]);
                if self.nodes[x].needs_grad {
                    let vv = self.nodes[v].value.data();
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g[i * n + j] * vv[i];
                        }
                    }
                    self.flops.backward_macs += (m * n) as f64;
                    self.acc(x, &dx);
                }
                if self.nodes[v].needs_grad {
                    let xv = self.nodes[x].value.data();
                    let mut dv = vec![0.0; m];
                    for i in 0..m {
                        for j in 0..n {
                            dv[i] += g[i * n + j] * xv[i * n + j];
                        }
                    }
                    self.flops.backward_macs += (m * n) as f64;
                    self.acc(v, &dv);
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[id].value.shape()[1];
                let n = self.nodes[id].value.shape()[0];
                let mut offset = 0;
                for p in parts {
                    let d = self.nodes[p].value.shape()[1];
                    if self.nodes[p].needs_grad {
                        let mut dp = vec![0.0; n * d];
                        for i in 0..n {
                            dp[i * d..(i + 1) * d]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + d]);
                        }
                        self.acc(p, &dp);
                    }
                    offset += d;
                }
            }
            Op::SliceCols { x, start, len } => {
                let s = self.nodes[x].value.shape();
                let (n, d) = (s[0], s[1]);
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    dx[i * d + start..i * d + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.acc(x, &dx);
            }
            Op::Embed { table, ids } => {
                let s = self.nodes[table].value.shape();
                let (vocab, d) = (s[0], s[1]);
                let mut dt = vec![0.0; vocab * d];
                for (i, &idx) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += g[i * d + j];
                    }
                }
                self.acc(table, &dt);
            }
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies the interleaved-pair rotary rotation; `inverse` rotates by the
/// negated angle (the adjoint of the forward rotation).
fn rotary_apply(src: &[f64], dst: &mut [f64], n: usize, d: usize, theta: f64, inverse: bool) {
    let half = d / 2;
    for pos in 0..n {
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / d as f64);
            let mut angle = pos as f64 * freq;
            if inverse {
                angle = -angle;
            }
            let (sin, cos) = angle.sin_cos();
            let x0 = src[pos * d + 2 * i];
            let x1 = src[pos * d + 2 * i + 1];
            dst[pos * d + 2 * i] = x0 * cos - x1 * sin;
            dst[pos * d + 2 * i + 1] = x0 * sin + x1 * cos;
        }
    }
}
