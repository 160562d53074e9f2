//! Wengert tape: operations are recorded in execution order during the
//! forward pass and replayed once, in reverse, to accumulate adjoints.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise activation kinds with recorded adjoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Identity forward, no adjoint. The input handle is kept so the record
    /// stays replayable even though backward never reads it.
    StopGrad {
        #[allow(dead_code)]
        x: Var,
    },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    /// x [..] + s [1], broadcast.
    AddScalar { x: Var, s: Var },
    /// x [R x C] + b [C], broadcast over rows.
    AddRow { x: Var, b: Var },
    Matmul { a: Var, b: Var },
    /// out[h,t,m] = sum_d q[h,t,d] * k[h,m,d]
    BatchedQk { q: Var, k: Var },
    /// out[h,t,d] = sum_m w[h,t,m] * v[h,m,d]
    BatchedAv { w: Var, v: Var },
    /// out[h,t,m] = sum_d q[h,t,d] * r[h, mem_len + t - m, d]; zero when the
    /// relative distance is negative (future positions, masked downstream).
    RelQr { q: Var, r: Var, mem_len: usize },
    /// out[h,t,m] = sum_d u[h,d] * k[h,m,d], broadcast over t.
    UBias { u: Var, k: Var, t_len: usize },
    /// out[h,t,m] = sum_d v[h,d] * r[h, mem_len + t - m, d]
    VRel { v: Var, r: Var, mem_len: usize, t_len: usize },
    /// [T, H*d] -> [H, T, d]
    SplitHeads { x: Var, heads: usize },
    /// [H, T, d] -> [T, H*d]
    MergeHeads { x: Var },
    /// [A, C] over [B, C] -> [A+B, C]
    ConcatRows { a: Var, b: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    /// Softmax over the last axis of [H, T, M]; entries with mask[t][m] false
    /// are exactly zero. A fully masked row yields zeros and a warning.
    MaskedSoftmax { logits: Var, mask: Arc<Vec<Vec<bool>>> },
    Act { kind: ActKind, x: Var },
    Exp { x: Var },
    /// Row-wise log-softmax of [R, C].
    LogSoftmaxRows { x: Var },
    /// out[r] = x[r, idx[r]]
    RowPick { x: Var, idx: Arc<Vec<usize>> },
    /// out[t, :] = table[idx[t], :]
    GatherRows { table: Var, idx: Arc<Vec<usize>> },
    Sum { x: Var },
    Mean { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records every executed operation with its inputs and outputs; replaying
/// the record backwards visits each operation exactly once and populates
/// `grad` on every reachable tensor that requires one.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    warnings: Vec<String>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Warnings raised during the forward pass (fully masked softmax rows).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Detached copy of a recorded value (no grad, no requires_grad).
    pub fn detach(&self, v: Var) -> Tensor {
        let t = &self.nodes[v.0].value;
        Tensor { shape: t.shape.clone(), data: t.data.clone(), requires_grad: false, grad: None }
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool, op: Op) -> Var {
        self.push(
            Tensor { shape, data, requires_grad: requires, grad: None },
            op,
        )
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// A constant leaf: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn input(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = true;
        self.push(t, Op::Leaf)
    }

    /// Copies a parameter tensor onto the tape as a differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.input(Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: true,
            grad: None,
        })
    }

    /// Identity in value; blocks gradient flow entirely.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.detach(x);
        self.push(value, Op::StopGrad { x })
    }

    // ── elementwise and broadcast ───────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.out(shape, data, req, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.out(shape, data, req, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.out(shape, data, req, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.nodes[x.0].value.data.iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.out(shape, data, req, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1] {
            return Err(Error::BadShape {
                op: "add_scalar",
                msg: "bias must be a 1-element tensor".into(),
                shape: self.shape(s).to_vec(),
            });
        }
        let sv = self.nodes[s.0].value.data[0];
        let data = self.nodes[x.0].value.data.iter().map(|v| v + sv).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x) || self.requires(s);
        Ok(self.out(shape, data, req, Op::AddScalar { x, s }))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::ShapeMismatch { op: "add_row", lhs: xs, rhs: bs });
        }
        let (rows, cols) = (xs[0], xs[1]);
        let mut data = self.nodes[x.0].value.data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += self.nodes[b.0].value.data[c];
            }
        }
        let req = self.requires(x) || self.requires(b);
        Ok(self.out(xs, data, req, Op::AddRow { x, b }))
    }

    // ── contractions ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let crow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.out(vec![m, n], data, req, Op::Matmul { a, b }))
    }

    pub fn batched_contract_qk(&mut self, q: Var, k: Var) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::ShapeMismatch { op: "batched_contract_qk", lhs: sq, rhs: sk });
        }
        let (h, t, d) = (sq[0], sq[1], sq[2]);
        let m = sk[1];
        let qv = &self.nodes[q.0].value.data;
        let kv = &self.nodes[k.0].value.data;
        let mut data = vec![0.0; h * t * m];
        for hh in 0..h {
            for tt in 0..t {
                for mm in 0..m {
                    let mut acc = 0.0;
                    for dd in 0..d {
                        acc += qv[(hh * t + tt) * d + dd] * kv[(hh * m + mm) * d + dd];
                    }
                    data[(hh * t + tt) * m + mm] = acc;
                }
            }
        }
        let req = self.requires(q) || self.requires(k);
        Ok(self.out(vec![h, t, m], data, req, Op::BatchedQk { q, k }))
    }

    pub fn batched_contract_av(&mut self, w: Var, v: Var) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let sv = self.shape(v).to_vec();
        if sw.len() != 3 || sv.len() != 3 || sw[0] != sv[0] || sw[2] != sv[1] {
            return Err(Error::ShapeMismatch { op: "batched_contract_av", lhs: sw, rhs: sv });
        }
        let (h, t, m) = (sw[0], sw[1], sw[2]);
        let d = sv[2];
        let wv = &self.nodes[w.0].value.data;
        let vv = &self.nodes[v.0].value.data;
        let mut data = vec![0.0; h * t * d];
        for hh in 0..h {
            for tt in 0..t {
                for mm in 0..m {
                    let wcoef = wv[(hh * t + tt) * m + mm];
                    if wcoef == 0.0 {
                        continue;
                    }
                    for dd in 0..d {
                        data[(hh * t + tt) * d + dd] += wcoef * vv[(hh * m + mm) * d + dd];
                    }
                }
            }
        }
        let req = self.requires(w) || self.requires(v);
        Ok(self.out(vec![h, t, d], data, req, Op::BatchedAv { w, v }))
    }

    /// Content-position score: out[h,t,m] = q[h,t,:]·r[h, mem_len+t-m, :].
    /// Relative distances outside [0, P) contribute zero (those positions are
    /// in the future and get masked by the causal mask anyway).
    pub fn rel_scores_qr(&mut self, q: Var, r: Var, mem_len: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sr = self.shape(r).to_vec();
        if sq.len() != 3 || sr.len() != 3 || sq[0] != sr[0] || sq[2] != sr[2] {
            return Err(Error::ShapeMismatch { op: "rel_scores_qr", lhs: sq, rhs: sr });
        }
        let (h, t, d) = (sq[0], sq[1], sq[2]);
        let p = sr[1];
        let m = mem_len + t;
        if p != m {
            return Err(Error::BadShape {
                op: "rel_scores_qr",
                msg: format!("relative table must cover {} distances", m),
                shape: sr,
            });
        }
        let qv = &self.nodes[q.0].value.data;
        let rv = &self.nodes[r.0].value.data;
        let mut data = vec![0.0; h * t * m];
        for hh in 0..h {
            for tt in 0..t {
                for mm in 0..m {
                    let rel = mem_len as isize + tt as isize - mm as isize;
                    if rel < 0 {
                        continue;
                    }
                    let rel = rel as usize;
                    let mut acc = 0.0;
                    for dd in 0..d {
                        acc += qv[(hh * t + tt) * d + dd] * rv[(hh * p + rel) * d + dd];
                    }
                    data[(hh * t + tt) * m + mm] = acc;
                }
            }
        }
        let req = self.requires(q) || self.requires(r);
        Ok(self.out(vec![h, t, m], data, req, Op::RelQr { q, r, mem_len }))
    }

    /// Content bias score: out[h,t,m] = u[h,:]·k[h,m,:], broadcast over t.
    pub fn bias_scores_uk(&mut self, u: Var, k: Var, t_len: usize) -> Result<Var> {
        let su = self.shape(u).to_vec();
        let sk = self.shape(k).to_vec();
        if su.len() != 2 || sk.len() != 3 || su[0] != sk[0] || su[1] != sk[2] {
            return Err(Error::ShapeMismatch { op: "bias_scores_uk", lhs: su, rhs: sk });
        }
        let (h, m, d) = (sk[0], sk[1], sk[2]);
        let uv = &self.nodes[u.0].value.data;
        let kv = &self.nodes[k.0].value.data;
        let mut data = vec![0.0; h * t_len * m];
        for hh in 0..h {
            for mm in 0..m {
                let mut acc = 0.0;
                for dd in 0..d {
                    acc += uv[hh * d + dd] * kv[(hh * m + mm) * d + dd];
                }
                for tt in 0..t_len {
                    data[(hh * t_len + tt) * m + mm] = acc;
                }
            }
        }
        let req = self.requires(u) || self.requires(k);
        Ok(self.out(vec![h, t_len, m], data, req, Op::UBias { u, k, t_len }))
    }

    /// Position bias score: out[h,t,m] = v[h,:]·r[h, mem_len+t-m, :].
    pub fn bias_scores_vr(&mut self, v: Var, r: Var, mem_len: usize, t_len: usize) -> Result<Var> {
        let sv = self.shape(v).to_vec();
        let sr = self.shape(r).to_vec();
        if sv.len() != 2 || sr.len() != 3 || sv[0] != sr[0] || sv[1] != sr[2] {
            return Err(Error::ShapeMismatch { op: "bias_scores_vr", lhs: sv, rhs: sr });
        }
        let (h, p, d) = (sr[0], sr[1], sr[2]);
        let m = mem_len + t_len;
        if p != m {
            return Err(Error::BadShape {
                op: "bias_scores_vr",
                msg: format!("relative table must cover {} distances", m),
                shape: sr,
            });
        }
        let vv = &self.nodes[v.0].value.data;
        let rv = &self.nodes[r.0].value.data;
        let mut data = vec![0.0; h * t_len * m];
        for hh in 0..h {
            for tt in 0..t_len {
                for mm in 0..m {
                    let rel = mem_len as isize + tt as isize - mm as isize;
                    if rel < 0 {
                        continue;
                    }
                    let rel = rel as usize;
                    let mut acc = 0.0;
                    for dd in 0..d {
                        acc += vv[hh * d + dd] * rv[(hh * p + rel) * d + dd];
                    }
                    data[(hh * t_len + tt) * m + mm] = acc;
                }
            }
        }
        let req = self.requires(v) || self.requires(r);
        Ok(self.out(vec![h, t_len, m], data, req, Op::VRel { v, r, mem_len, t_len }))
    }

    // ── reshaping ───────────────────────────────────────────────────────

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[1] % heads != 0 {
            return Err(Error::BadShape {
                op: "split_heads",
                msg: format!("width must be divisible by {} heads", heads),
                shape: sx,
            });
        }
        let (t, hd) = (sx[0], sx[1]);
        let d = hd / heads;
        let xv = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; t * hd];
        for h in 0..heads {
            for tt in 0..t {
                for dd in 0..d {
                    data[(h * t + tt) * d + dd] = xv[tt * hd + h * d + dd];
                }
            }
        }
        let req = self.requires(x);
        Ok(self.out(vec![heads, t, d], data, req, Op::SplitHeads { x, heads }))
    }

    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::BadShape {
                op: "merge_heads",
                msg: "expected a [H, T, d] tensor".into(),
                shape: sx,
            });
        }
        let (h, t, d) = (sx[0], sx[1], sx[2]);
        let xv = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; t * h * d];
        for hh in 0..h {
            for tt in 0..t {
                for dd in 0..d {
                    data[tt * (h * d) + hh * d + dd] = xv[(hh * t + tt) * d + dd];
                }
            }
        }
        let req = self.requires(x);
        Ok(self.out(vec![t, h * d], data, req, Op::MergeHeads { x }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch { op: "concat_rows", lhs: sa, rhs: sb });
        }
        let mut data = self.nodes[a.0].value.data.clone();
        data.extend_from_slice(&self.nodes[b.0].value.data);
        let req = self.requires(a) || self.requires(b);
        Ok(self.out(vec![sa[0] + sb[0], sa[1]], data, req, Op::ConcatRows { a, b }))
    }

    // ── normalization and nonlinearities ────────────────────────────────

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sg = self.shape(gain).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 2 {
            return Err(Error::BadShape {
                op: "layer_norm",
                msg: "expected a [T, D] tensor".into(),
                shape: sx,
            });
        }
        if sg != [sx[1]] {
            return Err(Error::ShapeMismatch { op: "layer_norm", lhs: sx, rhs: sg });
        }
        if sb != [sx[1]] {
            return Err(Error::ShapeMismatch { op: "layer_norm", lhs: sx, rhs: sb });
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm: eps must be positive"));
        }
        let (t, dim) = (sx[0], sx[1]);
        let xv = &self.nodes[x.0].value.data;
        let gv = &self.nodes[gain.0].value.data;
        let bv = &self.nodes[bias.0].value.data;
        let mut data = vec![0.0; t * dim];
        for tt in 0..t {
            let row = &xv[tt * dim..(tt + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..dim {
                data[tt * dim + c] = gv[c] * (row[c] - mean) * inv + bv[c];
            }
        }
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.out(sx, data, req, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn masked_softmax(&mut self, logits: Var, mask: &[Vec<bool>]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 3 {
            return Err(Error::BadShape {
                op: "masked_softmax",
                msg: "expected a [H, T, M] tensor".into(),
                shape: sl,
            });
        }
        let (h, t, m) = (sl[0], sl[1], sl[2]);
        if mask.len() != t || mask.iter().any(|row| row.len() != m) {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: sl,
                rhs: vec![mask.len(), mask.first().map_or(0, |r| r.len())],
            });
        }
        let lv = &self.nodes[logits.0].value.data;
        let mut data = vec![0.0; h * t * m];
        let mut fully_masked: Vec<usize> = Vec::new();
        for tt in 0..t {
            if mask[tt].iter().all(|&allowed| !allowed) {
                fully_masked.push(tt);
                continue;
            }
            for hh in 0..h {
                let base = (hh * t + tt) * m;
                let mut maxv = f64::NEG_INFINITY;
                for mm in 0..m {
                    if mask[tt][mm] {
                        maxv = maxv.max(lv[base + mm]);
                    }
                }
                let mut denom = 0.0;
                for mm in 0..m {
                    if mask[tt][mm] {
                        let e = (lv[base + mm] - maxv).exp();
                        data[base + mm] = e;
                        denom += e;
                    }
                }
                for mm in 0..m {
                    if mask[tt][mm] {
                        data[base + mm] /= denom;
                    }
                }
            }
        }
        for tt in fully_masked {
            self.warnings
                .push(format!("masked_softmax: fully masked row t={}, output zeroed", tt));
        }
        let req = self.requires(logits);
        let mask = Arc::new(mask.to_vec());
        Ok(self.out(sl, data, req, Op::MaskedSoftmax { logits, mask }))
    }

    pub fn activation(&mut self, kind: ActKind, x: Var) -> Var {
        let data = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|&v| match kind {
                ActKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                ActKind::Tanh => v.tanh(),
                ActKind::Relu => v.max(0.0),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.out(shape, data, req, Op::Act { kind, x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(ActKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(ActKind::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(ActKind::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].value.data.iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.out(shape, data, req, Op::Exp { x })
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::BadShape {
                op: "log_softmax_rows",
                msg: "expected a [R, C] tensor".into(),
                shape: sx,
            });
        }
        let (r, c) = (sx[0], sx[1]);
        let xv = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; r * c];
        for rr in 0..r {
            let row = &xv[rr * c..(rr + 1) * c];
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = maxv + row.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln();
            for cc in 0..c {
                data[rr * c + cc] = row[cc] - lse;
            }
        }
        let req = self.requires(x);
        Ok(self.out(sx, data, req, Op::LogSoftmaxRows { x }))
    }

    pub fn row_pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || idx.len() != sx[0] {
            return Err(Error::BadShape {
                op: "row_pick",
                msg: format!("need one index per row, got {}", idx.len()),
                shape: sx,
            });
        }
        let (r, c) = (sx[0], sx[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::contract(format!("row_pick: index {} out of range {}", bad, c)));
        }
        let xv = &self.nodes[x.0].value.data;
        let data = (0..r).map(|rr| xv[rr * c + idx[rr]]).collect();
        let req = self.requires(x);
        Ok(self.out(vec![r], data, req, Op::RowPick { x, idx: Arc::new(idx.to_vec()) }))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::BadShape {
                op: "gather_rows",
                msg: "expected a [V, D] table".into(),
                shape: st,
            });
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("gather_rows: index {} out of range {}", bad, v)));
        }
        let tv = &self.nodes[table.0].value.data;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let req = self.requires(table);
        Ok(self.out(vec![idx.len(), d], data, req, Op::GatherRows { table, idx: Arc::new(idx.to_vec()) }))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        let req = self.requires(x);
        self.out(vec![1], vec![s], req, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.data.len().max(1);
        let s: f64 = self.nodes[x.0].value.data.iter().sum::<f64>() / n as f64;
        let req = self.requires(x);
        self.out(vec![1], vec![s], req, Op::Mean { x })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Zero out all accumulated gradients (kept allocated where present).
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = &mut node.value.grad {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every reachable
    /// tensor with `requires_grad`; tensors behind stop-gradient boundaries
    /// (and pure constants) stay `None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.accum(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].value.grad.is_none() || !self.nodes[i].value.requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].value.grad.clone().expect("grad present");
            self.adjoint(i, &op, &g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, g: &[f64]) {
        if !self.nodes[v.0].value.requires_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        let grad = node
            .value
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.data.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    fn adjoint(&mut self, out_idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf | Op::StopGrad { .. } => {}
            Op::Add { a, b } => {
                self.accum(*a, g);
                self.accum(*b, g);
            }
            Op::Sub { a, b } => {
                self.accum(*a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accum(*b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].value.data)
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    self.accum(a, &da);
                }
                if self.requires(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value.data)
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.accum(b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                self.accum(*x, &dx);
            }
            Op::AddScalar { x, s } => {
                self.accum(*x, g);
                let ds = [g.iter().sum::<f64>()];
                self.accum(*s, &ds);
            }
            Op::AddRow { x, b } => {
                let (x, b) = (*x, *b);
                self.accum(x, g);
                if self.requires(b) {
                    let cols = self.shape(b)[0];
                    let mut db = vec![0.0; cols];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % cols] += gi;
                    }
                    self.accum(b, &db);
                }
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.requires(a) {
                    // dA = G · Bᵀ
                    let bv = &self.nodes[b.0].value.data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * bv[p * n + j];
                            }
                        }
                    }
                    self.accum(a, &da);
                }
                if self.requires(b) {
                    // dB = Aᵀ · G
                    let av = &self.nodes[a.0].value.data;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    self.accum(b, &db);
                }
            }
            Op::BatchedQk { q, k } => {
                let (q, k) = (*q, *k);
                let (h, t, d) = {
                    let s = self.shape(q);
                    (s[0], s[1], s[2])
                };
                let m = self.shape(k)[1];
                if self.requires(q) {
                    let kv = &self.nodes[k.0].value.data;
                    let mut dq = vec![0.0; h * t * d];
                    for hh in 0..h {
                        for tt in 0..t {
                            for mm in 0..m {
                                let gv = g[(hh * t + tt) * m + mm];
                                for dd in 0..d {
                                    dq[(hh * t + tt) * d + dd] += gv * kv[(hh * m + mm) * d + dd];
                                }
                            }
                        }
                    }
                    self.accum(q, &dq);
                }
                if self.requires(k) {
                    let qv = &self.nodes[q.0].value.data;
                    let mut dk = vec![0.0; h * m * d];
                    for hh in 0..h {
                        for tt in 0..t {
                            for mm in 0..m {
                                let gv = g[(hh * t + tt) * m + mm];
                                for dd in 0..d {
                                    dk[(hh * m + mm) * d + dd] += gv * qv[(hh * t + tt) * d + dd];
                                }
                            }
                        }
                    }
                    self.accum(k, &dk);
                }
            }
            Op::BatchedAv { w, v } => {
                let (w, v) = (*w, *v);
                let (h, t, m) = {
                    let s = self.shape(w);
                    (s[0], s[1], s[2])
                };
                let d = self.shape(v)[2];
                if self.requires(w) {
                    let vv = &self.nodes[v.0].value.data;
                    let mut dw = vec![0.0; h * t * m];
                    for hh in 0..h {
                        for tt in 0..t {
                            for mm in 0..m {
                                let mut acc = 0.0;
                                for dd in 0..d {
                                    acc += g[(hh * t + tt) * d + dd] * vv[(hh * m + mm) * d + dd];
                                }
                                dw[(hh * t + tt) * m + mm] = acc;
                            }
                        }
                    }
                    self.accum(w, &dw);
                }
                if self.requires(v) {
                    let wv = &self.nodes[w.0].value.data;
                    let mut dv = vec![0.0; h * m * d];
                    for hh in 0..h {
                        for tt in 0..t {
                            for mm in 0..m {
                                let wc = wv[(hh * t + tt) * m + mm];
                                if wc == 0.0 {
                                    continue;
                                }
                                for dd in 0..d {
                                    dv[(hh * m + mm) * d + dd] += wc * g[(hh * t + tt) * d + dd];
                                }
                            }
                        }
                    }
                    self.accum(v, &dv);
                }
            }
            Op::RelQr { q, r, mem_len } => {
                let (q, r, mem_len) = (*q, *r, *mem_len);
                let (h, t, d) = {
                    let s = self.shape(q);
                    (s[0], s[1], s[2])
                };
                let p = self.shape(r)[1];
                let m = mem_len + t;
                let mut dq = vec![0.0; h * t * d];
                let mut dr = vec![0.0; h * p * d];
                {
                    let qv = &self.nodes[q.0].value.data;
                    let rv = &self.nodes[r.0].value.data;
                    for hh in 0..h {
                        for tt in 0..t {
                            for mm in 0..m {
                                let rel = mem_len as isize + tt as isize - mm as isize;
                                if rel < 0 {
                                    continue;
                                }
                                let rel = rel as usize;
                                let gv = g[(hh * t + tt) * m + mm];
                                if gv == 0.0 {
                                    continue;
                                }
                                for dd in 0..d {
                                    dq[(hh * t + tt) * d + dd] += gv * rv[(hh * p + rel) * d + dd];
                                    dr[(hh * p + rel) * d + dd] += gv * qv[(hh * t + tt) * d + dd];
                                }
                            }
                        }
                    }
                }
                if self.requires(q) {
                    self.accum(q, &dq);
                }
                if self.requires(r) {
                    self.accum(r, &dr);
                }
            }
            Op::UBias { u, k, t_len } => {
                let (u, k, t_len) = (*u, *k, *t_len);
                let (h, m, d) = {
                    let s = self.shape(k);
                    (s[0], s[1], s[2])
                };
                if self.requires(u) {
                    let kv = &self.nodes[k.0].value.data;
                    let mut du = vec![0.0; h * d];
                    for hh in 0..h {
                        for tt in 0..t_len {
                            for mm in 0..m {
                                let gv = g[(hh * t_len + tt) * m + mm];
                                for dd in 0..d {
                                    du[hh * d + dd] += gv * kv[(hh * m + mm) * d + dd];
                                }
                            }
                        }
                    }
                    self.accum(u, &du);
                }
                if self.requires(k) {
                    let uv = &self.nodes[u.0].value.data;
                    let mut dk = vec![0.0; h * m * d];
                    for hh in 0..h {
                        for tt in 0..t_len {
                            for mm in 0..m {
                                let gv = g[(hh * t_len + tt) * m + mm];
                                for dd in 0..d {
                                    dk[(hh * m + mm) * d + dd] += gv * uv[hh * d + dd];
                                }
                            }
                        }
                    }
                    self.accum(k, &dk);
                }
            }
            Op::VRel { v, r, mem_len, t_len } => {
                let (v, r, mem_len, t_len) = (*v, *r, *mem_len, *t_len);
                let (h, p, d) = {
                    let s = self.shape(r);
                    (s[0], s[1], s[2])
                };
                let m = mem_len + t_len;
                let mut dv = vec![0.0; h * d];
                let mut dr = vec![0.0; h * p * d];
                {
                    let vv = &self.nodes[v.0].value.data;
                    let rv = &self.nodes[r.0].value.data;
                    for hh in 0..h {
                        for tt in 0..t_len {
                            for mm in 0..m {
                                let rel = mem_len as isize + tt as isize - mm as isize;
                                if rel < 0 {
                                    continue;
                                }
                                let rel = rel as usize;
                                let gv = g[(hh * t_len + tt) * m + mm];
                                if gv == 0.0 {
                                    continue;
                                }
                                for dd in 0..d {
                                    dv[hh * d + dd] += gv * rv[(hh * p + rel) * d + dd];
                                    dr[(hh * p + rel) * d + dd] += gv * vv[hh * d + dd];
                                }
                            }
                        }
                    }
                }
                if self.requires(v) {
                    self.accum(v, &dv);
                }
                if self.requires(r) {
                    self.accum(r, &dr);
                }
            }
            Op::SplitHeads { x, heads } => {
                let (x, heads) = (*x, *heads);
                let (t, hd) = (self.shape(x)[0], self.shape(x)[1]);
                let d = hd / heads;
                let mut dx = vec![0.0; t * hd];
                for h in 0..heads {
                    for tt in 0..t {
                        for dd in 0..d {
                            dx[tt * hd + h * d + dd] += g[(h * t + tt) * d + dd];
                        }
                    }
                }
                self.accum(x, &dx);
            }
            Op::MergeHeads { x } => {
                let x = *x;
                let (h, t, d) = {
                    let s = self.shape(x);
                    (s[0], s[1], s[2])
                };
                let mut dx = vec![0.0; h * t * d];
                for hh in 0..h {
                    for tt in 0..t {
                        for dd in 0..d {
                            dx[(hh * t + tt) * d + dd] += g[tt * (h * d) + hh * d + dd];
                        }
                    }
                }
                self.accum(x, &dx);
            }
            Op::ConcatRows { a, b } => {
                let (a, b) = (*a, *b);
                let na = self.nodes[a.0].value.numel();
                self.accum(a, &g[..na]);
                self.accum(b, &g[na..]);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let (t, dim) = (self.shape(x)[0], self.shape(x)[1]);
                let mut dx = vec![0.0; t * dim];
                let mut dgain = vec![0.0; dim];
                let mut dbias = vec![0.0; dim];
                {
                    let xv = &self.nodes[x.0].value.data;
                    let gv = &self.nodes[gain.0].value.data;
                    for tt in 0..t {
                        let row = &xv[tt * dim..(tt + 1) * dim];
                        let grow = &g[tt * dim..(tt + 1) * dim];
                        let mean = row.iter().sum::<f64>() / dim as f64;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        // xhat_c = (x_c - mean) * inv
                        let mut sum_gg = 0.0; // sum_c grad_c * gain_c
                        let mut sum_ggx = 0.0; // sum_c grad_c * gain_c * xhat_c
                        for c in 0..dim {
                            let xhat = (row[c] - mean) * inv;
                            sum_gg += grow[c] * gv[c];
                            sum_ggx += grow[c] * gv[c] * xhat;
                            dgain[c] += grow[c] * xhat;
                            dbias[c] += grow[c];
                        }
                        let n = dim as f64;
                        for c in 0..dim {
                            let xhat = (row[c] - mean) * inv;
                            dx[tt * dim + c] +=
                                inv * (grow[c] * gv[c] - sum_gg / n - xhat * sum_ggx / n);
                        }
                    }
                }
                if self.requires(x) {
                    self.accum(x, &dx);
                }
                if self.requires(gain) {
                    self.accum(gain, &dgain);
                }
                if self.requires(bias) {
                    self.accum(bias, &dbias);
                }
            }
            Op::MaskedSoftmax { logits, mask } => {
                let logits = *logits;
                let (h, t, m) = {
                    let s = self.shape(logits);
                    (s[0], s[1], s[2])
                };
                let yv = &self.nodes[out_idx].value.data;
                let mut dl = vec![0.0; h * t * m];
                for hh in 0..h {
                    for tt in 0..t {
                        let base = (hh * t + tt) * m;
                        let mut dot = 0.0;
                        for mm in 0..m {
                            dot += g[base + mm] * yv[base + mm];
                        }
                        for mm in 0..m {
                            if mask[tt][mm] {
                                dl[base + mm] = yv[base + mm] * (g[base + mm] - dot);
                            }
                        }
                    }
                }
                self.accum(logits, &dl);
            }
            Op::Act { kind, x } => {
                let x = *x;
                let yv = &self.nodes[out_idx].value.data;
                let xv = &self.nodes[x.0].value.data;
                let dx: Vec<f64> = match kind {
                    ActKind::Sigmoid => yv
                        .iter()
                        .zip(g)
                        .map(|(y, gi)| gi * y * (1.0 - y))
                        .collect(),
                    ActKind::Tanh => yv.iter().zip(g).map(|(y, gi)| gi * (1.0 - y * y)).collect(),
                    ActKind::Relu => xv
                        .iter()
                        .zip(g)
                        .map(|(xi, gi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                };
                self.accum(x, &dx);
            }
            Op::Exp { x } => {
                let x = *x;
                let yv = &self.nodes[out_idx].value.data;
                let dx: Vec<f64> = yv.iter().zip(g).map(|(y, gi)| gi * y).collect();
                self.accum(x, &dx);
            }
            Op::LogSoftmaxRows { x } => {
                let x = *x;
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let yv = &self.nodes[out_idx].value.data;
                let mut dx = vec![0.0; r * c];
                for rr in 0..r {
                    let gsum: f64 = g[rr * c..(rr + 1) * c].iter().sum();
                    for cc in 0..c {
                        let p = yv[rr * c + cc].exp();
                        dx[rr * c + cc] = g[rr * c + cc] - p * gsum;
                    }
                }
                self.accum(x, &dx);
            }
            Op::RowPick { x, idx } => {
                let x = *x;
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let mut dx = vec![0.0; r * c];
                for rr in 0..r {
                    dx[rr * c + idx[rr]] += g[rr];
                }
                self.accum(x, &dx);
            }
            Op::GatherRows { table, idx } => {
                let table = *table;
                let (v, d) = (self.shape(table)[0], self.shape(table)[1]);
                let mut dt = vec![0.0; v * d];
                for (t, &i) in idx.iter().enumerate() {
                    for dd in 0..d {
                        dt[i * d + dd] += g[t * d + dd];
                    }
                }
                self.accum(table, &dt);
            }
            Op::Sum { x } => {
                let x = *x;
                let n = self.nodes[x.0].value.numel();
                let dx = vec![g[0]; n];
                self.accum(x, &dx);
            }
            Op::Mean { x } => {
                let x = *x;
                let n = self.nodes[x.0].value.numel();
                let dx = vec![g[0] / n as f64; n];
                self.accum(x, &dx);
            }
        }
    }
}
