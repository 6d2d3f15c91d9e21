//! Wengert tape: define-by-run reverse-mode AD over [`Tensor`] values.
//!
//! The tape is rebuilt every forward pass (pointer targets change step to
//! step, so a static graph buys nothing). Nodes are stored in recording
//! order; every input id precedes its consumer, and `backward` walks the
//! list in exact reverse order. Gradients accumulate until `zero_grads`.
//!
//! A tape is strictly single-threaded. Kernels inside an op may split work
//! across rows (see [`crate::kernels`]), which never changes results.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{require_same_shape, Tensor};

/// Handle to a node on a tape. Only meaningful for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Raw index handle; exists for diagnostics that sweep a whole tape.
    pub fn from_raw(index: usize) -> Self {
        Var(index)
    }

    pub fn index(&self) -> usize {
        self.0
    }
}

/// Per-position candidate lists, row-padded to a fixed budget `k`.
///
/// `ids` holds global target positions; slots past `len[i]` are padding and
/// take no part in scoring or aggregation. Row order is the truncation
/// priority order, except exhaustive tables which are ascending.
#[derive(Debug, Clone)]
pub struct CandidateTable {
    n: usize,
    k: usize,
    ids: Vec<u32>,
    len: Vec<u32>,
}

impl CandidateTable {
    pub fn from_rows(rows: &[Vec<u32>], k: usize) -> Self {
        let n = rows.len();
        let mut ids = vec![u32::MAX; n * k];
        let mut len = vec![0u32; n];
        for (i, row) in rows.iter().enumerate() {
            assert!(row.len() <= k, "candidate row exceeds budget");
            ids[i * k..i * k + row.len()].copy_from_slice(row);
            len[i] = row.len() as u32;
        }
        CandidateTable { n, k, ids, len }
    }

    /// All positions `0..=i` (causal) or `0..n` per row, in ascending order.
    /// Reproduces dense scoring exactly when fed through the candidate path.
    pub fn exhaustive(n: usize, causal: bool) -> Self {
        let rows: Vec<Vec<u32>> = (0..n)
            .map(|i| {
                let hi = if causal { i + 1 } else { n };
                (0..hi as u32).collect()
            })
            .collect();
        Self::from_rows(&rows, n)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.k..i * self.k + self.len[i] as usize]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// b is broadcast over leading dims of a (b.shape is a trailing suffix).
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulBroadcast {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    SoftmaxLast {
        x: Var,
        cols: usize,
    },
    Scale {
        x: Var,
        c: f32,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        inv_std: Vec<f32>,
        mean: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        mask: Vec<bool>,
        probs: Vec<f32>,
        count: usize,
    },
    /// s[i,c] = scale * dot(q_i, k_{ids[i,c]}); padding slots read -1e9.
    CandidateScores {
        q: Var,
        k: Var,
        cands: Rc<CandidateTable>,
        scale: f32,
    },
    /// z_i = sum_c alpha[i,c] * h_{ids[i,c]} (dense when cands is None).
    SoftAggregate {
        alpha: Var,
        h: Var,
        cands: Option<Rc<CandidateTable>>,
    },
    /// Fused single-head attention: softmax(scale * q kᵀ + mask) v.
    /// Keeps the N×N probabilities out of the node arena.
    AttentionHead {
        q: Var,
        k: Var,
        v: Var,
        causal: bool,
        scale: f32,
        alpha: Vec<f32>,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Masked score constant: saturates f32 softmax to exactly zero without
/// producing NaN the way -inf would.
pub const MASKED_SCORE: f32 = -1e9;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, op: &'static str, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                op,
                index: v.0,
                bound: self.nodes.len(),
            })
        }
    }

    /// Differentiable leaf (parameters, inputs under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable leaf (data, masks, noise, encodings of discrete
    /// indices).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Reset every accumulated gradient.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", av.shape(), bv.shape()),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0f32; m * n];
        kernels::matmul_acc(&mut out, av.data(), bv.data(), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b }))
    }

    /// Elementwise add; `b` may also be a trailing-suffix shape broadcast
    /// over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b)
    }

    /// Elementwise multiply, same broadcast rule as `add`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b)
    }

    fn binary_elementwise(&mut self, which: &'static str, a: Var, b: Var) -> Result<Var> {
        self.check(which, a)?;
        self.check(which, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let same = av.shape() == bv.shape();
        let suffix = !same
            && av.shape().len() > bv.shape().len()
            && av.shape().ends_with(bv.shape())
            && av.numel() % bv.numel() == 0;
        if !same && !suffix {
            return Err(Error::ShapeMismatch {
                op: which,
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let bl = bv.numel();
        let mut out = av.data().to_vec();
        match which {
            "add" => {
                for (chunk, _) in out.chunks_mut(bl).zip(0..) {
                    for (o, x) in chunk.iter_mut().zip(bv.data()) {
                        *o += x;
                    }
                }
            }
            _ => {
                for (chunk, _) in out.chunks_mut(bl).zip(0..) {
                    for (o, x) in chunk.iter_mut().zip(bv.data()) {
                        *o *= x;
                    }
                }
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.needs(a) || self.needs(b);
        let op = match (which, same) {
            ("add", true) => Op::Add { a, b },
            ("add", false) => Op::AddBroadcast { a, b },
            (_, true) => Op::Mul { a, b },
            (_, false) => Op::MulBroadcast { a, b },
        };
        Ok(self.push(Tensor::new(shape, out)?, rg, op))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check("relu", x)?;
        let xv = &self.nodes[x.0].value;
        let out: Vec<f32> = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = xv.shape().to_vec();
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Relu { x }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check("sigmoid", x)?;
        let xv = &self.nodes[x.0].value;
        let out: Vec<f32> = xv.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = xv.shape().to_vec();
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Sigmoid { x }))
    }

    /// Softmax over the last dimension, max-subtracted for stability.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        self.check("softmax_last", x)?;
        let xv = &self.nodes[x.0].value;
        let cols = xv.last_dim();
        let mut out = xv.data().to_vec();
        kernels::softmax_rows(&mut out, cols);
        let shape = xv.shape().to_vec();
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::SoftmaxLast { x, cols }))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.check("scale", x)?;
        let xv = &self.nodes[x.0].value;
        let out: Vec<f32> = xv.data().iter().map(|&v| v * c).collect();
        let shape = xv.shape().to_vec();
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Scale { x, c }))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        self.check("transpose", x)?;
        let xv = &self.nodes[x.0].value;
        if xv.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("expected 2-D, got {:?}", xv.shape()),
            });
        }
        let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
        let out = kernels::transpose(xv.data(), rows, cols);
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(vec![cols, rows], out)?, rg, Op::Transpose { x, rows, cols }))
    }

    /// Row gather from a [rows, d] table; backward scatter-adds.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        self.check("gather", table)?;
        let tv = &self.nodes[table.0].value;
        if tv.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                detail: format!("table must be 2-D, got {:?}", tv.shape()),
            });
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "gather",
                    index: id as usize,
                    bound: rows,
                });
            }
            out.extend_from_slice(tv.row(id as usize));
        }
        let rg = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-row layer normalization with population variance, then gamma ⊙ x̂ + beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        self.check("layer_norm", x)?;
        let xv = &self.nodes[x.0].value;
        let d = xv.last_dim();
        let rows = xv.leading();
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if gv.numel() != d || bv.numel() != d || d == 0 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            });
        }
        let mut out = vec![0.0f32; xv.numel()];
        let mut means = vec![0.0f32; rows];
        let mut inv_stds = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv;
            let orow = &mut out[r * d..(r + 1) * d];
            for ((o, &v), (&g, &b)) in orow
                .iter_mut()
                .zip(row.iter())
                .zip(gv.data().iter().zip(bv.data().iter()))
            {
                *o = g * (v - mean) * inv + b;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
                inv_std: inv_stds,
                mean: means,
            },
        ))
    }

    /// Mean over masked positions of -log softmax(logits)[target].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        self.check("cross_entropy", logits)?;
        let lv = &self.nodes[logits.0].value;
        let vocab = lv.last_dim();
        let rows = lv.leading();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{rows} rows, {} targets, {} mask", targets.len(), mask.len()),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let mut probs = lv.data().to_vec();
        kernels::softmax_rows(&mut probs, vocab);
        let mut loss = 0.0f64;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r] as usize;
            if t >= vocab {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: vocab,
                });
            }
            // log-sum-exp form; stable even for saturated logits
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse: f32 = row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln();
            loss += -((row[t] - max - lse) as f64);
        }
        let loss = (loss / count as f64) as f32;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Scaled dot-product scores over per-row candidate sets.
    /// Output is [n, k] with padding slots fixed at [`MASKED_SCORE`].
    pub fn candidate_scores(
        &mut self,
        q: Var,
        k: Var,
        cands: Rc<CandidateTable>,
        scale: f32,
    ) -> Result<Var> {
        self.check("candidate_scores", q)?;
        self.check("candidate_scores", k)?;
        debug_assert_ne!(q.0, k.0);
        let (qv, kv) = (&self.nodes[q.0].value, &self.nodes[k.0].value);
        require_same_shape("candidate_scores", qv, kv)?;
        let n = qv.leading();
        if n != cands.n() {
            return Err(Error::ShapeMismatch {
                op: "candidate_scores",
                detail: format!("{n} rows vs {} candidate rows", cands.n()),
            });
        }
        let width = cands.k();
        let mut out = vec![MASKED_SCORE; n * width];
        for i in 0..n {
            let qrow = qv.row(i);
            let orow = &mut out[i * width..];
            for (c, &j) in cands.row(i).iter().enumerate() {
                orow[c] = scale * kernels::dot(qrow, kv.row(j as usize));
            }
        }
        let rg = self.needs(q) || self.needs(k);
        Ok(self.push(
            Tensor::new(vec![n, width], out)?,
            rg,
            Op::CandidateScores { q, k, cands, scale },
        ))
    }

    /// Convex aggregation of rows of `h` under `alpha`.
    ///
    /// With a candidate table, `alpha` is [n, k] aligned to the table slots;
    /// without, `alpha` is a dense [n, n] row-stochastic matrix. Zero weights
    /// are skipped, so a padded/masked slot contributes nothing — bitwise.
    pub fn soft_aggregate(
        &mut self,
        alpha: Var,
        h: Var,
        cands: Option<Rc<CandidateTable>>,
    ) -> Result<Var> {
        self.check("soft_aggregate", alpha)?;
        self.check("soft_aggregate", h)?;
        debug_assert_ne!(alpha.0, h.0);
        let (av, hv) = (&self.nodes[alpha.0].value, &self.nodes[h.0].value);
        let n = hv.leading();
        let d = hv.last_dim();
        let width = av.last_dim();
        let ok = match &cands {
            Some(t) => av.leading() == n && t.n() == n && width == t.k(),
            None => av.leading() == n && width == n,
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "soft_aggregate",
                detail: format!("alpha {:?} vs h {:?}", av.shape(), hv.shape()),
            });
        }
        let mut out = vec![0.0f32; n * d];
        for i in 0..n {
            let arow = av.row(i);
            let orow = &mut out[i * d..(i + 1) * d];
            match &cands {
                Some(t) => {
                    for (c, &j) in t.row(i).iter().enumerate() {
                        let a = arow[c];
                        if a != 0.0 {
                            kernels::axpy(orow, a, hv.row(j as usize));
                        }
                    }
                }
                None => {
                    for (j, &a) in arow.iter().enumerate() {
                        if a != 0.0 {
                            kernels::axpy(orow, a, hv.row(j));
                        }
                    }
                }
            }
        }
        let rg = self.needs(alpha) || self.needs(h);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            rg,
            Op::SoftAggregate { alpha, h, cands },
        ))
    }

    /// Fused scaled-dot-product attention for one head.
    pub fn attention_head(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        self.check("attention_head", q)?;
        self.check("attention_head", k)?;
        self.check("attention_head", v)?;
        debug_assert!(q.0 != k.0 && k.0 != v.0 && q.0 != v.0);
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        require_same_shape("attention_head", qv, kv)?;
        require_same_shape("attention_head", kv, vv)?;
        let n = qv.leading();
        let dh = qv.last_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut alpha = vec![0.0f32; n * n];
        let mut out = vec![0.0f32; n * dh];
        for i in 0..n {
            let qrow = qv.row(i);
            let srow = &mut alpha[i * n..(i + 1) * n];
            for j in 0..n {
                srow[j] = if causal && j > i {
                    MASKED_SCORE
                } else {
                    scale * kernels::dot(qrow, kv.row(j))
                };
            }
            kernels::softmax_rows(srow, n);
            let orow = &mut out[i * dh..(i + 1) * dh];
            for (j, &a) in srow.iter().enumerate() {
                if a != 0.0 {
                    kernels::axpy(orow, a, vv.row(j));
                }
            }
        }
        let rg = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(vec![n, dh], out)?,
            rg,
            Op::AttentionHead {
                q,
                k,
                v,
                causal,
                scale,
                alpha,
            },
        ))
    }

    /// Concatenate along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: "no parts".into(),
            });
        }
        for &p in parts {
            self.check("concat", p)?;
        }
        let rows = self.nodes[parts[0].0].value.leading();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.leading() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: "leading dims differ".into(),
                });
            }
            widths.push(pv.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(self.nodes[p.0].value.row(r));
                off += w;
            }
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check("sum", x)?;
        let s: f32 = self.nodes[x.0].value.data().iter().sum();
        let rg = self.needs(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum { x }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss, visiting nodes in exact reverse
    /// recording order. Each call propagates a fresh seed of 1.0 and adds
    /// the result into the leaves' gradients, so repeated calls without
    /// [`Tape::zero_grads`] accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check("backward", loss)?;
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                numel,
            });
        }
        let mut prop: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        prop[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = prop[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            vjp(&self.nodes, &mut prop, id, &g);
            if matches!(self.nodes[id].op, Op::Leaf) {
                let numel = self.nodes[id].value.numel();
                let acc = self.nodes[id]
                    .grad
                    .get_or_insert_with(|| vec![0.0f32; numel]);
                kernels::axpy(acc, 1.0, &g);
            }
        }
        Ok(())
    }

    // ── f64 replay ───────────────────────────────────────────────────

    /// Re-evaluate the recorded graph up to `output` in f64, with chosen
    /// leaf coordinates overridden.
    ///
    /// Structure recorded during the f32 forward pass — gather indices,
    /// candidate tables, masks, every discrete selection — is kept frozen,
    /// so the replayed function is exactly the branch the backward pass
    /// differentiates. This is the evaluation half of the finite-difference
    /// oracle; it shares no arithmetic with the f32 forward or backward
    /// code.
    pub fn replay_f64(&self, output: Var, overrides: &[(Var, usize, f64)]) -> Result<Vec<f64>> {
        self.check("replay_f64", output)?;
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(output.0 + 1);
        for id in 0..=output.0 {
            let node = &self.nodes[id];
            let mut v = replay_op(&self.nodes, &vals, id)?;
            if matches!(node.op, Op::Leaf) {
                for &(var, coord, value) in overrides {
                    if var.0 == id {
                        v[coord] = value;
                    }
                }
            }
            vals.push(v);
        }
        Ok(vals.pop().expect("output evaluated"))
    }
}

fn replay_op(nodes: &[Node], vals: &[Vec<f64>], id: usize) -> Result<Vec<f64>> {
    let node = &nodes[id];
    let out = match &node.op {
        Op::Leaf => node.value.data().iter().map(|&v| v as f64).collect(),
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            let (av, bv) = (&vals[a.0], &vals[b.0]);
            let mut out = vec![0.0f64; m * n];
            for i in 0..m {
                for kk in 0..k {
                    let x = av[i * k + kk];
                    for j in 0..n {
                        out[i * n + j] += x * bv[kk * n + j];
                    }
                }
            }
            out
        }
        Op::Add { a, b } => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x + y).collect(),
        Op::AddBroadcast { a, b } => {
            let bl = vals[b.0].len();
            let mut out = vals[a.0].clone();
            for chunk in out.chunks_mut(bl) {
                for (o, y) in chunk.iter_mut().zip(&vals[b.0]) {
                    *o += y;
                }
            }
            out
        }
        Op::Mul { a, b } => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x * y).collect(),
        Op::MulBroadcast { a, b } => {
            let bl = vals[b.0].len();
            let mut out = vals[a.0].clone();
            for chunk in out.chunks_mut(bl) {
                for (o, y) in chunk.iter_mut().zip(&vals[b.0]) {
                    *o *= y;
                }
            }
            out
        }
        Op::Relu { x } => vals[x.0].iter().map(|&v| v.max(0.0)).collect(),
        Op::Sigmoid { x } => vals[x.0].iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        Op::SoftmaxLast { x, cols } => {
            let mut out = vals[x.0].clone();
            for row in out.chunks_mut(*cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            out
        }
        Op::Scale { x, c } => vals[x.0].iter().map(|&v| v * *c as f64).collect(),
        Op::Transpose { x, rows, cols } => {
            let src = &vals[x.0];
            let mut out = vec![0.0f64; src.len()];
            for r in 0..*rows {
                for c in 0..*cols {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
            out
        }
        Op::Gather { table, ids } => {
            let d = nodes[table.0].value.last_dim();
            let src = &vals[table.0];
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                out.extend_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
            }
            out
        }
        Op::LayerNorm { x, gamma, beta, eps, .. } => {
            let d = nodes[gamma.0].value.numel();
            let (gv, bv) = (&vals[gamma.0], &vals[beta.0]);
            let src = &vals[x.0];
            let mut out = vec![0.0f64; src.len()];
            for (orow, row) in out.chunks_mut(d).zip(src.chunks(d)) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + *eps as f64).sqrt();
                for ((o, &v), (&g, &b)) in
                    orow.iter_mut().zip(row).zip(gv.iter().zip(bv.iter()))
                {
                    *o = g * (v - mean) * inv + b;
                }
            }
            out
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            count,
            ..
        } => {
            let vocab = nodes[logits.0].value.last_dim();
            let src = &vals[logits.0];
            let mut loss = 0.0f64;
            for (r, (&t, &m)) in targets.iter().zip(mask.iter()).enumerate() {
                if !m {
                    continue;
                }
                let row = &src[r * vocab..(r + 1) * vocab];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                loss += -(row[t as usize] - max - lse);
            }
            vec![loss / *count as f64]
        }
        Op::CandidateScores { q, k, cands, scale } => {
            let d = nodes[q.0].value.last_dim();
            let width = cands.k();
            let (qv, kv) = (&vals[q.0], &vals[k.0]);
            let mut out = vec![MASKED_SCORE as f64; cands.n() * width];
            for i in 0..cands.n() {
                for (c, &j) in cands.row(i).iter().enumerate() {
                    let j = j as usize;
                    let mut acc = 0.0f64;
                    for f in 0..d {
                        acc += qv[i * d + f] * kv[j * d + f];
                    }
                    out[i * width + c] = *scale as f64 * acc;
                }
            }
            out
        }
        Op::SoftAggregate { alpha, h, cands } => {
            let d = nodes[h.0].value.last_dim();
            let n = nodes[h.0].value.leading();
            let width = nodes[alpha.0].value.last_dim();
            let (av, hv) = (&vals[alpha.0], &vals[h.0]);
            let mut out = vec![0.0f64; n * d];
            for i in 0..n {
                let slots: Vec<usize> = match cands {
                    Some(t) => t.row(i).iter().map(|&j| j as usize).collect(),
                    None => (0..width).collect(),
                };
                for (c, &j) in slots.iter().enumerate() {
                    let a = av[i * width + c];
                    for f in 0..d {
                        out[i * d + f] += a * hv[j * d + f];
                    }
                }
            }
            out
        }
        Op::AttentionHead {
            q,
            k,
            v,
            causal,
            scale,
            ..
        } => {
            let n = nodes[q.0].value.leading();
            let dh = nodes[q.0].value.last_dim();
            let (qv, kv, vv) = (&vals[q.0], &vals[k.0], &vals[v.0]);
            let mut out = vec![0.0f64; n * dh];
            let mut srow = vec![0.0f64; n];
            for i in 0..n {
                for j in 0..n {
                    srow[j] = if *causal && j > i {
                        MASKED_SCORE as f64
                    } else {
                        let mut acc = 0.0f64;
                        for f in 0..dh {
                            acc += qv[i * dh + f] * kv[j * dh + f];
                        }
                        *scale as f64 * acc
                    };
                }
                let max = srow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in srow.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for j in 0..n {
                    let a = srow[j] / sum;
                    for f in 0..dh {
                        out[i * dh + f] += a * vv[j * dh + f];
                    }
                }
            }
            out
        }
        Op::Concat { parts, widths } => {
            let rows = node.value.leading();
            let total: usize = widths.iter().sum();
            let mut out = vec![0.0f64; rows * total];
            for r in 0..rows {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths.iter()) {
                    out[r * total + off..r * total + off + w]
                        .copy_from_slice(&vals[p.0][r * w..(r + 1) * w]);
                    off += w;
                }
            }
            out
        }
        Op::Sum { x } => vec![vals[x.0].iter().sum()],
    };
    Ok(out)
}

fn take_grad(nodes: &[Node], prop: &mut [Option<Vec<f32>>], v: Var) -> Vec<f32> {
    let numel = nodes[v.0].value.numel();
    prop[v.0].take().unwrap_or_else(|| vec![0.0f32; numel])
}

fn put_grad(prop: &mut [Option<Vec<f32>>], v: Var, buf: Vec<f32>) {
    prop[v.0] = Some(buf);
}

fn needs(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

/// Accumulate the vector-Jacobian product of node `id` into its inputs'
/// pending gradients.
fn vjp(nodes: &[Node], prop: &mut [Option<Vec<f32>>], id: usize, g: &[f32]) {
    let node = &nodes[id];
    let head = nodes;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = {
                let av = &head[a.0].value;
                (av.shape()[0], av.shape()[1])
            };
            let n = head[b.0].value.shape()[1];
            if needs(head, *a) {
                let bt = kernels::transpose(head[b.0].value.data(), k, n);
                let mut da = take_grad(head, prop, *a);
                kernels::matmul_acc(&mut da, g, &bt, m, n, k);
                put_grad(prop, *a, da);
            }
            if needs(head, *b) {
                let at = kernels::transpose(head[a.0].value.data(), m, k);
                let mut db = take_grad(head, prop, *b);
                kernels::matmul_acc(&mut db, &at, g, k, m, n);
                put_grad(prop, *b, db);
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if needs(head, *v) {
                    let mut dv = take_grad(head, prop, *v);
                    kernels::axpy(&mut dv, 1.0, g);
                    put_grad(prop, *v, dv);
                }
            }
        }
        Op::AddBroadcast { a, b } => {
            if needs(head, *a) {
                let mut da = take_grad(head, prop, *a);
                kernels::axpy(&mut da, 1.0, g);
                put_grad(prop, *a, da);
            }
            if needs(head, *b) {
                let bl = head[b.0].value.numel();
                let mut db = take_grad(head, prop, *b);
                for chunk in g.chunks(bl) {
                    kernels::axpy(&mut db, 1.0, chunk);
                }
                put_grad(prop, *b, db);
            }
        }
        Op::Mul { a, b } => {
            if needs(head, *a) {
                let mut da = take_grad(head, prop, *a);
                for ((d, &gi), &bv) in da.iter_mut().zip(g).zip(head[b.0].value.data()) {
                    *d += gi * bv;
                }
                put_grad(prop, *a, da);
            }
            if needs(head, *b) {
                let mut db = take_grad(head, prop, *b);
                for ((d, &gi), &av) in db.iter_mut().zip(g).zip(head[a.0].value.data()) {
                    *d += gi * av;
                }
                put_grad(prop, *b, db);
            }
        }
        Op::MulBroadcast { a, b } => {
            let bl = head[b.0].value.numel();
            if needs(head, *a) {
                let mut da = take_grad(head, prop, *a);
                for (blk, gblk) in da.chunks_mut(bl).zip(g.chunks(bl)) {
                    for ((d, &gi), &bv) in blk.iter_mut().zip(gblk).zip(head[b.0].value.data()) {
                        *d += gi * bv;
                    }
                }
                put_grad(prop, *a, da);
            }
            if needs(head, *b) {
                let mut db = take_grad(head, prop, *b);
                for (ablk, gblk) in head[a.0].value.data().chunks(bl).zip(g.chunks(bl)) {
                    for ((d, &gi), &av) in db.iter_mut().zip(gblk).zip(ablk) {
                        *d += gi * av;
                    }
                }
                put_grad(prop, *b, db);
            }
        }
        Op::Relu { x } => {
            if needs(head, *x) {
                let mut dx = take_grad(head, prop, *x);
                for ((d, &gi), &xv) in dx.iter_mut().zip(g).zip(head[x.0].value.data()) {
                    if xv > 0.0 {
                        *d += gi;
                    }
                }
                put_grad(prop, *x, dx);
            }
        }
        Op::Sigmoid { x } => {
            if needs(head, *x) {
                let mut dx = take_grad(head, prop, *x);
                for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(node.value.data()) {
                    *d += gi * y * (1.0 - y);
                }
                put_grad(prop, *x, dx);
            }
        }
        Op::SoftmaxLast { x, cols } => {
            if needs(head, *x) {
                let mut dx = take_grad(head, prop, *x);
                let alpha = node.value.data();
                for ((drow, grow), arow) in dx
                    .chunks_mut(*cols)
                    .zip(g.chunks(*cols))
                    .zip(alpha.chunks(*cols))
                {
                    let s = kernels::dot(grow, arow);
                    for ((d, &gi), &ai) in drow.iter_mut().zip(grow).zip(arow) {
                        *d += ai * (gi - s);
                    }
                }
                put_grad(prop, *x, dx);
            }
        }
        Op::Scale { x, c } => {
            if needs(head, *x) {
                let mut dx = take_grad(head, prop, *x);
                kernels::axpy(&mut dx, *c, g);
                put_grad(prop, *x, dx);
            }
        }
        Op::Transpose { x, rows, cols } => {
            if needs(head, *x) {
                // g has shape [cols, rows]; transpose back
                let gt = kernels::transpose(g, *cols, *rows);
                let mut dx = take_grad(head, prop, *x);
                kernels::axpy(&mut dx, 1.0, &gt);
                put_grad(prop, *x, dx);
            }
        }
        Op::Gather { table, ids } => {
            if needs(head, *table) {
                let d = head[table.0].value.last_dim();
                let mut dt = take_grad(head, prop, *table);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    kernels::axpy(dst, 1.0, &g[r * d..(r + 1) * d]);
                }
                put_grad(prop, *table, dt);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            inv_std,
            mean,
            ..
        } => {
            let d = head[gamma.0].value.numel();
            let rows = head[x.0].value.numel() / d;
            let gamma_data = head[gamma.0].value.data().to_vec();
            if needs(head, *beta) {
                let mut db = take_grad(head, prop, *beta);
                for grow in g.chunks(d) {
                    kernels::axpy(&mut db, 1.0, grow);
                }
                put_grad(prop, *beta, db);
            }
            if needs(head, *gamma) {
                let mut dg = take_grad(head, prop, *gamma);
                for r in 0..rows {
                    let xrow = &head[x.0].value.data()[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    for ((dgi, &gi), &xv) in dg.iter_mut().zip(grow).zip(xrow) {
                        *dgi += gi * (xv - mean[r]) * inv_std[r];
                    }
                }
                put_grad(prop, *gamma, dg);
            }
            if needs(head, *x) {
                let mut dx = take_grad(head, prop, *x);
                for r in 0..rows {
                    let xrow = &head[x.0].value.data()[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    // dxhat = g ⊙ gamma; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat ⊙ xhat))
                    let inv = inv_std[r];
                    let mut sum_dxhat = 0.0f32;
                    let mut sum_dxhat_xhat = 0.0f32;
                    for ((&gi, &gm), &xv) in grow.iter().zip(&gamma_data).zip(xrow) {
                        let dxh = gi * gm;
                        let xh = (xv - mean[r]) * inv;
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh;
                    }
                    let m1 = sum_dxhat / d as f32;
                    let m2 = sum_dxhat_xhat / d as f32;
                    let drow = &mut dx[r * d..(r + 1) * d];
                    for ((di, (&gi, &gm)), &xv) in
                        drow.iter_mut().zip(grow.iter().zip(&gamma_data)).zip(xrow)
                    {
                        let dxh = gi * gm;
                        let xh = (xv - mean[r]) * inv;
                        *di += inv * (dxh - m1 - xh * m2);
                    }
                }
                put_grad(prop, *x, dx);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            if needs(head, *logits) {
                let vocab = head[logits.0].value.last_dim();
                let scale = g[0] / *count as f32;
                let mut dl = take_grad(head, prop, *logits);
                for (r, (&t, &m)) in targets.iter().zip(mask.iter()).enumerate() {
                    if !m {
                        continue;
                    }
                    let prow = &probs[r * vocab..(r + 1) * vocab];
                    let drow = &mut dl[r * vocab..(r + 1) * vocab];
                    kernels::axpy(drow, scale, prow);
                    drow[t as usize] -= scale;
                }
                put_grad(prop, *logits, dl);
            }
        }
        Op::CandidateScores { q, k, cands, scale } => {
            let width = cands.k();
            let d = head[q.0].value.last_dim();
            let needs_q = needs(head, *q);
            let needs_k = needs(head, *k);
            let mut dq = if needs_q { Some(take_grad(head, prop, *q)) } else { None };
            let mut dk = if needs_k { Some(take_grad(head, prop, *k)) } else { None };
            for i in 0..cands.n() {
                let grow = &g[i * width..];
                for (c, &j) in cands.row(i).iter().enumerate() {
                    let gs = grow[c] * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    let j = j as usize;
                    if let Some(dq) = dq.as_mut() {
                        kernels::axpy(&mut dq[i * d..(i + 1) * d], gs, head[k.0].value.row(j));
                    }
                    if let Some(dk) = dk.as_mut() {
                        kernels::axpy(&mut dk[j * d..(j + 1) * d], gs, head[q.0].value.row(i));
                    }
                }
            }
            if let Some(dq) = dq {
                put_grad(prop, *q, dq);
            }
            if let Some(dk) = dk {
                put_grad(prop, *k, dk);
            }
        }
        Op::SoftAggregate { alpha, h, cands } => {
            let d = head[h.0].value.last_dim();
            let n = head[h.0].value.leading();
            let width = head[alpha.0].value.last_dim();
            let needs_a = needs(head, *alpha);
            let needs_h = needs(head, *h);
            let mut da = if needs_a { Some(take_grad(head, prop, *alpha)) } else { None };
            let mut dh = if needs_h { Some(take_grad(head, prop, *h)) } else { None };
            let av = head[alpha.0].value.data();
            for i in 0..n {
                let gz = &g[i * d..(i + 1) * d];
                let arow = &av[i * width..(i + 1) * width];
                let slot_target = |c: usize| -> Option<usize> {
                    match cands {
                        Some(t) => t.row(i).get(c).map(|&j| j as usize),
                        None => Some(c),
                    }
                };
                let slots = match cands {
                    Some(t) => t.row(i).len(),
                    None => width,
                };
                for c in 0..slots {
                    let j = slot_target(c).expect("slot in range");
                    if let Some(da) = da.as_mut() {
                        da[i * width + c] += kernels::dot(gz, head[h.0].value.row(j));
                    }
                    if arow[c] != 0.0 {
                        if let Some(dh) = dh.as_mut() {
                            kernels::axpy(&mut dh[j * d..(j + 1) * d], arow[c], gz);
                        }
                    }
                }
            }
            if let Some(da) = da {
                put_grad(prop, *alpha, da);
            }
            if let Some(dh) = dh {
                put_grad(prop, *h, dh);
            }
        }
        Op::AttentionHead {
            q,
            k,
            v,
            causal,
            scale,
            alpha,
        } => {
            let n = head[q.0].value.leading();
            let dh = head[q.0].value.last_dim();
            let needs_any = needs(head, *q) || needs(head, *k) || needs(head, *v);
            if !needs_any {
                return;
            }
            let mut dq = take_grad(head, prop, *q);
            let mut dk = take_grad(head, prop, *k);
            let mut dv = take_grad(head, prop, *v);
            let mut dalpha_row = vec![0.0f32; n];
            for i in 0..n {
                let gz = &g[i * dh..(i + 1) * dh];
                let arow = &alpha[i * n..(i + 1) * n];
                let hi = if *causal { i + 1 } else { n };
                // d_alpha then softmax backward on this row
                let mut s = 0.0f32;
                for j in 0..hi {
                    if arow[j] == 0.0 {
                        dalpha_row[j] = 0.0;
                        continue;
                    }
                    let da = kernels::dot(gz, head[v.0].value.row(j));
                    dalpha_row[j] = da;
                    s += arow[j] * da;
                }
                for j in 0..hi {
                    let a = arow[j];
                    if a == 0.0 {
                        continue;
                    }
                    let ds = a * (dalpha_row[j] - s) * scale;
                    kernels::axpy(&mut dv[j * dh..(j + 1) * dh], a, gz);
                    if ds != 0.0 {
                        kernels::axpy(&mut dq[i * dh..(i + 1) * dh], ds, head[k.0].value.row(j));
                        kernels::axpy(&mut dk[j * dh..(j + 1) * dh], ds, head[q.0].value.row(i));
                    }
                }
            }
            put_grad(prop, *q, dq);
            put_grad(prop, *k, dk);
            put_grad(prop, *v, dv);
        }
        Op::Concat { parts, widths } => {
            let total: usize = widths.iter().sum();
            let rows = node.value.leading();
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                if needs(head, p) {
                    let mut dp = take_grad(head, prop, p);
                    for r in 0..rows {
                        kernels::axpy(
                            &mut dp[r * w..(r + 1) * w],
                            1.0,
                            &g[r * total + off..r * total + off + w],
                        );
                    }
                    put_grad(prop, p, dp);
                }
                off += w;
            }
        }
        Op::Sum { x } => {
            if needs(head, *x) {
                let mut dx = take_grad(head, prop, *x);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
                put_grad(prop, *x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Tensor {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(3, 3, |r, c| (r * 3 + c) as f32 * 0.5 - 1.0));
        let i = tape.constant(Tensor::eye(3));
        let out = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(a).data());
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 2, |r, c| (r * 2 + c + 1) as f32)); // [[1,2],[3,4]]
        let b = tape.constant(t2(2, 1, |_, _| 1.0));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(2, 4, |r, c| (r + c) as f32 - 1.5));
        let z = tape.constant(Tensor::zeros(&[2, 4]));
        let out = tape.add(x, z).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(x).data());
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let out = tape.relu(x).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4]));
        let out = tape.softmax_last(x).unwrap();
        for &v in tape.value(out).data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
        let y = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, (2.0f32).ln()]).unwrap());
        let out = tape.softmax_last(y).unwrap();
        let d = tape.value(out).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let base = vec![0.3f32, -1.2, 2.0, 0.7];
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 4], base.clone()).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 4], base.iter().map(|v| v + 5.5).collect()).unwrap());
        let sa = tape.softmax_last(a).unwrap();
        let sb = tape.softmax_last(b).unwrap();
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(2, 3, |r, c| (r + c) as f32));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_quadratic_gives_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g, &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let err = tape.backward(x);
        assert!(matches!(err, Err(Error::NotScalar { .. })));
    }

    #[test]
    fn backward_rejects_unknown_var() {
        let mut tape = Tape::new();
        let _ = tape.leaf(Tensor::scalar(1.0));
        let err = tape.backward(Var(5));
        assert!(matches!(err, Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn backward_accumulates_and_zeroing_restores_bits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.7, -0.3]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let first: Vec<f32> = tape.grad(x).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let doubled: Vec<f32> = tape.grad(x).unwrap().to_vec();
        for (a, b) in first.iter().zip(&doubled) {
            assert_eq!(*b, 2.0 * a);
        }
        tape.zero_grads();
        tape.backward(loss).unwrap();
        let again: Vec<f32> = tape.grad(x).unwrap().to_vec();
        for (a, b) in first.iter().zip(&again) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn gather_and_scatter_add() {
        let mut tape = Tape::new();
        let table = tape.leaf(t2(3, 2, |r, c| (r * 2 + c) as f32));
        let out = tape.gather(table, &[0, 0, 2]).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 1.0, 0.0, 1.0, 4.0, 5.0]);
        let loss = tape.sum(out).unwrap();
        tape.backward(loss).unwrap();
        // row 0 used twice: its grad doubles
        assert_eq!(tape.grad(table).unwrap(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            tape.gather(table, &[3]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_empty_mask_is_error() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            tape.cross_entropy(logits, &[0, 1], &[false, false]),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn candidate_scores_match_manual_dots() {
        let mut tape = Tape::new();
        let q = tape.leaf(t2(3, 4, |r, c| (r as f32 + 1.0) * 0.3 - c as f32 * 0.1));
        let k = tape.leaf(t2(3, 4, |r, c| (c as f32 - r as f32) * 0.2));
        let table = Rc::new(CandidateTable::from_rows(
            &[vec![0], vec![0, 1], vec![2, 0, 1]],
            3,
        ));
        let s = tape.candidate_scores(q, k, table.clone(), 0.5).unwrap();
        let sv = tape.value(s);
        assert_eq!(sv.shape(), &[3, 3]);
        let qv = tape.value(q).clone();
        let kv = tape.value(k).clone();
        for i in 0..3 {
            for (c, &j) in table.row(i).iter().enumerate() {
                let want = 0.5 * kernels::dot(qv.row(i), kv.row(j as usize));
                assert_eq!(sv.row(i)[c].to_bits(), want.to_bits());
            }
        }
        // padding slots hold the mask constant
        assert_eq!(sv.row(0)[1], MASKED_SCORE);
        assert_eq!(sv.row(0)[2], MASKED_SCORE);
    }

    #[test]
    fn soft_aggregate_identity_matrix_selects_rows() {
        let mut tape = Tape::new();
        let h = tape.leaf(t2(3, 2, |r, c| (r * 2 + c) as f32));
        let alpha = tape.constant(Tensor::eye(3));
        let z = tape.soft_aggregate(alpha, h, None).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(h).data());
    }

    #[test]
    fn attention_rows_are_stochastic_and_causal() {
        let mut tape = Tape::new();
        let q = tape.leaf(t2(4, 2, |r, c| (r + c) as f32 * 0.3));
        let k = tape.leaf(t2(4, 2, |r, c| (r as f32 - c as f32) * 0.4));
        let v = tape.leaf(t2(4, 2, |r, c| (r * 2 + c) as f32));
        let out = tape.attention_head(q, k, v, true).unwrap();
        if let Op::AttentionHead { alpha, .. } = &tape.nodes[out.0].op {
            for (i, row) in alpha.chunks(4).enumerate() {
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-5);
                let future: f32 = row[i + 1..].iter().sum();
                assert!(future < 1e-6, "causal row {i} leaks {future}");
            }
        } else {
            panic!("expected attention op");
        }
        // row 0 attends only to itself
        assert_eq!(tape.value(out).row(0), tape.value(v).row(0));
    }

    #[test]
    fn concat_roundtrips_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, |r, c| (r + c) as f32));
        let b = tape.leaf(t2(2, 3, |r, c| (r * 3 + c) as f32));
        let cat = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[2, 5]);
        let loss = tape.sum(cat).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0; 6]);
    }
}
