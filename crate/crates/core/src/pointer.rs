//! The pointer architecture.
//!
//! Per layer, every position selects exactly one target position: scores are
//! scaled dot products between chain-conditioned queries and keys, selection
//! is a Gumbel-Softmax relaxation during training and a hard argmax at
//! inference, and the selected features are gated and folded back through a
//! residual + FFN block. Conditioning on the previous layer's pointers is
//! what lets selections compose into long-range chains.
//!
//! Two scoring routes exist side by side: `dense` scores every position
//! (faithful to the definition, O(N²·d)) and `candidate` scores a budgeted
//! set (window + strided anchors + chain targets + self, O(N·K·d)). With an
//! exhaustive candidate table the two routes agree bit-for-bit; tests lean
//! on that equivalence.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embed_tokens, readout, BoundEmbeddings, EmbeddingStack};
use crate::nn::{
    self, Binding, BoundFfn, BoundLayerNorm, BoundLinear, FfnParams, GumbelConfig,
    LayerNormParams, LinearParams,
};
use crate::rng::{self, Stream};
use crate::tape::{CandidateTable, Tape, Var, MASKED_SCORE};
use crate::tensor::Tensor;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    /// Score every allowed position per query.
    Dense,
    /// Score only the budgeted candidate set per query.
    Candidate,
}

impl std::str::FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ScoringMode::Dense),
            "candidate" => Ok(ScoringMode::Candidate),
            other => Err(Error::InvalidConfig {
                detail: format!("unknown scoring mode '{other}'"),
            }),
        }
    }
}

fn default_layers() -> usize {
    6
}
fn default_d_model() -> usize {
    256
}
fn default_heads() -> usize {
    8
}
fn default_causal() -> bool {
    true
}
fn default_scoring() -> ScoringMode {
    ScoringMode::Candidate
}
fn default_budget() -> usize {
    32
}
fn default_window() -> usize {
    16
}
fn default_anchors() -> usize {
    8
}

/// Shared configuration for both model kinds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    /// Used by the vanilla baseline only.
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// 0 means "derive from the task vocabulary".
    #[serde(default)]
    pub vocab_size: usize,
    /// 0 means "derive from the task sequence length".
    #[serde(default)]
    pub max_seq_len: usize,
    #[serde(default = "default_causal")]
    pub causal: bool,
    #[serde(default = "default_scoring")]
    pub scoring_mode: ScoringMode,
    /// Candidate budget K.
    #[serde(default = "default_budget")]
    pub candidate_budget: usize,
    /// Local window w feeding the candidate set.
    #[serde(default = "default_window")]
    pub local_window: usize,
    #[serde(default = "default_anchors")]
    pub n_strided_anchors: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: default_layers(),
            d_model: default_d_model(),
            n_heads: default_heads(),
            vocab_size: 0,
            max_seq_len: 0,
            causal: default_causal(),
            scoring_mode: default_scoring(),
            candidate_budget: default_budget(),
            local_window: default_window(),
            n_strided_anchors: default_anchors(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "d_model {} must be a positive multiple of n_heads {}",
                    self.d_model, self.n_heads
                ),
            });
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.n_layers == 0 {
            return Err(Error::InvalidConfig {
                detail: "vocab_size, max_seq_len and n_layers must be positive".into(),
            });
        }
        if self.scoring_mode == ScoringMode::Candidate
            && self.candidate_budget < self.local_window + self.n_strided_anchors + 2
        {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "candidate budget {} < window {} + anchors {} + 2",
                    self.candidate_budget, self.local_window, self.n_strided_anchors
                ),
            });
        }
        Ok(())
    }
}

// ── Trace ────────────────────────────────────────────────────────────

/// Selected pointer indices per layer; the interpretability substrate.
/// Hard inference stores exactly `n_layers * seq_len` integers of pointer
/// state and nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct PointerTrace {
    pub ptrs: Vec<Vec<u32>>,
    /// Soft selection weights per layer, kept only when a training phase
    /// asks for diagnostics.
    pub alpha: Option<Vec<Tensor>>,
}

impl PointerTrace {
    pub fn n_layers(&self) -> usize {
        self.ptrs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.ptrs.first().map_or(0, Vec::len)
    }

    /// Hash of every discrete selection; two forward passes made the same
    /// choices iff their signatures match.
    pub fn signature(&self) -> u64 {
        let mut words = Vec::with_capacity(self.ptrs.len() * self.seq_len() + 1);
        for layer in &self.ptrs {
            for &p in layer {
                words.push(p as u64);
            }
            words.push(u64::MAX); // layer separator
        }
        rng::mix(&words)
    }
}

/// Execution phase for a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Phase {
    /// Soft Gumbel-Softmax aggregation; argmax pointers are still recorded
    /// for chaining and the trace.
    Train {
        tau: f32,
        /// 0 disables Gumbel noise, 1 enables it.
        noise_scale: f32,
        /// Per-step noise seed; layers derive their own streams from it.
        seed: u64,
        /// Keep per-layer soft weights on the trace (diagnostics).
        collect_alpha: bool,
    },
    /// Hard argmax selection and gather aggregation.
    Infer,
}

// ── Candidate sets ───────────────────────────────────────────────────

/// Candidate set for position `i`: deduplicated union of the local window,
/// self, the chain targets from the previous layer, and strided anchors, in
/// that priority order, truncated to the budget K.
pub fn candidate_set(i: usize, n: usize, prev_ptrs: &[u32], cfg: &ModelConfig) -> Vec<u32> {
    let k = cfg.candidate_budget;
    let mut out: Vec<u32> = Vec::with_capacity(k);
    let push = |out: &mut Vec<u32>, j: u32| {
        if out.len() < k && !out.contains(&j) {
            out.push(j);
        }
    };
    // local window, ascending
    let lo = i.saturating_sub(cfg.local_window);
    for j in lo..i {
        push(&mut out, j as u32);
    }
    // self
    push(&mut out, i as u32);
    // chain targets: previous pointer and its pointer
    let p1 = prev_ptrs[i];
    push(&mut out, p1);
    push(&mut out, prev_ptrs[p1 as usize]);
    // strided anchors, evenly spaced over the allowed range
    let hi = if cfg.causal { i } else { n };
    if cfg.n_strided_anchors > 0 && hi > 0 {
        for t in 0..cfg.n_strided_anchors {
            push(&mut out, (t * hi / cfg.n_strided_anchors) as u32);
        }
    }
    if cfg.causal {
        debug_assert!(out.iter().all(|&j| j as usize <= i));
    }
    out
}

/// Candidate table for a whole layer given the previous layer's pointers.
pub fn layer_candidates(n: usize, prev_ptrs: &[u32], cfg: &ModelConfig) -> CandidateTable {
    let rows: Vec<Vec<u32>> = (0..n).map(|i| candidate_set(i, n, prev_ptrs, cfg)).collect();
    CandidateTable::from_rows(&rows, cfg.candidate_budget)
}

/// Which pairs a layer scores.
#[derive(Clone)]
pub enum ScoreRoute {
    Dense,
    Candidates(Rc<CandidateTable>),
}

// ── Parameters ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PointerLayerParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub gate: LinearParams,
    /// Encodes p/N into a d-vector (with its own norm).
    pub encode: LinearParams,
    pub encode_ln: LayerNormParams,
    /// Projects the concatenated [h | enc] back to d.
    pub merge: LinearParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

impl PointerLayerParams {
    pub fn init(d: usize, rng: &mut Stream) -> Self {
        PointerLayerParams {
            wq: LinearParams::init(d, d, rng),
            wk: LinearParams::init(d, d, rng),
            gate: LinearParams::init(d, d, rng),
            encode: LinearParams::init(1, d, rng),
            encode_ln: LayerNormParams::init(d),
            merge: LinearParams::init(2 * d, d, rng),
            ln1: LayerNormParams::init(d),
            ln2: LayerNormParams::init(d),
            ffn: FfnParams::init(d, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Binding, prefix: &str) -> BoundPointerLayer {
        BoundPointerLayer {
            wq: self.wq.bind(tape, reg, &format!("{prefix}.wq")),
            wk: self.wk.bind(tape, reg, &format!("{prefix}.wk")),
            gate: self.gate.bind(tape, reg, &format!("{prefix}.gate")),
            encode: self.encode.bind(tape, reg, &format!("{prefix}.enc")),
            encode_ln: self.encode_ln.bind(tape, reg, &format!("{prefix}.enc_ln")),
            merge: self.merge.bind(tape, reg, &format!("{prefix}.merge")),
            ln1: self.ln1.bind(tape, reg, &format!("{prefix}.ln1")),
            ln2: self.ln2.bind(tape, reg, &format!("{prefix}.ln2")),
            ffn: self.ffn.bind(tape, reg, &format!("{prefix}.ffn")),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.gate.visit(&format!("{prefix}.gate"), f);
        self.encode.visit(&format!("{prefix}.enc"), f);
        self.encode_ln.visit(&format!("{prefix}.enc_ln"), f);
        self.merge.visit(&format!("{prefix}.merge"), f);
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.gate.visit_mut(&format!("{prefix}.gate"), f);
        self.encode.visit_mut(&format!("{prefix}.enc"), f);
        self.encode_ln.visit_mut(&format!("{prefix}.enc_ln"), f);
        self.merge.visit_mut(&format!("{prefix}.merge"), f);
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

pub struct BoundPointerLayer {
    pub wq: BoundLinear,
    pub wk: BoundLinear,
    pub gate: BoundLinear,
    pub encode: BoundLinear,
    pub encode_ln: BoundLayerNorm,
    pub merge: BoundLinear,
    pub ln1: BoundLayerNorm,
    pub ln2: BoundLayerNorm,
    pub ffn: BoundFfn,
}

// ── Layer operations ─────────────────────────────────────────────────

/// LayerNorm(Linear(p/N)) per position; the pointer index is a constant, no
/// gradient flows through the discrete value.
pub fn encode_prev_pointer(
    tape: &mut Tape,
    encode: BoundLinear,
    encode_ln: BoundLayerNorm,
    prev_ptrs: &[u32],
    n: usize,
) -> Result<Var> {
    for &p in prev_ptrs {
        if p as usize >= n {
            return Err(Error::IndexOutOfRange {
                op: "encode_prev_pointer",
                index: p as usize,
                bound: n,
            });
        }
    }
    let frac: Vec<f32> = prev_ptrs.iter().map(|&p| p as f32 / n as f32).collect();
    let frac = tape.constant(Tensor::new(vec![prev_ptrs.len(), 1], frac)?);
    let lin = nn::linear(tape, encode, frac)?;
    nn::layer_norm(tape, encode_ln, lin)
}

/// h ⊕ enc realized as feature concatenation followed by a learned 2d→d
/// projection.
pub fn chain_condition(tape: &mut Tape, merge: BoundLinear, h: Var, enc: Var) -> Result<Var> {
    let cat = tape.concat(&[h, enc])?;
    nn::linear(tape, merge, cat)
}

/// Scaled dot-product pointer scores over the chosen route.
///
/// Dense output is [n, n] with future positions at [`MASKED_SCORE`] in
/// causal mode; candidate output is [n, K] with padding slots at
/// [`MASKED_SCORE`].
pub fn pointer_scores(
    tape: &mut Tape,
    wq: BoundLinear,
    wk: BoundLinear,
    h_tilde: Var,
    route: &ScoreRoute,
    causal: bool,
) -> Result<Var> {
    let d = tape.value(h_tilde).last_dim();
    let n = tape.value(h_tilde).leading();
    let scale = 1.0 / (d as f32).sqrt();
    let q = nn::linear(tape, wq, h_tilde)?;
    let k = nn::linear(tape, wk, h_tilde)?;
    match route {
        ScoreRoute::Dense => {
            let kt = tape.transpose2(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, scale)?;
            if causal {
                let mut mask = vec![0.0f32; n * n];
                for i in 0..n {
                    for j in i + 1..n {
                        mask[i * n + j] = MASKED_SCORE;
                    }
                }
                let mask = tape.constant(Tensor::new(vec![n, n], mask)?);
                tape.add(s, mask)
            } else {
                Ok(s)
            }
        }
        ScoreRoute::Candidates(table) => tape.candidate_scores(q, k, table.clone(), scale),
    }
}

/// Rowwise argmax over scores, ties broken toward the smallest position
/// index. With a candidate table, slots map back to global positions.
pub fn select_hard(scores: &Tensor, cands: Option<&CandidateTable>) -> Result<Vec<u32>> {
    let width = scores.last_dim();
    let n = scores.leading();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = scores.row(i);
        let mut best: Option<(f32, u32)> = None;
        let slots: Box<dyn Iterator<Item = (usize, u32)>> = match cands {
            Some(t) => Box::new(t.row(i).iter().enumerate().map(|(c, &j)| (c, j))),
            None => Box::new((0..width).map(|j| (j, j as u32))),
        };
        for (c, j) in slots {
            let v = row[c];
            match best {
                None => best = Some((v, j)),
                Some((bv, bj)) => {
                    if v > bv || (v == bv && j < bj) {
                        best = Some((v, j));
                    }
                }
            }
        }
        match best {
            Some((v, j)) if v > MASKED_SCORE => out.push(j),
            _ => return Err(Error::AllMasked { row: i }),
        }
    }
    Ok(out)
}

/// How the aggregation step selects rows of `h`.
pub enum Selection<'a> {
    Soft {
        alpha: Var,
        cands: Option<Rc<CandidateTable>>,
    },
    Hard {
        ptrs: &'a [u32],
    },
}

/// z_i = h_{p_i} ⊙ sigmoid(gate(h_i)), with the soft path replacing the
/// gather by the alpha-weighted average.
pub fn aggregate(tape: &mut Tape, sel: Selection<'_>, h: Var, gate: BoundLinear) -> Result<Var> {
    let gated = nn::linear(tape, gate, h)?;
    let gated = tape.sigmoid(gated)?;
    let base = match sel {
        Selection::Soft { alpha, cands } => tape.soft_aggregate(alpha, h, cands)?,
        Selection::Hard { ptrs } => tape.gather(h, ptrs)?,
    };
    tape.mul(base, gated)
}

/// One pointer layer:
/// chain-condition, score, select (soft in training / hard at inference),
/// aggregate, then u = LN1(h + z) and h' = u + FFN(LN2(u)).
#[allow(clippy::too_many_arguments)]
pub fn pointer_layer_forward(
    tape: &mut Tape,
    layer: &BoundPointerLayer,
    h: Var,
    prev_ptrs: &[u32],
    route: &ScoreRoute,
    cfg: &ModelConfig,
    phase: Phase,
    layer_idx: usize,
) -> Result<(Var, Vec<u32>, Option<Var>)> {
    let n = tape.value(h).leading();
    let enc = encode_prev_pointer(tape, layer.encode, layer.encode_ln, prev_ptrs, n)?;
    let h_tilde = chain_condition(tape, layer.merge, h, enc)?;
    let scores = pointer_scores(tape, layer.wq, layer.wk, h_tilde, route, cfg.causal)?;

    let cands = match route {
        ScoreRoute::Dense => None,
        ScoreRoute::Candidates(t) => Some(t.clone()),
    };

    let (z, ptrs, alpha) = match phase {
        Phase::Train {
            tau,
            noise_scale,
            seed,
            ..
        } => {
            let gcfg = GumbelConfig {
                tau,
                noise_scale,
                rng_seed: rng::fanout(seed, "gumbel_layer", &[layer_idx as u64]),
            };
            gcfg.validate()?;
            let width = tape.value(scores).last_dim();
            // noise is keyed by global target position so dense and
            // candidate routes draw identical values per (i, j) pair
            let noise = nn::gumbel_noise(&gcfg, n, width, |i, c| match &cands {
                Some(t) => t.row(i).get(c).map(|&j| j as u64),
                None => Some(c as u64),
            });
            let noise = tape.constant(noise);
            let shifted = tape.add(scores, noise)?;
            let scaled = tape.scale(shifted, 1.0 / gcfg.tau)?;
            let alpha = tape.softmax_last(scaled)?;
            // argmax of alpha drives the chain; no gradient flows through it
            let ptrs = select_hard(tape.value(alpha), cands.as_deref())?;
            let z = aggregate(
                tape,
                Selection::Soft {
                    alpha,
                    cands: cands.clone(),
                },
                h,
                layer.gate,
            )?;
            (z, ptrs, Some(alpha))
        }
        Phase::Infer => {
            let ptrs = select_hard(tape.value(scores), cands.as_deref())?;
            let z = aggregate(tape, Selection::Hard { ptrs: &ptrs }, h, layer.gate)?;
            (z, ptrs, None)
        }
    };

    let res = tape.add(h, z)?;
    let u = nn::layer_norm(tape, layer.ln1, res)?;
    let normed = nn::layer_norm(tape, layer.ln2, u)?;
    let f = nn::ffn(tape, layer.ffn, normed)?;
    let h_next = tape.add(u, f)?;
    Ok((h_next, ptrs, alpha))
}

// ── Full model ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PointerModel {
    pub embed: EmbeddingStack,
    pub layers: Vec<PointerLayerParams>,
}

impl PointerModel {
    pub fn init(cfg: &ModelConfig, rng: &mut Stream) -> Self {
        PointerModel {
            embed: EmbeddingStack::init(cfg, rng),
            layers: (0..cfg.n_layers)
                .map(|_| PointerLayerParams::init(cfg.d_model, rng))
                .collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Binding) -> BoundPointerModel {
        BoundPointerModel {
            embed: self.embed.bind(tape, reg),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.bind(tape, reg, &format!("l{i}")))
                .collect(),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        self.embed.visit(f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("l{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.embed.visit_mut(f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("l{i}"), f);
        }
    }
}

pub struct BoundPointerModel {
    pub embed: BoundEmbeddings,
    pub layers: Vec<BoundPointerLayer>,
}

fn forward_impl(
    tape: &mut Tape,
    model: &BoundPointerModel,
    tokens: &[u32],
    cfg: &ModelConfig,
    phase: Phase,
    route_for: impl Fn(usize, &[u32]) -> ScoreRoute,
) -> Result<(Var, PointerTrace)> {
    let n = tokens.len();
    let mut h = embed_tokens(tape, &model.embed, tokens, cfg)?;
    // layer 0 chains from self-pointers, the neutral choice
    let mut prev: Vec<u32> = (0..n as u32).collect();
    let collect_alpha = matches!(phase, Phase::Train { collect_alpha: true, .. });
    let mut trace = PointerTrace {
        ptrs: Vec::with_capacity(cfg.n_layers),
        alpha: if collect_alpha { Some(Vec::new()) } else { None },
    };
    for (idx, layer) in model.layers.iter().enumerate() {
        let route = route_for(idx, &prev);
        let (h_next, ptrs, alpha) =
            pointer_layer_forward(tape, layer, h, &prev, &route, cfg, phase, idx)?;
        if let (Some(list), Some(a)) = (trace.alpha.as_mut(), alpha) {
            list.push(tape.value(a).clone());
        }
        h = h_next;
        prev = ptrs.clone();
        trace.ptrs.push(ptrs);
    }
    let logits = readout(tape, &model.embed, h)?;
    Ok((logits, trace))
}

/// Full pointer model forward pass; the route per layer follows
/// `cfg.scoring_mode`.
pub fn pointer_model_forward(
    tape: &mut Tape,
    model: &BoundPointerModel,
    tokens: &[u32],
    cfg: &ModelConfig,
    phase: Phase,
) -> Result<(Var, PointerTrace)> {
    let n = tokens.len();
    forward_impl(tape, model, tokens, cfg, phase, |_, prev| match cfg.scoring_mode {
        ScoringMode::Dense => ScoreRoute::Dense,
        ScoringMode::Candidate => {
            ScoreRoute::Candidates(Rc::new(layer_candidates(n, prev, cfg)))
        }
    })
}

/// Forward pass through the candidate machinery with exhaustive per-row
/// candidate lists. Exists for fidelity testing against the dense route.
pub fn pointer_model_forward_exhaustive(
    tape: &mut Tape,
    model: &BoundPointerModel,
    tokens: &[u32],
    cfg: &ModelConfig,
    phase: Phase,
) -> Result<(Var, PointerTrace)> {
    let table = Rc::new(CandidateTable::exhaustive(tokens.len(), cfg.causal));
    forward_impl(tape, model, tokens, cfg, phase, |_, _| {
        ScoreRoute::Candidates(table.clone())
    })
}
