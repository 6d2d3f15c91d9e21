//! Shared model structure: embeddings, final norm and vocab head, plus the
//! closed set of model kinds the lab compares.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Binding, BoundLayerNorm, BoundLinear, LayerNormParams, LinearParams};
use crate::pointer::{ModelConfig, Phase, PointerModel, PointerTrace};
use crate::rng::Stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vanilla::VanillaModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pointer,
    Vanilla,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Pointer => write!(f, "pointer"),
            ModelKind::Vanilla => write!(f, "vanilla"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointer" => Ok(ModelKind::Pointer),
            "vanilla" => Ok(ModelKind::Vanilla),
            other => Err(Error::InvalidConfig {
                detail: format!("unknown model kind '{other}'"),
            }),
        }
    }
}

/// Token + learned positional embeddings in, final norm + vocab head out.
/// Identical for both architectures so timing differences isolate the
/// mixing mechanism.
#[derive(Debug, Clone)]
pub struct EmbeddingStack {
    pub tok: Tensor,
    pub pos: Tensor,
    pub ln_f: LayerNormParams,
    pub head: LinearParams,
}

impl EmbeddingStack {
    pub fn init(cfg: &ModelConfig, rng: &mut Stream) -> Self {
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let tok_limit = crate::rng::glorot_limit(v, d);
        let pos_limit = crate::rng::glorot_limit(cfg.max_seq_len, d);
        EmbeddingStack {
            tok: Tensor::new(
                vec![v, d],
                (0..v * d).map(|_| rng.uniform_sym(tok_limit)).collect(),
            )
            .expect("consistent shape"),
            pos: Tensor::new(
                vec![cfg.max_seq_len, d],
                (0..cfg.max_seq_len * d)
                    .map(|_| rng.uniform_sym(pos_limit))
                    .collect(),
            )
            .expect("consistent shape"),
            ln_f: LayerNormParams::init(d),
            head: LinearParams::init(d, v, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Binding) -> BoundEmbeddings {
        let tok = reg.leaf(tape, "embed.tok".into(), &self.tok);
        let pos = reg.leaf(tape, "embed.pos".into(), &self.pos);
        BoundEmbeddings {
            tok,
            pos,
            ln_f: self.ln_f.bind(tape, reg, "ln_f"),
            head: self.head.bind(tape, reg, "head"),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        f("embed.tok".into(), &self.tok);
        f("embed.pos".into(), &self.pos);
        self.ln_f.visit("ln_f", f);
        self.head.visit("head", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("embed.tok".into(), &mut self.tok);
        f("embed.pos".into(), &mut self.pos);
        self.ln_f.visit_mut("ln_f", &mut *f);
        self.head.visit_mut("head", &mut *f);
    }
}

pub struct BoundEmbeddings {
    pub tok: Var,
    pub pos: Var,
    pub ln_f: BoundLayerNorm,
    pub head: BoundLinear,
}

/// Token ids -> [n, d] hidden states (token + positional rows).
pub fn embed_tokens(
    tape: &mut Tape,
    emb: &BoundEmbeddings,
    tokens: &[u32],
    cfg: &ModelConfig,
) -> Result<Var> {
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::ShapeMismatch {
            op: "embed_tokens",
            detail: format!("{} tokens exceed max_seq_len {}", tokens.len(), cfg.max_seq_len),
        });
    }
    let tok_rows = tape.gather(emb.tok, tokens)?;
    let pos_ids: Vec<u32> = (0..tokens.len() as u32).collect();
    let pos_rows = tape.gather(emb.pos, &pos_ids)?;
    tape.add(tok_rows, pos_rows)
}

/// Final norm and vocab projection.
pub fn readout(tape: &mut Tape, emb: &BoundEmbeddings, h: Var) -> Result<Var> {
    let normed = nn::layer_norm(tape, emb.ln_f, h)?;
    nn::linear(tape, emb.head, normed)
}

/// A trainable model of either kind.
pub enum Model {
    Pointer(PointerModel),
    Vanilla(VanillaModel),
}

impl Model {
    pub fn init(kind: ModelKind, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Stream::new(crate::rng::fanout(seed, "init", &[]));
        Ok(match kind {
            ModelKind::Pointer => Model::Pointer(PointerModel::init(cfg, &mut rng)),
            ModelKind::Vanilla => Model::Vanilla(VanillaModel::init(cfg, &mut rng)),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Pointer(_) => ModelKind::Pointer,
            Model::Vanilla(_) => ModelKind::Vanilla,
        }
    }

    /// Forward pass on a fresh tape. Returns logits and, for the pointer
    /// model, the per-layer pointer trace.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        cfg: &ModelConfig,
        phase: Phase,
    ) -> Result<(Var, Binding, Option<PointerTrace>)> {
        match self {
            Model::Pointer(m) => {
                let mut reg = Binding::new();
                let bound = m.bind(tape, &mut reg);
                let (logits, trace) =
                    crate::pointer::pointer_model_forward(tape, &bound, tokens, cfg, phase)?;
                Ok((logits, reg, Some(trace)))
            }
            Model::Vanilla(m) => {
                let mut reg = Binding::new();
                let bound = m.bind(tape, &mut reg);
                let logits = crate::vanilla::vanilla_model_forward(tape, &bound, tokens, cfg)?;
                Ok((logits, reg, None))
            }
        }
    }

    /// Forward pass whose parameter leaves are supplied by the caller (in
    /// canonical binding order) instead of cloned from the model. Gradient
    /// checks own the leaves this way.
    pub fn forward_reusing(
        &self,
        tape: &mut Tape,
        vars: Vec<Var>,
        tokens: &[u32],
        cfg: &ModelConfig,
        phase: Phase,
    ) -> Result<(Var, Option<PointerTrace>)> {
        let mut reg = Binding::reusing(vars);
        match self {
            Model::Pointer(m) => {
                let bound = m.bind(tape, &mut reg);
                let (logits, trace) =
                    crate::pointer::pointer_model_forward(tape, &bound, tokens, cfg, phase)?;
                Ok((logits, Some(trace)))
            }
            Model::Vanilla(m) => {
                let bound = m.bind(tape, &mut reg);
                let logits = crate::vanilla::vanilla_model_forward(tape, &bound, tokens, cfg)?;
                Ok((logits, None))
            }
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        match self {
            Model::Pointer(m) => m.visit(f),
            Model::Vanilla(m) => m.visit(f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        match self {
            Model::Pointer(m) => m.visit_mut(f),
            Model::Vanilla(m) => m.visit_mut(f),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Parameter tensors in binding order (the canonical order for the
    /// optimizer and checkpoints).
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }
}
