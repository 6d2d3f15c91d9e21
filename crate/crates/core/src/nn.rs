//! Neural building blocks shared by both architectures.
//!
//! Parameter structs own plain tensors; `bind` registers them on a tape for
//! one forward pass and returns the corresponding [`Var`] handles. Binding
//! also appends (name, var) pairs to a registry so the optimizer and the
//! checkpoint writer see every parameter in one fixed order.

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fixed-order parameter registry built during `bind`.
///
/// In the default mode every parameter tensor is cloned onto the tape as a
/// fresh leaf. [`Binding::reusing`] instead hands out caller-provided vars
/// in binding order, which lets gradient-check harnesses own the leaves.
#[derive(Default)]
pub struct Binding {
    entries: Vec<(String, Var)>,
    source: Option<Vec<Var>>,
    cursor: usize,
}

impl Binding {
    pub fn new() -> Self {
        Binding::default()
    }

    pub fn reusing(vars: Vec<Var>) -> Self {
        Binding {
            entries: Vec::new(),
            source: Some(vars),
            cursor: 0,
        }
    }

    pub fn leaf(&mut self, tape: &mut Tape, name: String, t: &Tensor) -> Var {
        let var = match &self.source {
            None => tape.leaf(t.clone()),
            Some(vars) => {
                let v = vars[self.cursor];
                self.cursor += 1;
                v
            }
        };
        self.entries.push((name, var));
        var
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.entries.iter().map(|(_, v)| *v)
    }
}

// ── Linear ───────────────────────────────────────────────────────────

/// y = x W + b with W: [in, out], b: [out].
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    /// Glorot-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Stream) -> Self {
        let limit = rng::glorot_limit(fan_in, fan_out);
        let data = (0..fan_in * fan_out).map(|_| rng.uniform_sym(limit)).collect();
        LinearParams {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Binding, name: &str) -> BoundLinear {
        let w = reg.leaf(tape, format!("{name}.w"), &self.weight);
        let b = reg.leaf(tape, format!("{name}.b"), &self.bias);
        BoundLinear { w, b }
    }

    /// Visit (name, tensor) pairs in binding order.
    pub fn visit<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        f(format!("{name}.w"), &self.weight);
        f(format!("{name}.b"), &self.bias);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{name}.w"), &mut self.weight);
        f(format!("{name}.b"), &mut self.bias);
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

/// x: [.., in] -> [.., out].
pub fn linear(tape: &mut Tape, p: BoundLinear, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.w)?;
    tape.add(y, p.b)
}

// ── Layer norm ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
}

impl LayerNormParams {
    pub fn init(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
            eps: 1e-5,
        }
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Binding, name: &str) -> BoundLayerNorm {
        let g = reg.leaf(tape, format!("{name}.g"), &self.gamma);
        let b = reg.leaf(tape, format!("{name}.b"), &self.beta);
        BoundLayerNorm {
            gamma: g,
            beta: b,
            eps: self.eps,
        }
    }

    pub fn visit<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        f(format!("{name}.g"), &self.gamma);
        f(format!("{name}.b"), &self.beta);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{name}.g"), &mut self.gamma);
        f(format!("{name}.b"), &mut self.beta);
    }
}

#[derive(Clone, Copy)]
pub struct BoundLayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f32,
}

pub fn layer_norm(tape: &mut Tape, p: BoundLayerNorm, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.gamma, p.beta, p.eps)
}

// ── Embedding ────────────────────────────────────────────────────────

/// Row gather from a [vocab, d] table; gradients scatter-add.
pub fn embedding(tape: &mut Tape, table: Var, ids: &[u32]) -> Result<Var> {
    tape.gather(table, ids)
}

// ── Feed-forward ─────────────────────────────────────────────────────

/// Two linears around a ReLU; hidden width is fixed by the params (4·d here).
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

impl FfnParams {
    pub fn init(d: usize, rng: &mut Stream) -> Self {
        FfnParams {
            lin1: LinearParams::init(d, 4 * d, rng),
            lin2: LinearParams::init(4 * d, d, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Binding, name: &str) -> BoundFfn {
        BoundFfn {
            lin1: self.lin1.bind(tape, reg, &format!("{name}.1")),
            lin2: self.lin2.bind(tape, reg, &format!("{name}.2")),
        }
    }

    pub fn visit<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        self.lin1.visit(&format!("{name}.1"), f);
        self.lin2.visit(&format!("{name}.2"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        self.lin1.visit_mut(&format!("{name}.1"), f);
        self.lin2.visit_mut(&format!("{name}.2"), f);
    }
}

#[derive(Clone, Copy)]
pub struct BoundFfn {
    pub lin1: BoundLinear,
    pub lin2: BoundLinear,
}

pub fn ffn(tape: &mut Tape, p: BoundFfn, x: Var) -> Result<Var> {
    let h = linear(tape, p.lin1, x)?;
    let h = tape.relu(h)?;
    linear(tape, p.lin2, h)
}

// ── Cross-entropy ────────────────────────────────────────────────────

/// Masked-mean token cross-entropy (mean keeps losses comparable across gap
/// lengths).
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
    tape.cross_entropy(logits, targets, mask)
}

// ── Gumbel-Softmax ───────────────────────────────────────────────────

/// Temperature and noise controls for the softened selection.
#[derive(Debug, Clone, Copy)]
pub struct GumbelConfig {
    /// Temperature, > 0.
    pub tau: f32,
    /// 0 disables noise (tests), 1 enables it.
    pub noise_scale: f32,
    /// Seed of the counter-based noise stream.
    pub rng_seed: u64,
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::InvalidConfig {
                detail: format!("gumbel tau must be > 0, got {}", self.tau),
            });
        }
        if self.noise_scale != 0.0 && self.noise_scale != 1.0 {
            return Err(Error::InvalidConfig {
                detail: format!("noise_scale must be 0 or 1, got {}", self.noise_scale),
            });
        }
        Ok(())
    }
}

/// Noise tensor for a [rows, cols] score matrix. `target_of(row, slot)`
/// names the key that seeds each slot's draw, so candidate-set scoring can
/// key noise by global target position and reproduce dense scoring exactly.
pub fn gumbel_noise(
    cfg: &GumbelConfig,
    rows: usize,
    cols: usize,
    target_of: impl Fn(usize, usize) -> Option<u64>,
) -> Tensor {
    let mut data = vec![0.0f32; rows * cols];
    if cfg.noise_scale != 0.0 {
        for i in 0..rows {
            for c in 0..cols {
                if let Some(j) = target_of(i, c) {
                    data[i * cols + c] = rng::gumbel(cfg.rng_seed, &[i as u64, j]);
                }
            }
        }
    }
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

/// alpha = softmax((scores + g) / tau) row-wise, g ~ Gumbel(0,1) keyed by
/// (seed, row, column). With noise_scale = 0 and tau = 1 this is plain
/// softmax.
pub fn gumbel_softmax(tape: &mut Tape, scores: Var, cfg: &GumbelConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.value(scores).shape().to_vec();
    let cols = *shape.last().unwrap();
    let rows = tape.value(scores).numel() / cols;
    let noise = gumbel_noise(cfg, rows, cols, |_, c| Some(c as u64));
    let noise = tape.constant(noise);
    let shifted = tape.add(scores, noise)?;
    let scaled = tape.scale(shifted, 1.0 / cfg.tau)?;
    tape.softmax_last(scaled)
}
