//! Adam, temperature annealing and the training loop.
//!
//! Training is bit-deterministic given (seed, config): batches, init and
//! Gumbel noise all fan out from the master seed, and every gradient is
//! accumulated in a fixed order.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{Model, ModelKind};
use crate::pointer::{ModelConfig, Phase};
use crate::rng::fanout;
use crate::tape::Tape;
use crate::tasks::{
    gen_assoc_recall_batch, gen_copy_batch, token_accuracy, TaskBatch, TaskKind, VocabSpec,
};

// ── Adam ─────────────────────────────────────────────────────────────

/// Adam optimizer state; `m`/`v` mirror the canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(sizes: &[usize], lr: f32) -> Self {
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_model(model: &Model, lr: f32) -> Self {
        let mut sizes = Vec::new();
        model.visit(&mut |_, t| sizes.push(t.numel()));
        Self::new(&sizes, lr)
    }
}

/// One Adam update for a single parameter buffer. `t` is the post-increment
/// step count (1 on the first call).
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    p: &mut [f32],
    g: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) {
    let bc1 = 1.0 / (1.0 - (beta1 as f64).powi(t as i32)) as f32;
    let bc2 = 1.0 / (1.0 - (beta2 as f64).powi(t as i32)) as f32;
    for ((pi, &gi), (mi, vi)) in p.iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut())) {
        *mi = beta1 * *mi + (1.0 - beta1) * gi;
        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        let mhat = *mi * bc1;
        let vhat = *vi * bc2;
        *pi -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Standard Adam with bias correction over a whole model; `state.t` is
/// incremented exactly once per call.
pub fn adam_step(model: &mut Model, grads: &[Vec<f32>], state: &mut AdamState) -> Result<()> {
    state.t += 1;
    let (t, lr, b1, b2, eps) = (state.t, state.lr, state.beta1, state.beta2, state.eps);
    let mut idx = 0usize;
    let mut bad: Option<Error> = None;
    let (ms, vs) = (&mut state.m, &mut state.v);
    model.visit_mut(&mut |name, tensor| {
        if bad.is_some() {
            return;
        }
        if idx >= grads.len() || grads[idx].len() != tensor.numel() {
            bad = Some(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!("gradient for {name} does not match parameter"),
            });
            return;
        }
        adam_update(
            tensor.data_mut(),
            &grads[idx],
            &mut ms[idx],
            &mut vs[idx],
            t,
            lr,
            b1,
            b2,
            eps,
        );
        idx += 1;
    });
    if let Some(e) = bad {
        return Err(e);
    }
    if idx != grads.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            detail: format!("{} gradients for {idx} parameters", grads.len()),
        });
    }
    Ok(())
}

// ── Config ───────────────────────────────────────────────────────────

fn default_seq_len() -> usize {
    64
}
fn default_payload_len() -> usize {
    8
}
fn default_distance() -> usize {
    16
}
fn default_pairs() -> usize {
    4
}

/// Task selection and dimensions. Kind and vocabulary are the only fields
/// without defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub payload_symbols: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_payload_len")]
    pub payload_len: usize,
    #[serde(default = "default_distance")]
    pub distance: usize,
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
}

impl TaskConfig {
    pub fn vocab(&self) -> Result<VocabSpec> {
        VocabSpec::new(self.payload_symbols)
    }

    pub fn generate(&self, seed: u64, batch: usize) -> Result<TaskBatch> {
        let vocab = self.vocab()?;
        match self.kind {
            TaskKind::Copy => gen_copy_batch(
                seed,
                batch,
                self.seq_len,
                self.payload_len,
                self.distance,
                vocab,
            ),
            TaskKind::AssocRecall => {
                gen_assoc_recall_batch(seed, batch, self.seq_len, self.n_pairs, vocab)
            }
        }
    }
}

fn default_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f32 {
    3e-4
}
fn default_tau_start() -> f32 {
    1.0
}
fn default_tau_min() -> f32 {
    0.1
}
fn default_tau_decay() -> f32 {
    0.999
}
fn default_seed() -> u64 {
    42
}
fn default_eval_every() -> usize {
    100
}
fn default_kind() -> ModelKind {
    ModelKind::Pointer
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_kind")]
    pub model_kind: ModelKind,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_tau_start")]
    pub tau_start: f32,
    #[serde(default = "default_tau_min")]
    pub tau_min: f32,
    #[serde(default = "default_tau_decay")]
    pub tau_decay: f32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Global-norm gradient clip; absent means no clipping.
    #[serde(default)]
    pub grad_clip: Option<f32>,
    pub task: TaskConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_start >= self.tau_min && self.tau_min > 0.0) {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "need tau_start >= tau_min > 0, got {} and {}",
                    self.tau_start, self.tau_min
                ),
            });
        }
        if !(self.tau_decay > 0.0 && self.tau_decay <= 1.0) {
            return Err(Error::InvalidConfig {
                detail: format!("tau_decay must be in (0, 1], got {}", self.tau_decay),
            });
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig {
                detail: "batch_size and eval_every must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Fill vocab_size/max_seq_len from the task when left at 0, and check
/// consistency otherwise.
pub fn resolve_model_cfg(model: &ModelConfig, task: &TaskConfig) -> Result<ModelConfig> {
    let vocab = task.vocab()?.total();
    let mut cfg = model.clone();
    if cfg.vocab_size == 0 {
        cfg.vocab_size = vocab;
    } else if cfg.vocab_size < vocab {
        return Err(Error::InvalidConfig {
            detail: format!("vocab_size {} < task vocabulary {vocab}", cfg.vocab_size),
        });
    }
    if cfg.max_seq_len == 0 {
        cfg.max_seq_len = task.seq_len;
    } else if cfg.max_seq_len < task.seq_len {
        return Err(Error::InvalidConfig {
            detail: format!(
                "max_seq_len {} < task seq_len {}",
                cfg.max_seq_len, task.seq_len
            ),
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

// ── Temperature schedule ─────────────────────────────────────────────

/// tau(step) = max(tau_min, tau_start · tau_decay^step).
pub fn temperature_at(step: usize, cfg: &TrainConfig) -> f32 {
    let decayed = cfg.tau_start as f64 * (cfg.tau_decay as f64).powi(step as i32);
    (decayed as f32).max(cfg.tau_min)
}

// ── Metrics ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: f32,
    pub accuracy: f64,
    pub tau: f32,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsHistory {
    pub records: Vec<EvalRecord>,
}

impl MetricsHistory {
    /// CSV with the stable column set `step,loss,accuracy,tau,wall_s`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,accuracy,tau,wall_s\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.3}\n",
                r.step, r.loss, r.accuracy, r.tau, r.wall_s
            ));
        }
        out
    }
}

// ── Training loop ────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub model: Model,
    pub adam: AdamState,
    pub history: MetricsHistory,
    pub model_cfg: ModelConfig,
}

/// One full optimization step on a batch: soft forward per row, per-row
/// gradient accumulation in registry order, optional global-norm clip, Adam
/// update. Returns the mean training loss. This is exactly what the
/// benchmark harness times.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    mcfg: &ModelConfig,
    batch: &TaskBatch,
    adam: &mut AdamState,
    tau: f32,
    noise_seed: u64,
    clip: Option<f32>,
    grads: &mut [Vec<f32>],
) -> Result<f32> {
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|x| *x = 0.0);
    }
    let mut loss_sum = 0.0f64;
    for b in 0..batch.batch {
        let (inp, tgt, msk) = batch.row(b);
        let mut tape = Tape::new();
        let phase = Phase::Train {
            tau,
            noise_scale: 1.0,
            seed: fanout(noise_seed, "row", &[b as u64]),
            collect_alpha: false,
        };
        let (logits, reg, _) = model.forward(&mut tape, inp, mcfg, phase)?;
        let loss = tape.cross_entropy(logits, tgt, msk)?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::NonFinite { op: "train_loss" });
        }
        loss_sum += lv as f64;
        tape.backward(loss)?;
        for (slot, (_, var)) in reg.entries().iter().enumerate() {
            if let Some(g) = tape.grad(*var) {
                kernels::axpy(&mut grads[slot], 1.0, g);
            }
        }
    }
    let inv_b = 1.0 / batch.batch as f32;
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|x| *x *= inv_b);
    }
    if let Some(clip) = clip {
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if norm > clip as f64 {
            let s = (clip as f64 / norm) as f32;
            for g in grads.iter_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    adam_step(model, grads, adam)?;
    Ok((loss_sum / batch.batch as f64) as f32)
}

/// Hard-inference evaluation on a fixed batch: masked-mean loss and token
/// accuracy.
pub fn evaluate(model: &Model, cfg: &ModelConfig, batch: &TaskBatch) -> Result<(f32, f64)> {
    let mut loss_sum = 0.0f64;
    let mut preds: Vec<u32> = Vec::with_capacity(batch.inputs.len());
    for b in 0..batch.batch {
        let (inp, tgt, msk) = batch.row(b);
        let mut tape = Tape::new();
        let (logits, _, _) = model.forward(&mut tape, inp, cfg, Phase::Infer)?;
        let loss = tape.cross_entropy(logits, tgt, msk)?;
        loss_sum += tape.value(loss).data()[0] as f64;
        let lv = tape.value(logits);
        for r in 0..lv.leading() {
            preds.push(kernels::argmax(lv.row(r)) as u32);
        }
    }
    let acc = token_accuracy(&preds, &batch.targets, &batch.mask)?;
    Ok(((loss_sum / batch.batch as f64) as f32, acc))
}

/// Run the full loop: per step, generate a batch, soft forward at the
/// scheduled temperature, accumulate per-row gradients, Adam update.
/// Evaluates with hard inference at step 0, every `eval_every` steps, and
/// after the final step.
pub fn train_loop(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = resolve_model_cfg(model_cfg, &cfg.task)?;
    let mut model = Model::init(cfg.model_kind, &mcfg, cfg.seed)?;
    let mut adam = AdamState::for_model(&model, cfg.lr);
    let sizes: Vec<usize> = adam.m.iter().map(Vec::len).collect();
    let eval_batch = cfg.task.generate(fanout(cfg.seed, "eval", &[]), cfg.batch_size)?;
    let mut history = MetricsHistory::default();
    let start = Instant::now();

    let record = |model: &Model, step: usize, tau: f32, history: &mut MetricsHistory| -> Result<()> {
        let (loss, accuracy) = evaluate(model, &mcfg, &eval_batch)?;
        history.records.push(EvalRecord {
            step,
            loss,
            accuracy,
            tau,
            wall_s: start.elapsed().as_secs_f64(),
        });
        Ok(())
    };

    record(&model, 0, temperature_at(0, cfg), &mut history)?;

    let mut grads: Vec<Vec<f32>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    for step in 0..cfg.steps {
        let tau = temperature_at(step, cfg);
        let batch = cfg
            .task
            .generate(fanout(cfg.seed, "data", &[step as u64]), cfg.batch_size)?;
        train_step(
            &mut model,
            &mcfg,
            &batch,
            &mut adam,
            tau,
            fanout(cfg.seed, "gumbel", &[step as u64]),
            cfg.grad_clip,
            &mut grads,
        )?;

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            record(&model, done, temperature_at(done, cfg), &mut history)?;
        }
    }

    Ok(TrainOutcome {
        model,
        adam,
        history,
        model_cfg: mcfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_task() -> TaskConfig {
        TaskConfig {
            kind: TaskKind::Copy,
            payload_symbols: 8,
            seq_len: 16,
            payload_len: 3,
            distance: 2,
            n_pairs: 0,
        }
    }

    fn tiny_train(steps: usize) -> TrainConfig {
        TrainConfig {
            model_kind: ModelKind::Pointer,
            steps,
            batch_size: 4,
            lr: 3e-4,
            tau_start: 1.0,
            tau_min: 0.1,
            tau_decay: 0.999,
            seed: 42,
            eval_every: 5,
            grad_clip: None,
            task: tiny_task(),
        }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            scoring_mode: crate::pointer::ScoringMode::Dense,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn adam_zero_grads_leave_params_and_bump_t() {
        let mut model = Model::init(ModelKind::Pointer, &resolve_model_cfg(&tiny_model(), &tiny_task()).unwrap(), 1).unwrap();
        let before = model.named_params();
        let mut adam = AdamState::for_model(&model, 0.1);
        let grads: Vec<Vec<f32>> = adam.m.iter().map(|m| vec![0.0; m.len()]).collect();
        adam_step(&mut model, &grads, &mut adam).unwrap();
        assert_eq!(adam.t, 1);
        for ((_, a), (_, b)) in before.iter().zip(model.named_params().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // t=1 closed form: update = -lr * g / (|g| + eps')
        let mut p = vec![1.0f32];
        let mut m = vec![0.0f32];
        let mut v = vec![0.0f32];
        adam_update(&mut p, &[0.37], &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8);
        assert!((p[0] - (1.0 - 0.1)).abs() < 1e-5, "got {}", p[0]);
        let mut p = vec![-0.5f32];
        let mut m = vec![0.0f32];
        let mut v = vec![0.0f32];
        adam_update(&mut p, &[-2.0], &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8);
        assert!((p[0] - (-0.5 + 0.1)).abs() < 1e-5, "got {}", p[0]);
    }

    #[test]
    fn adam_three_step_scalar_trace_matches_f64_oracle() {
        let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64);
        let grads = [0.3f64, -0.7, 0.05];
        // f64 reference
        let (mut p, mut m, mut v) = (0.2f64, 0.0f64, 0.0f64);
        let mut want = Vec::new();
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            p -= lr * mhat / (vhat.sqrt() + eps);
            want.push(p);
        }
        // f32 implementation
        let mut pf = vec![0.2f32];
        let mut mf = vec![0.0f32];
        let mut vf = vec![0.0f32];
        for (i, &g) in grads.iter().enumerate() {
            adam_update(
                &mut pf,
                &[g as f32],
                &mut mf,
                &mut vf,
                (i + 1) as u64,
                lr as f32,
                b1 as f32,
                b2 as f32,
                eps as f32,
            );
            assert!(
                (pf[0] as f64 - want[i]).abs() < 1e-6,
                "step {}: {} vs {}",
                i + 1,
                pf[0],
                want[i]
            );
        }
    }

    #[test]
    fn temperature_schedule_examples() {
        let cfg = TrainConfig {
            tau_min: 1e-4,
            ..tiny_train(1)
        };
        assert_eq!(temperature_at(0, &cfg), cfg.tau_start);
        let mut last = f32::INFINITY;
        for step in [0, 1, 10, 100, 1000, 10000] {
            let tau = temperature_at(step, &cfg);
            assert!(tau <= last);
            last = tau;
        }
        // 0.999^4605 ≈ e^-4.607 ≈ 0.01
        let tau = temperature_at(4605, &cfg);
        assert!((tau - 0.01).abs() < 5e-4, "got {tau}");
        // floor holds
        let cfg2 = TrainConfig {
            tau_min: 0.5,
            ..tiny_train(1)
        };
        assert_eq!(temperature_at(100000, &cfg2), 0.5);
    }

    #[test]
    fn train_loop_is_deterministic() {
        let cfg = tiny_train(6);
        let a = train_loop(&tiny_model(), &cfg).unwrap();
        let b = train_loop(&tiny_model(), &cfg).unwrap();
        assert_eq!(a.history.records.len(), b.history.records.len());
        for (ra, rb) in a.history.records.iter().zip(&b.history.records) {
            assert_eq!(ra.step, rb.step);
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.accuracy, rb.accuracy);
            assert_eq!(ra.tau.to_bits(), rb.tau.to_bits());
        }
        // params identical too
        for ((_, ta), (_, tb)) in a.model.named_params().iter().zip(b.model.named_params().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn zero_lr_freezes_eval_loss() {
        let cfg = TrainConfig {
            lr: 0.0,
            ..tiny_train(10)
        };
        let out = train_loop(&tiny_model(), &cfg).unwrap();
        let first = out.history.records[0].loss;
        for r in &out.history.records {
            assert_eq!(r.loss.to_bits(), first.to_bits());
        }
    }

    #[test]
    fn history_steps_strictly_increase() {
        let cfg = tiny_train(12);
        let out = train_loop(&tiny_model(), &cfg).unwrap();
        for w in out.history.records.windows(2) {
            assert!(w[1].step > w[0].step);
        }
        assert_eq!(out.history.records.last().unwrap().step, 12);
    }
}
