//! Wall-clock scaling harness.
//!
//! Times full training steps (forward + backward + Adam) on fixed synthetic
//! batches across sequence lengths, reports median step time, throughput,
//! analytic flop estimates and an allocator high-water mark, then fits
//! log-log slopes and per-length speedups. Timed regions run back to back,
//! never overlapped; with the default one-thread pool they are strictly
//! single-threaded.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::pointer::{ModelConfig, ScoringMode};
use crate::rng::{fanout, Stream};
use crate::tasks::{TaskBatch, TaskKind, TaskMeta};
use crate::train::{train_step, AdamState};

// ── Allocator high-water tracking ────────────────────────────────────

/// Byte-counting wrapper around the system allocator. Install it in a
/// binary with `#[global_allocator]`; without installation the peak reads 0
/// and records are labeled accordingly. The number is an estimate of live
/// heap, not RSS.
pub mod alloc_track {
    use std::alloc::{GlobalAlloc, Layout, System};
    use std::sync::atomic::{AtomicUsize, Ordering};

    static CURRENT: AtomicUsize = AtomicUsize::new(0);
    static PEAK: AtomicUsize = AtomicUsize::new(0);

    pub struct PeakAlloc;

    unsafe impl GlobalAlloc for PeakAlloc {
        unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
            let p = System.alloc(layout);
            if !p.is_null() {
                let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            }
            p
        }

        unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
            System.dealloc(ptr, layout);
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
        }

        unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
            let p = System.realloc(ptr, layout, new_size);
            if !p.is_null() {
                if new_size >= layout.size() {
                    let now =
                        CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size
                            - layout.size();
                    PEAK.fetch_max(now, Ordering::Relaxed);
                } else {
                    CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
                }
            }
            p
        }
    }

    /// Reset the high-water mark to the current live total.
    pub fn reset_peak() {
        PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    pub fn peak_bytes() -> usize {
        PEAK.load(Ordering::Relaxed)
    }
}

// ── Records ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub model: ModelKind,
    pub seq_len: usize,
    pub reps: usize,
    pub median_step_s: f64,
    pub tokens_per_s: f64,
    /// Analytic forward-pass multiply-accumulate estimate for one batch row.
    pub flops: u64,
    /// Allocator high-water estimate over the timed reps; 0 when the
    /// tracker is not installed in the running binary.
    pub peak_alloc_bytes: usize,
}

pub const CSV_HEADER: &str = "model,seq_len,reps,median_step_s,tokens_per_s,flops,peak_alloc_bytes";

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.1},{},{}",
            self.model,
            self.seq_len,
            self.reps,
            self.median_step_s,
            self.tokens_per_s,
            self.flops,
            self.peak_alloc_bytes
        )
    }
}

pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

// ── Harness ──────────────────────────────────────────────────────────

/// Fixed comparison setup: identical configs across models, only the mixing
/// mechanism differs. Batch is pinned small so a step is one comparable
/// unit of work.
#[derive(Debug, Clone)]
pub struct BenchParams {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub batch: usize,
    pub candidate_budget: usize,
    pub local_window: usize,
    pub n_strided_anchors: usize,
    pub vocab: usize,
    pub causal: bool,
    /// Scoring mode for the pointer model (the vanilla baseline ignores it).
    pub scoring_mode: ScoringMode,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            d_model: 256,
            n_layers: 6,
            n_heads: 8,
            batch: 4,
            candidate_budget: 32,
            local_window: 16,
            n_strided_anchors: 8,
            vocab: 32,
            causal: true,
            scoring_mode: ScoringMode::Candidate,
        }
    }
}

impl BenchParams {
    pub fn model_cfg(&self, seq_len: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            vocab_size: self.vocab,
            max_seq_len: seq_len,
            causal: self.causal,
            scoring_mode: self.scoring_mode,
            candidate_budget: self.candidate_budget,
            local_window: self.local_window,
            n_strided_anchors: self.n_strided_anchors,
        }
    }
}

/// Uniform-random tokens and targets with full supervision; fixed for the
/// whole timing run.
fn synthetic_batch(seed: u64, batch: usize, seq_len: usize, vocab: usize) -> TaskBatch {
    let mut rng = Stream::new(fanout(seed, "bench_batch", &[]));
    let total = batch * seq_len;
    TaskBatch {
        inputs: (0..total).map(|_| rng.below(vocab) as u32).collect(),
        targets: (0..total).map(|_| rng.below(vocab) as u32).collect(),
        mask: vec![true; total],
        batch,
        seq_len,
        meta: TaskMeta {
            kind: TaskKind::Copy,
            distance: 0,
            payload_len: 0,
            n_pairs: 0,
        },
    }
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Time `reps` full training steps after `warmup` untimed ones. The median
/// suppresses allocator and scheduler outliers.
pub fn time_training_step(
    kind: ModelKind,
    seq_len: usize,
    reps: usize,
    warmup: usize,
    params: &BenchParams,
    seed: u64,
) -> Result<BenchRecord> {
    if reps < 5 || warmup < 2 {
        return Err(Error::InvalidConfig {
            detail: format!("need reps >= 5 and warmup >= 2, got {reps}/{warmup}"),
        });
    }
    let cfg = params.model_cfg(seq_len);
    cfg.validate()?;
    let mut model = Model::init(kind, &cfg, seed)?;
    let mut adam = AdamState::for_model(&model, 3e-4);
    let mut grads: Vec<Vec<f32>> = adam.m.iter().map(|m| vec![0.0; m.len()]).collect();
    let batch = synthetic_batch(seed, params.batch, seq_len, params.vocab);

    let mut step = |i: usize, model: &mut Model, adam: &mut AdamState| -> Result<f64> {
        let t = Instant::now();
        train_step(
            model,
            &cfg,
            &batch,
            adam,
            1.0,
            fanout(seed, "bench_noise", &[i as u64]),
            None,
            &mut grads,
        )?;
        Ok(t.elapsed().as_secs_f64())
    };

    for i in 0..warmup {
        step(i, &mut model, &mut adam)?;
    }
    alloc_track::reset_peak();
    let mut times = Vec::with_capacity(reps);
    for i in 0..reps {
        times.push(step(warmup + i, &mut model, &mut adam)?);
    }
    let med = median(&mut times);
    Ok(BenchRecord {
        model: kind,
        seq_len,
        reps,
        median_step_s: med,
        tokens_per_s: (params.batch * seq_len) as f64 / med,
        flops: flop_count(kind, seq_len, &cfg).model_total,
        peak_alloc_bytes: alloc_track::peak_bytes(),
    })
}

// ── Scaling report ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ScalingReport {
    /// Least-squares slope of ln(median time) vs ln(N), per model.
    pub slopes: Vec<(ModelKind, f64)>,
    /// (N, vanilla-time / pointer-time) for lengths present in both.
    pub speedups: Vec<(usize, f64)>,
}

/// Fit per-model scaling exponents and per-length speedups.
pub fn scaling_report(records: &[BenchRecord]) -> Result<ScalingReport> {
    let mut slopes = Vec::new();
    for kind in [ModelKind::Pointer, ModelKind::Vanilla] {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.model == kind)
            .map(|r| ((r.seq_len as f64).ln(), r.median_step_s.ln()))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let mut ns: Vec<usize> = records
            .iter()
            .filter(|r| r.model == kind)
            .map(|r| r.seq_len)
            .collect();
        ns.sort_unstable();
        ns.dedup();
        if ns.len() < 2 {
            return Err(Error::InsufficientData { got: ns.len() });
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let var: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        slopes.push((kind, cov / var));
    }
    let mut speedups = Vec::new();
    let mut lengths: Vec<usize> = records.iter().map(|r| r.seq_len).collect();
    lengths.sort_unstable();
    lengths.dedup();
    for &len in &lengths {
        let find = |kind: ModelKind| {
            records
                .iter()
                .find(|r| r.model == kind && r.seq_len == len)
                .map(|r| r.median_step_s)
        };
        if let (Some(p), Some(v)) = (find(ModelKind::Pointer), find(ModelKind::Vanilla)) {
            speedups.push((len, v / p));
        }
    }
    Ok(ScalingReport { slopes, speedups })
}

/// Human-readable summary: step times per model, a speedup row, then
/// throughput per model.
pub fn summary_table(records: &[BenchRecord], report: &ScalingReport) -> String {
    let mut lengths: Vec<usize> = records.iter().map(|r| r.seq_len).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let cell = |kind: ModelKind, len: usize, f: &dyn Fn(&BenchRecord) -> String| {
        records
            .iter()
            .find(|r| r.model == kind && r.seq_len == len)
            .map(f)
            .unwrap_or_else(|| "-".into())
    };
    let mut out = String::new();
    out.push_str(&format!("{:<22}", "Sequence Length"));
    for &l in &lengths {
        out.push_str(&format!("{l:>12}"));
    }
    out.push('\n');
    out.push_str("Training Time (seconds)\n");
    for kind in [ModelKind::Pointer, ModelKind::Vanilla] {
        out.push_str(&format!("{:<22}", kind.to_string()));
        for &l in &lengths {
            out.push_str(&format!(
                "{:>12}",
                cell(kind, l, &|r| format!("{:.3}", r.median_step_s))
            ));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<22}", "speedup"));
    for &l in &lengths {
        match report.speedups.iter().find(|(n, _)| *n == l) {
            Some((_, s)) => out.push_str(&format!("{:>11.2}x", s)),
            None => out.push_str(&format!("{:>12}", "-")),
        }
    }
    out.push('\n');
    out.push_str("Throughput (tokens/second)\n");
    for kind in [ModelKind::Pointer, ModelKind::Vanilla] {
        out.push_str(&format!("{:<22}", kind.to_string()));
        for &l in &lengths {
            out.push_str(&format!(
                "{:>12}",
                cell(kind, l, &|r| format!("{:.0}", r.tokens_per_s))
            ));
        }
        out.push('\n');
    }
    for (kind, slope) in &report.slopes {
        out.push_str(&format!("log-log slope {kind}: {slope:.3}\n"));
    }
    out
}

// ── Flop accounting ──────────────────────────────────────────────────

/// Forward-pass multiply-accumulate counts for one sequence, split by term.
/// Elementwise and normalization work is excluded; these are the matrix and
/// dot-product terms that dominate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopBreakdown {
    /// Score computation: N²·d dense / N·K·d candidate.
    pub scores: u64,
    /// Value mixing: N²·d attention / N·K·d soft aggregation.
    pub mix: u64,
    /// Per-layer input/output projections (q, k, v, o or q, k, gate).
    pub projections: u64,
    /// Chain conditioning: pointer encode (1→d) plus 2d→d merge.
    pub chain: u64,
    /// Two-layer FFN at 4·d hidden width.
    pub ffn: u64,
    pub per_layer: u64,
    /// Final vocab projection.
    pub head: u64,
    pub model_total: u64,
}

/// Closed-form per-layer and whole-model operation counts.
pub fn flop_count(kind: ModelKind, seq_len: usize, cfg: &ModelConfig) -> FlopBreakdown {
    let n = seq_len as u64;
    let d = cfg.d_model as u64;
    let (scores, mix, projections, chain) = match kind {
        ModelKind::Vanilla => (n * n * d, n * n * d, 4 * n * d * d, 0),
        ModelKind::Pointer => {
            let pair_budget = match cfg.scoring_mode {
                ScoringMode::Dense => n,
                ScoringMode::Candidate => cfg.candidate_budget as u64,
            };
            (
                n * pair_budget * d,
                n * pair_budget * d,
                3 * n * d * d,
                n * d + 2 * n * d * d,
            )
        }
    };
    let ffn = 8 * n * d * d;
    let per_layer = scores + mix + projections + chain + ffn;
    let head = n * d * cfg.vocab_size as u64;
    FlopBreakdown {
        scores,
        mix,
        projections,
        chain,
        ffn,
        per_layer,
        head,
        model_total: cfg.n_layers as u64 * per_layer + head,
    }
}
