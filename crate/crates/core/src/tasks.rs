//! Seeded synthetic tasks probing long-range recall.
//!
//! Copy: reproduce a payload after a PAD gap.
//!
//! ```text
//! input:  a b c d COPY PAD*D BLANK*P PAD...
//! target: a b c d COPY PAD*D a b c d PAD...
//! ```
//!
//! Associative recall: retrieve the value paired with a queried key.
//!
//! ```text
//! input:  k1 v1 k2 v2 ... QUERY kq BLANK PAD...
//! ```
//!
//! Generators are pure functions of (seed, params); the copy generator is
//! its own parser so layouts round-trip exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fanout, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    AssocRecall,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Copy => write!(f, "copy"),
            TaskKind::AssocRecall => write!(f, "assoc_recall"),
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "assoc_recall" => Ok(TaskKind::AssocRecall),
            other => Err(Error::InvalidConfig {
                detail: format!("unknown task '{other}' (expected copy or assoc_recall)"),
            }),
        }
    }
}

/// Payload symbols occupy ids [0, payload_symbols); the five specials sit
/// directly above them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub payload_symbols: usize,
}

impl VocabSpec {
    pub fn new(payload_symbols: usize) -> Result<Self> {
        if payload_symbols == 0 {
            return Err(Error::InvalidConfig {
                detail: "payload_symbols must be positive".into(),
            });
        }
        Ok(VocabSpec { payload_symbols })
    }

    pub fn pad(&self) -> u32 {
        self.payload_symbols as u32
    }

    pub fn copy(&self) -> u32 {
        self.payload_symbols as u32 + 1
    }

    pub fn blank(&self) -> u32 {
        self.payload_symbols as u32 + 2
    }

    pub fn query(&self) -> u32 {
        self.payload_symbols as u32 + 3
    }

    pub fn sep(&self) -> u32 {
        self.payload_symbols as u32 + 4
    }

    /// Total vocabulary: payload symbols plus the five specials.
    pub fn total(&self) -> usize {
        self.payload_symbols + 5
    }

    /// Key symbols for associative recall: the lower half of the payload
    /// range. Values take the upper half, so chance level is well-defined.
    pub fn key_range(&self) -> usize {
        self.payload_symbols / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskMeta {
    pub kind: TaskKind,
    pub distance: usize,
    pub payload_len: usize,
    pub n_pairs: usize,
}

/// A batch of rows with per-position supervision mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
    pub meta: TaskMeta,
}

impl TaskBatch {
    pub fn row(&self, b: usize) -> (&[u32], &[u32], &[bool]) {
        let n = self.seq_len;
        (
            &self.inputs[b * n..(b + 1) * n],
            &self.targets[b * n..(b + 1) * n],
            &self.mask[b * n..(b + 1) * n],
        )
    }
}

/// Copy batch: payload | COPY | D pads | P blanks | trailing pads.
/// `distance` is the PAD gap between COPY and the first BLANK.
pub fn gen_copy_batch(
    seed: u64,
    batch: usize,
    seq_len: usize,
    payload_len: usize,
    distance: usize,
    vocab: VocabSpec,
) -> Result<TaskBatch> {
    if payload_len == 0 || batch == 0 {
        return Err(Error::InvalidConfig {
            detail: "payload_len and batch must be positive".into(),
        });
    }
    let used = 2 * payload_len + 1 + distance;
    if used > seq_len {
        return Err(Error::LayoutOverflow {
            detail: format!(
                "payload {payload_len} + COPY + gap {distance} + payload needs {used} > {seq_len}"
            ),
        });
    }
    let mut rng = Stream::new(fanout(seed, "task_copy", &[]));
    let mut inputs = Vec::with_capacity(batch * seq_len);
    let mut targets = Vec::with_capacity(batch * seq_len);
    let mut mask = vec![false; batch * seq_len];
    for b in 0..batch {
        let payload: Vec<u32> = (0..payload_len)
            .map(|_| rng.below(vocab.payload_symbols) as u32)
            .collect();
        let row_start = b * seq_len;
        inputs.extend_from_slice(&payload);
        inputs.push(vocab.copy());
        inputs.extend(std::iter::repeat(vocab.pad()).take(distance));
        inputs.extend(std::iter::repeat(vocab.blank()).take(payload_len));
        inputs.extend(std::iter::repeat(vocab.pad()).take(seq_len - used));

        targets.extend_from_slice(&inputs[row_start..row_start + seq_len]);
        let blank_start = payload_len + 1 + distance;
        for (i, &p) in payload.iter().enumerate() {
            targets[row_start + blank_start + i] = p;
            mask[row_start + blank_start + i] = true;
        }
    }
    Ok(TaskBatch {
        inputs,
        targets,
        mask,
        batch,
        seq_len,
        meta: TaskMeta {
            kind: TaskKind::Copy,
            distance,
            payload_len,
            n_pairs: 0,
        },
    })
}

/// Recover (payload, distance) from a generated copy row. The generator is
/// its own parser: any row it emits must round-trip through here.
pub fn parse_copy_row(row: &[u32], vocab: VocabSpec) -> Result<(Vec<u32>, usize)> {
    let fail = |detail: String| Error::TaskFormat { detail };
    let copy_pos = row
        .iter()
        .position(|&t| t == vocab.copy())
        .ok_or_else(|| fail("no COPY token".into()))?;
    let payload: Vec<u32> = row[..copy_pos].to_vec();
    if payload.is_empty() || payload.iter().any(|&t| t >= vocab.payload_symbols as u32) {
        return Err(fail("prefix before COPY is not a pure payload".into()));
    }
    let mut i = copy_pos + 1;
    let mut distance = 0;
    while i < row.len() && row[i] == vocab.pad() {
        distance += 1;
        i += 1;
    }
    let mut blanks = 0;
    while i < row.len() && row[i] == vocab.blank() {
        blanks += 1;
        i += 1;
    }
    if blanks != payload.len() {
        return Err(fail(format!("{blanks} blanks for payload of {}", payload.len())));
    }
    if row[i..].iter().any(|&t| t != vocab.pad()) {
        return Err(fail("trailing tokens after blanks are not PAD".into()));
    }
    Ok((payload, distance))
}

/// Associative recall batch: k v pairs, a queried key, one BLANK to fill.
pub fn gen_assoc_recall_batch(
    seed: u64,
    batch: usize,
    seq_len: usize,
    n_pairs: usize,
    vocab: VocabSpec,
) -> Result<TaskBatch> {
    let keys_avail = vocab.key_range();
    let values_avail = vocab.payload_symbols - keys_avail;
    if n_pairs == 0 || batch == 0 {
        return Err(Error::InvalidConfig {
            detail: "n_pairs and batch must be positive".into(),
        });
    }
    if n_pairs > keys_avail || values_avail == 0 {
        return Err(Error::InvalidConfig {
            detail: format!("{n_pairs} pairs need {n_pairs} distinct keys, vocab offers {keys_avail}"),
        });
    }
    let used = 2 * n_pairs + 3; // pairs, QUERY, key, BLANK
    if used > seq_len {
        return Err(Error::LayoutOverflow {
            detail: format!("{n_pairs} pairs + query need {used} > {seq_len}"),
        });
    }
    let mut rng = Stream::new(fanout(seed, "task_assoc", &[]));
    let mut inputs = Vec::with_capacity(batch * seq_len);
    let mut targets = Vec::with_capacity(batch * seq_len);
    let mut mask = vec![false; batch * seq_len];
    let mut key_pool: Vec<u32> = (0..keys_avail as u32).collect();
    for b in 0..batch {
        // partial Fisher-Yates for distinct keys
        for t in 0..n_pairs {
            let pick = t + rng.below(keys_avail - t);
            key_pool.swap(t, pick);
        }
        let keys = &key_pool[..n_pairs];
        let values: Vec<u32> = (0..n_pairs)
            .map(|_| (keys_avail + rng.below(values_avail)) as u32)
            .collect();
        let q_idx = rng.below(n_pairs);

        let row_start = b * seq_len;
        for (k, v) in keys.iter().zip(values.iter()) {
            inputs.push(*k);
            inputs.push(*v);
        }
        inputs.push(vocab.query());
        inputs.push(keys[q_idx]);
        inputs.push(vocab.blank());
        inputs.extend(std::iter::repeat(vocab.pad()).take(seq_len - used));

        targets.extend_from_slice(&inputs[row_start..row_start + seq_len]);
        let blank_pos = 2 * n_pairs + 2;
        targets[row_start + blank_pos] = values[q_idx];
        mask[row_start + blank_pos] = true;
    }
    Ok(TaskBatch {
        inputs,
        targets,
        mask,
        batch,
        seq_len,
        meta: TaskMeta {
            kind: TaskKind::AssocRecall,
            distance: 0,
            payload_len: 0,
            n_pairs,
        },
    })
}

/// Fraction of masked positions where prediction equals target.
pub fn token_accuracy(preds: &[u32], targets: &[u32], mask: &[bool]) -> Result<f64> {
    if preds.len() != targets.len() || preds.len() != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "token_accuracy",
            detail: format!("{} preds, {} targets, {} mask", preds.len(), targets.len(), mask.len()),
        });
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for ((&p, &t), &m) in preds.iter().zip(targets).zip(mask) {
        if m {
            total += 1;
            if p == t {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> VocabSpec {
        VocabSpec::new(16).unwrap()
    }

    #[test]
    fn copy_layout_matches_listing_for_p4_d0() {
        let v = vocab();
        let b = gen_copy_batch(7, 1, 12, 4, 0, v).unwrap();
        let (input, target, mask) = b.row(0);
        let payload = &input[..4];
        assert!(payload.iter().all(|&t| t < 16));
        assert_eq!(input[4], v.copy());
        assert_eq!(&input[5..9], &[v.blank(); 4]);
        assert_eq!(&input[9..], &[v.pad(); 3]);
        assert_eq!(&target[..5], &input[..5]);
        assert_eq!(&target[5..9], payload);
        assert_eq!(&target[9..], &[v.pad(); 3]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 4);
        assert!(mask[5..9].iter().all(|&m| m));
    }

    #[test]
    fn copy_same_seed_same_batch() {
        let a = gen_copy_batch(42, 3, 32, 5, 4, vocab()).unwrap();
        let b = gen_copy_batch(42, 3, 32, 5, 4, vocab()).unwrap();
        assert_eq!(a, b);
        let c = gen_copy_batch(43, 3, 32, 5, 4, vocab()).unwrap();
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn copy_mask_count_and_agreement_off_mask() {
        for (p, d, n) in [(1usize, 0usize, 3usize), (8, 16, 64), (4, 9, 40), (2, 0, 5)] {
            let b = gen_copy_batch(9, 4, n, p, d, vocab()).unwrap();
            for r in 0..4 {
                let (input, target, mask) = b.row(r);
                assert_eq!(mask.iter().filter(|&&m| m).count(), p);
                for i in 0..n {
                    if !mask[i] {
                        assert_eq!(input[i], target[i], "row {r} pos {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn copy_layout_overflow_is_error() {
        assert!(matches!(
            gen_copy_batch(1, 1, 8, 4, 0, vocab()),
            Err(Error::LayoutOverflow { .. })
        ));
    }

    #[test]
    fn copy_round_trips_through_parser() {
        let v = vocab();
        let b = gen_copy_batch(11, 2, 48, 6, 10, v).unwrap();
        for r in 0..2 {
            let (input, target, _) = b.row(r);
            let (payload, d) = parse_copy_row(input, v).unwrap();
            assert_eq!(d, 10);
            assert_eq!(payload.len(), 6);
            assert_eq!(&target[17..23], payload.as_slice());
        }
    }

    #[test]
    fn assoc_single_pair_is_forced() {
        let v = vocab();
        let b = gen_assoc_recall_batch(3, 1, 8, 1, v).unwrap();
        let (input, target, mask) = b.row(0);
        assert!(input[0] < v.key_range() as u32);
        assert!(input[1] >= v.key_range() as u32 && input[1] < 16);
        assert_eq!(input[2], v.query());
        assert_eq!(input[3], input[0]);
        assert_eq!(input[4], v.blank());
        assert_eq!(target[4], input[1]);
        assert!(mask[4]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn assoc_keys_distinct_and_answer_matches_scan() {
        let v = vocab();
        for seed in 0..20u64 {
            let b = gen_assoc_recall_batch(seed, 4, 32, 5, v).unwrap();
            for r in 0..4 {
                let (input, target, mask) = b.row(r);
                let keys: Vec<u32> = (0..5).map(|p| input[2 * p]).collect();
                let mut sorted = keys.clone();
                sorted.sort_unstable();
                sorted.dedup();
                assert_eq!(sorted.len(), 5, "duplicate keys at seed {seed}");
                // brute-force scan oracle
                let kq = input[11];
                let want = (0..5)
                    .find(|&p| input[2 * p] == kq)
                    .map(|p| input[2 * p + 1])
                    .unwrap();
                let blank = 12;
                assert!(mask[blank]);
                assert_eq!(target[blank], want);
            }
        }
    }

    #[test]
    fn assoc_rejects_too_many_pairs() {
        assert!(gen_assoc_recall_batch(1, 1, 64, 9, vocab()).is_err()); // only 8 keys
        assert!(matches!(
            gen_assoc_recall_batch(1, 1, 6, 2, vocab()),
            Err(Error::LayoutOverflow { .. })
        ));
    }

    #[test]
    fn accuracy_extremes_and_error() {
        let t = vec![1u32, 2, 3, 4];
        let mask = vec![true, true, false, true];
        assert_eq!(token_accuracy(&t, &t, &mask).unwrap(), 1.0);
        let wrong = vec![9u32, 9, 9, 9];
        assert_eq!(token_accuracy(&wrong, &t, &mask).unwrap(), 0.0);
        assert!(matches!(
            token_accuracy(&t, &t, &[false; 4]),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn accuracy_of_random_predictions_sits_near_chance() {
        // uniform random predictions over the payload range vs uniform
        // targets: expect ~1/V_p within 3 binomial sigmas
        let v = vocab();
        let b = gen_copy_batch(5, 64, 64, 8, 16, v).unwrap();
        let mut rng = Stream::new(999);
        let preds: Vec<u32> = (0..b.inputs.len())
            .map(|_| rng.below(v.payload_symbols) as u32)
            .collect();
        let acc = token_accuracy(&preds, &b.targets, &b.mask).unwrap();
        let n = (64 * 8) as f64;
        let p = 1.0 / 16.0;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!(
            (acc - p).abs() < 3.0 * sigma + 1e-9,
            "acc {acc} vs chance {p} (sigma {sigma})"
        );
    }
}
