//! Pointer-pattern interpretability: hop-distance statistics, selection
//! heatmaps, CSV/PGM export.

use std::io::Write;
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::pointer::{ModelConfig, Phase, PointerTrace};
use crate::tape::Tape;

/// Hard-inference forward pass returning the pointer trace; parameters are
/// untouched, and untrained models probe fine.
pub fn extract_trace(model: &Model, cfg: &ModelConfig, tokens: &[u32]) -> Result<PointerTrace> {
    let mut tape = Tape::new();
    let (_, _, trace) = model.forward(&mut tape, tokens, cfg, Phase::Infer)?;
    trace.ok_or_else(|| Error::InvalidConfig {
        detail: "pointer traces require the pointer model".into(),
    })
}

/// Distances are bucketed in powers of two: bucket 0 holds self-loops,
/// bucket b holds distances in [2^(b-1), 2^b).
pub fn log2_bucket(dist: usize) -> usize {
    if dist == 0 {
        0
    } else {
        1 + dist.ilog2() as usize
    }
}

fn bucket_count(n: usize) -> usize {
    log2_bucket(n.saturating_sub(1)) + 1
}

/// Per-layer hop-distance summary. The absolute histogram sums to the
/// sequence length; backward/forward histograms split the same distances by
/// direction (forward stays empty in causal mode).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerHopStats {
    pub layer: usize,
    pub mean_abs_distance: f64,
    pub max_abs_distance: usize,
    pub self_loop_fraction: f64,
    pub histogram: Vec<u64>,
    pub back_histogram: Vec<u64>,
    pub fwd_histogram: Vec<u64>,
}

/// Hop statistics |p_i - i| per layer.
pub fn hop_stats(trace: &PointerTrace) -> Vec<LayerHopStats> {
    let n = trace.seq_len();
    let buckets = bucket_count(n);
    trace
        .ptrs
        .iter()
        .enumerate()
        .map(|(layer, ptrs)| {
            let mut sum = 0u64;
            let mut max = 0usize;
            let mut self_loops = 0usize;
            let mut histogram = vec![0u64; buckets];
            let mut back_histogram = vec![0u64; buckets];
            let mut fwd_histogram = vec![0u64; buckets];
            for (i, &p) in ptrs.iter().enumerate() {
                let p = p as usize;
                let dist = p.abs_diff(i);
                sum += dist as u64;
                max = max.max(dist);
                if dist == 0 {
                    self_loops += 1;
                }
                histogram[log2_bucket(dist)] += 1;
                if p < i {
                    back_histogram[log2_bucket(dist)] += 1;
                } else if p > i {
                    fwd_histogram[log2_bucket(dist)] += 1;
                }
            }
            LayerHopStats {
                layer,
                mean_abs_distance: sum as f64 / ptrs.len() as f64,
                max_abs_distance: max,
                self_loop_fraction: self_loops as f64 / ptrs.len() as f64,
                histogram,
                back_histogram,
                fwd_histogram,
            }
        })
        .collect()
}

/// Combined hop statistics over several traces of equal sequence length:
/// histograms and counts sum, means weight by position count.
pub fn hop_stats_batch(traces: &[PointerTrace]) -> Result<Vec<LayerHopStats>> {
    let first = traces.first().ok_or_else(|| Error::InvalidConfig {
        detail: "no traces given".into(),
    })?;
    let layers = first.n_layers();
    let n = first.seq_len();
    for t in traces {
        if t.n_layers() != layers || t.seq_len() != n {
            return Err(Error::ShapeMismatch {
                op: "hop_stats_batch",
                detail: "traces have differing shapes".into(),
            });
        }
    }
    let per_trace: Vec<Vec<LayerHopStats>> = traces.iter().map(hop_stats).collect();
    let total = (traces.len() * n) as f64;
    Ok((0..layers)
        .map(|layer| {
            let mut merged = LayerHopStats {
                layer,
                mean_abs_distance: 0.0,
                max_abs_distance: 0,
                self_loop_fraction: 0.0,
                histogram: vec![0; bucket_count(n)],
                back_histogram: vec![0; bucket_count(n)],
                fwd_histogram: vec![0; bucket_count(n)],
            };
            for stats in &per_trace {
                let s = &stats[layer];
                merged.mean_abs_distance += s.mean_abs_distance * n as f64;
                merged.max_abs_distance = merged.max_abs_distance.max(s.max_abs_distance);
                merged.self_loop_fraction += s.self_loop_fraction * n as f64;
                for (m, v) in merged.histogram.iter_mut().zip(&s.histogram) {
                    *m += v;
                }
                for (m, v) in merged.back_histogram.iter_mut().zip(&s.back_histogram) {
                    *m += v;
                }
                for (m, v) in merged.fwd_histogram.iter_mut().zip(&s.fwd_histogram) {
                    *m += v;
                }
            }
            merged.mean_abs_distance /= total;
            merged.self_loop_fraction /= total;
            merged
        })
        .collect())
}

/// JSON lines, one object per layer:
/// {"layer", "mean", "max", "self_loop_fraction", "histogram", ...}.
pub fn hop_stats_json(stats: &[LayerHopStats]) -> String {
    #[derive(Serialize)]
    struct Row<'a> {
        layer: usize,
        mean: f64,
        max: usize,
        self_loop_fraction: f64,
        histogram: &'a [u64],
        back_histogram: &'a [u64],
        fwd_histogram: &'a [u64],
    }
    let rows: Vec<Row> = stats
        .iter()
        .map(|s| Row {
            layer: s.layer,
            mean: s.mean_abs_distance,
            max: s.max_abs_distance,
            self_loop_fraction: s.self_loop_fraction,
            histogram: &s.histogram,
            back_histogram: &s.back_histogram,
            fwd_histogram: &s.fwd_histogram,
        })
        .collect();
    serde_json::to_string_pretty(&rows).expect("serializable")
}

/// Count matrix M[i][j] = how often position i pointed at j in the given
/// layer, across traces. All traces must share a sequence length.
pub fn pointer_heatmap(traces: &[PointerTrace], layer: usize) -> Result<Vec<u64>> {
    let n = traces.first().map_or(0, PointerTrace::seq_len);
    if n == 0 {
        return Err(Error::InvalidConfig {
            detail: "no traces given".into(),
        });
    }
    for t in traces {
        if layer >= t.n_layers() {
            return Err(Error::IndexOutOfRange {
                op: "pointer_heatmap",
                index: layer,
                bound: t.n_layers(),
            });
        }
        if t.seq_len() != n {
            return Err(Error::ShapeMismatch {
                op: "pointer_heatmap",
                detail: "traces have differing sequence lengths".into(),
            });
        }
    }
    let tally = |acc: &mut Vec<u64>, t: &PointerTrace| {
        for (i, &p) in t.ptrs[layer].iter().enumerate() {
            acc[i * n + p as usize] += 1;
        }
    };
    #[cfg(feature = "parallel")]
    {
        if rayon::current_num_threads() > 1 && traces.len() >= 16 {
            // u64 addition is exact, so fold/reduce order cannot change the tally
            return Ok(traces
                .par_iter()
                .fold(
                    || vec![0u64; n * n],
                    |mut acc, t| {
                        tally(&mut acc, t);
                        acc
                    },
                )
                .reduce(
                    || vec![0u64; n * n],
                    |mut a, b| {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                        a
                    },
                ));
        }
    }
    let mut acc = vec![0u64; n * n];
    for t in traces {
        tally(&mut acc, t);
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

/// Write a count matrix as plain CSV rows or binary PGM (P5). PGM pixels
/// are round(255 * count / max); an all-zero matrix stays black.
pub fn export_heatmap(matrix: &[u64], n: usize, path: &Path, format: HeatmapFormat) -> Result<()> {
    if matrix.len() != n * n {
        return Err(Error::ShapeMismatch {
            op: "export_heatmap",
            detail: format!("{} entries for {n}x{n}", matrix.len()),
        });
    }
    let mut file = std::fs::File::create(path)?;
    match format {
        HeatmapFormat::Csv => {
            let mut out = String::new();
            for row in matrix.chunks(n) {
                let cells: Vec<String> = row.iter().map(u64::to_string).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            file.write_all(out.as_bytes())?;
        }
        HeatmapFormat::Pgm => {
            let max = matrix.iter().copied().max().unwrap_or(0);
            let mut out = Vec::with_capacity(32 + n * n);
            out.extend_from_slice(format!("P5\n{n} {n}\n255\n").as_bytes());
            for &c in matrix {
                let px = if max == 0 {
                    0u8
                } else {
                    (255.0 * c as f64 / max as f64).round() as u8
                };
                out.push(px);
            }
            file.write_all(&out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(ptrs: Vec<Vec<u32>>) -> PointerTrace {
        PointerTrace { ptrs, alpha: None }
    }

    #[test]
    fn hand_computed_stats() {
        let t = trace(vec![vec![2, 0, 2]]);
        let s = &hop_stats(&t)[0];
        assert!((s.mean_abs_distance - 1.0).abs() < 1e-12);
        assert_eq!(s.max_abs_distance, 2);
        assert!((s.self_loop_fraction - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.histogram.iter().sum::<u64>(), 3);
    }

    #[test]
    fn all_self_pointers() {
        let t = trace(vec![(0..5u32).collect()]);
        let s = &hop_stats(&t)[0];
        assert_eq!(s.mean_abs_distance, 0.0);
        assert_eq!(s.self_loop_fraction, 1.0);
        assert_eq!(s.histogram[0], 5);
        assert!(s.back_histogram.iter().all(|&c| c == 0));
    }

    #[test]
    fn heatmap_single_trace_has_unit_rows() {
        let t = trace(vec![vec![1, 0, 2, 1]]);
        let m = pointer_heatmap(&[t], 0).unwrap();
        for i in 0..4 {
            let row = &m[i * 4..(i + 1) * 4];
            assert_eq!(row.iter().sum::<u64>(), 1);
            assert_eq!(row.iter().filter(|&&c| c > 0).count(), 1);
        }
    }

    #[test]
    fn heatmap_conserves_total_mass() {
        let traces: Vec<PointerTrace> = (0..7)
            .map(|s| trace(vec![(0..6).map(|i| ((i + s) % 6) as u32).collect()]))
            .collect();
        let m = pointer_heatmap(&traces, 0).unwrap();
        assert_eq!(m.iter().sum::<u64>(), 6 * 7);
        assert!(matches!(
            pointer_heatmap(&traces, 1),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn pgm_two_by_two_normalization_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        export_heatmap(&[0, 4, 4, 0], 2, &p, HeatmapFormat::Pgm).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8, 255, 255, 0]);

        let p64 = dir.path().join("n.pgm");
        export_heatmap(&vec![0u64; 64 * 64], 64, &p64, HeatmapFormat::Pgm).unwrap();
        let bytes = std::fs::read(&p64).unwrap();
        assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
        // max == 0: every pixel black
        assert!(bytes[b"P5\n64 64\n255\n".len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn csv_round_trips_integers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let matrix = vec![3u64, 0, 7, 12];
        export_heatmap(&matrix, 2, &p, HeatmapFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let parsed: Vec<u64> = text
            .lines()
            .flat_map(|l| l.split(','))
            .map(|c| c.parse().unwrap())
            .collect();
        assert_eq!(parsed, matrix);
    }

    #[test]
    fn log2_buckets_partition_distances() {
        assert_eq!(log2_bucket(0), 0);
        assert_eq!(log2_bucket(1), 1);
        assert_eq!(log2_bucket(2), 2);
        assert_eq!(log2_bucket(3), 2);
        assert_eq!(log2_bucket(4), 3);
        assert_eq!(log2_bucket(7), 3);
        assert_eq!(log2_bucket(8), 4);
    }
}
