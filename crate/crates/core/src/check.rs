//! Finite-difference gradient oracles.
//!
//! Analytic gradients come off the tape's backward pass; numeric ones are
//! central differences of the tape's f64 replay ([`Tape::replay_f64`]). The
//! replay freezes all discrete structure recorded during the forward pass
//! (gather indices, candidate tables, pointer selections), so the function
//! being differenced is exactly the branch the backward pass claims to
//! differentiate, and f32 evaluation noise never pollutes the quotient.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error with the usual guarded denominator.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// One-sided slopes disagreeing this much (relative) are suspicious.
const KINK_SPREAD: f64 = 0.25;

struct CoordCheck {
    err: f64,
    numeric: f64,
    kink: bool,
}

fn coord_check(
    tape: &Tape,
    out: Var,
    var: Var,
    coord: usize,
    base: f64,
    eps: f64,
    analytic: f64,
) -> Result<CoordCheck> {
    let eval = |delta: f64| -> Result<f64> {
        let v = tape.replay_f64(out, &[(var, coord, base + delta)])?[0];
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check",
            });
        }
        Ok(v)
    };
    let f0 = eval(0.0)?;
    let fp = eval(eps)?;
    let fm = eval(-eps)?;
    let spread = ((fp - f0) / eps - (f0 - fm) / eps).abs();
    let slope_scale = ((fp - f0) / eps).abs().max(((f0 - fm) / eps).abs()).max(1e-6);
    let mut kink = false;
    if spread > KINK_SPREAD * slope_scale {
        // Disambiguate kink from curvature: halving eps halves a smooth
        // function's spread but leaves a kink's spread in place.
        let fp2 = eval(eps / 2.0)?;
        let fm2 = eval(-eps / 2.0)?;
        let spread2 = ((fp2 - f0) / (eps / 2.0) - (f0 - fm2) / (eps / 2.0)).abs();
        kink = spread2 > 0.75 * spread;
    }
    let numeric = (fp - fm) / (2.0 * eps);
    Ok(CoordCheck {
        err: rel_err(analytic, numeric),
        numeric,
        kink,
    })
}

/// Max relative error between analytic and central-difference gradients of
/// a scalar function of `x`, over every coordinate of `x`.
///
/// Coordinates whose one-sided slopes disagree by more than 25% sit on a
/// kink (e.g. a ReLU straddling zero); central differences are meaningless
/// there, so such coordinates are flagged and excluded from the maximum.
/// Errors if the function produced a non-finite value.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let recorded = tape.value(out);
    if recorded.numel() != 1 {
        return Err(Error::NotScalar {
            op: "finite_diff_check",
            numel: recorded.numel(),
        });
    }
    if !recorded.data()[0].is_finite() {
        return Err(Error::NonFinite {
            op: "finite_diff_check",
        });
    }
    tape.backward(out)?;
    let analytic: Vec<f32> = tape
        .grad(v)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let c = coord_check(
            &tape,
            out,
            v,
            i,
            x.data()[i] as f64,
            eps as f64,
            analytic[i] as f64,
        )?;
        if !c.kink {
            max_err = max_err.max(c.err);
        }
    }
    Ok(max_err as f32)
}

/// Result of a multi-tensor gradient check.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates excluded because they sit on a kink.
    pub skipped: usize,
}

/// Central-difference check across several input tensors at chosen
/// coordinates. `build` constructs the scalar loss on the tape from leaves
/// cloned off `tensors`.
pub fn finite_diff_check_multi<F>(
    tensors: &[Tensor],
    coords: &[(usize, usize)],
    eps: f64,
    build: F,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NotScalar {
            op: "finite_diff_check_multi",
            numel: tape.value(out).numel(),
        });
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(tensors)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &(ti, xi) in coords {
        let c = coord_check(
            &tape,
            out,
            vars[ti],
            xi,
            tensors[ti].data()[xi] as f64,
            eps,
            analytic[ti][xi] as f64,
        )?;
        if c.kink {
            report.skipped += 1;
        } else {
            // Gradients that are exactly zero by symmetry (a key-projection
            // bias shifts every score in a row equally and cancels in the
            // softmax) leave only rounding noise on both sides; the relative
            // formula is ill-conditioned there, so agreement below 1e-6
            // absolute counts as a match.
            let a = analytic[ti][xi] as f64;
            if !(a.abs() < 1e-6 && c.numeric.abs() < 1e-6) {
                report.max_rel_err = report.max_rel_err.max(c.err);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// End-to-end gradient check: masked cross-entropy of a model forward pass,
/// differentiated with respect to `n_coords` parameter coordinates sampled
/// uniformly across all parameter tensors.
#[allow(clippy::too_many_arguments)]
pub fn model_grad_check(
    model: &crate::model::Model,
    cfg: &crate::pointer::ModelConfig,
    phase: crate::pointer::Phase,
    tokens: &[u32],
    targets: &[u32],
    mask: &[bool],
    n_coords: usize,
    eps: f64,
    coord_seed: u64,
) -> Result<FdReport> {
    let tensors: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
    let total: usize = tensors.iter().map(Tensor::numel).sum();
    let mut rng = crate::rng::Stream::new(coord_seed);
    let mut coords = Vec::with_capacity(n_coords);
    for _ in 0..n_coords {
        let mut flat = rng.below(total);
        let mut ti = 0;
        while flat >= tensors[ti].numel() {
            flat -= tensors[ti].numel();
            ti += 1;
        }
        coords.push((ti, flat));
    }
    finite_diff_check_multi(&tensors, &coords, eps, |tape, vars| {
        let (logits, _) = model.forward_reusing(tape, vars.to_vec(), tokens, cfg, phase)?;
        tape.cross_entropy(logits, targets, mask)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let err = finite_diff_check(|tape, v| tape.sum(v), &x, 1e-3).unwrap();
        assert!(err < 1e-6, "got {err}");
    }

    #[test]
    fn quadratic_matches_closed_form() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                tape.sum(sq)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "got {err}");
    }

    #[test]
    fn relu_kink_coordinate_is_excluded() {
        // x[1] sits exactly on the kink; its one-sided slopes are 1 and 0,
        // so the coordinate is flagged and the remaining coords still check.
        let x = Tensor::new(vec![3], vec![1.0, 0.0, -1.0]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let r = tape.relu(v)?;
                tape.sum(r)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "kink should be excluded, got {err}");
    }

    #[test]
    fn non_finite_output_is_reported() {
        let x = Tensor::new(vec![1], vec![1.0e38]).unwrap();
        let r = finite_diff_check(
            |tape, v| {
                let sq = tape.mul(v, v)?; // overflows f32 to inf
                tape.sum(sq)
            },
            &x,
            1e-2,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn multi_tensor_check_covers_both_inputs() {
        let a = Tensor::new(vec![2, 2], vec![0.5, -0.25, 1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![1.5, 0.5, -1.0, 0.75]).unwrap();
        let coords: Vec<(usize, usize)> = (0..4).map(|i| (0, i)).chain((0..4).map(|i| (1, i))).collect();
        let report = finite_diff_check_multi(&[a, b], &coords, 1e-4, |tape, vars| {
            let prod = tape.matmul(vars[0], vars[1])?;
            let sq = tape.mul(prod, prod)?;
            tape.sum(sq)
        })
        .unwrap();
        assert_eq!(report.checked, 8);
        assert_eq!(report.skipped, 0);
        // a cancelled-to-zero analytic coordinate bottoms out at the
        // guarded-denominator floor, well under any tolerance in use
        assert!(report.max_rel_err < 1e-3, "got {}", report.max_rel_err);
    }
}
