//! Brute-force references used to check the fast paths.
//!
//! Nothing here is optimized; each function is a direct transcription of
//! its definition and refuses inputs that would make it slow.

use crate::error::{Error, Result};
use crate::featmap::{extract_subpatches, FeatureMap, SubPatch};

/// Largest map side accepted by [`exact_match_kernel`].
pub const ORACLE_MAX_SIDE: usize = 16;

/// The Gaussian match kernel summed over every pair of sub-patch locations:
///
/// `Σ_{z,z'} ‖s_z‖ ‖s'_z'‖ exp(-‖z - z'‖² / 2β²) exp(-‖s̃_z - s̃'_z'‖² / 2α²)`
pub fn exact_match_kernel(a: &FeatureMap, b: &FeatureMap, patch_size: usize, alpha: f64, beta: f64) -> Result<f64> {
    for m in [a, b] {
        if m.width() > ORACLE_MAX_SIDE || m.height() > ORACLE_MAX_SIDE {
            return Err(Error::SizeGuard(format!(
                "{}x{} map exceeds the {ORACLE_MAX_SIDE}x{ORACLE_MAX_SIDE} oracle limit",
                m.width(),
                m.height()
            )));
        }
    }
    if (a.width(), a.height(), a.channels()) != (b.width(), b.height(), b.channels()) {
        return Err(Error::invalid("oracle maps must share one shape"));
    }
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::invalid("alpha and beta must be positive"));
    }
    let pa = extract_subpatches(a, patch_size)?;
    let pb = extract_subpatches(b, patch_size)?;
    let term = |s: &SubPatch, t: &SubPatch| {
        let dr = s.center.0 as f64 - t.center.0 as f64;
        let dc = s.center.1 as f64 - t.center.1 as f64;
        let spatial = (-(dr * dr + dc * dc) / (2.0 * beta * beta)).exp();
        let feat: f64 = s
            .normalized
            .iter()
            .zip(&t.normalized)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        s.norm * t.norm * spatial * (-feat / (2.0 * alpha * alpha)).exp()
    };
    // Visiting (i, j) and (j, i) together makes K(A, B) and K(B, A) add the
    // same numbers in the same order.
    let mut total = 0.0;
    for i in 0..pa.len() {
        total += term(&pa.patches[i], &pb.patches[i]);
        for j in i + 1..pa.len() {
            total += term(&pa.patches[i], &pb.patches[j]) + term(&pa.patches[j], &pb.patches[i]);
        }
    }
    Ok(total)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_gradient(objective: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = objective(&x);
        x[i] = orig - step;
        let down = objective(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NumericFailure {
                iteration: i,
                message: format!("objective not finite around coordinate {i}"),
            });
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Largest componentwise relative error `|a - n| / max(|a|, |n|, floor)`
/// between an analytic and a finite-difference gradient.
///
/// `floor = 1e-6 · max(1, |loss|)` sits above the round-off that central
/// differences carry at step 1e-5 (about `ε·|loss|/h`), so components too
/// small to be resolved are compared against that noise level instead.
pub fn gradient_relative_error(analytic: &[f64], numeric: &[f64], loss: f64) -> Result<f64> {
    if analytic.len() != numeric.len() {
        return Err(Error::invalid(format!(
            "{} analytic components but {} numeric",
            analytic.len(),
            numeric.len()
        )));
    }
    let floor = 1e-6 * loss.abs().max(1.0);
    Ok(analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max))
}

/// Agreement statistics between exact and approximate values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    pub max_abs: f64,
    pub mean_abs: f64,
    /// `‖approx - exact‖₂ / ‖exact‖₂`; the absolute norm when `exact` is zero.
    pub relative_frobenius: f64,
}

pub fn embedding_error_report(exact: &[f64], approx: &[f64]) -> Result<ErrorReport> {
    if exact.is_empty() {
        return Err(Error::invalid("error report of empty sequences"));
    }
    if exact.len() != approx.len() {
        return Err(Error::invalid(format!(
            "{} exact values but {} approximations",
            exact.len(),
            approx.len()
        )));
    }
    let diffs: Vec<f64> = exact.iter().zip(approx).map(|(e, a)| (a - e).abs()).collect();
    let max_abs = diffs.iter().copied().fold(0.0, f64::max);
    let mean_abs = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let diff_norm = diffs.iter().map(|d| d * d).sum::<f64>().sqrt();
    let exact_norm = exact.iter().map(|e| e * e).sum::<f64>().sqrt();
    let relative_frobenius = if exact_norm > 0.0 { diff_norm / exact_norm } else { diff_norm };
    Ok(ErrorReport {
        max_abs,
        mean_abs,
        relative_frobenius,
    })
}
