//! Limited-memory quasi-Newton minimization with box constraints.
//!
//! Search directions come from the L-BFGS two-loop recursion restricted to
//! the free variables (those not held at a bound by the gradient); steps are
//! projected onto the box and accepted by a backtracking Armijo test along
//! the projected path.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Settings for [`minimize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsbOptions {
    /// Number of stored correction pairs.
    pub memory: usize,
    /// Stop once the sup-norm of the projected gradient drops below this.
    pub pg_tol: f64,
    pub max_iter: usize,
    /// Length of the very first step (before any curvature is known).
    pub initial_step: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsbOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            pg_tol: 1e-5,
            max_iter: 200,
            initial_step: 1.0,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ProjectedGradient,
    MaxIterations,
    /// No decrease could be found along the projected steepest descent path.
    LineSearchStalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub initial_f: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub termination: Termination,
}

const ARMIJO_C1: f64 = 1e-4;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(lo, hi);
    }
}

/// Sup-norm of `x - P(x - g)`.
pub fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&lo, &hi))| (xi - (xi - gi).clamp(lo, hi)).abs())
        .fold(0.0, f64::max)
}

fn free_mask(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<bool> {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&lo, &hi))| !((xi <= lo && gi > 0.0) || (xi >= hi && gi < 0.0)))
        .collect()
}

struct Correction {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn two_loop(g: &[f64], free: &[bool], history: &VecDeque<Correction>) -> Vec<f64> {
    let mut q: Vec<f64> = g
        .iter()
        .zip(free)
        .map(|(&gi, &f)| if f { gi } else { 0.0 })
        .collect();
    let mut alphas = Vec::with_capacity(history.len());
    for c in history.iter().rev() {
        let a = c.rho * dot(&c.s, &q);
        for (qi, yi) in q.iter_mut().zip(&c.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for (c, a) in history.iter().zip(alphas.iter().rev()) {
        let b = c.rho * dot(&c.y, &q);
        for (qi, si) in q.iter_mut().zip(&c.s) {
            *qi += si * (a - b);
        }
    }
    q.iter()
        .zip(free)
        .map(|(&v, &f)| if f { -v } else { 0.0 })
        .collect()
}

/// Minimizes `objective` subject to `lower ≤ x ≤ upper` (use infinities for
/// unbounded coordinates).
///
/// `objective(x, grad)` returns the value at `x` and writes the gradient into
/// `grad`. A non-finite value or gradient aborts with
/// [`Error::NumericFailure`] naming the iteration.
pub fn minimize<F>(
    mut objective: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &LbfgsbOptions,
) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    if lower.len() != n || upper.len() != n {
        return Err(Error::invalid(format!(
            "bounds length ({}, {}) does not match {n} variables",
            lower.len(),
            upper.len()
        )));
    }
    if lower.iter().zip(upper).any(|(lo, hi)| lo > hi) {
        return Err(Error::invalid("lower bound exceeds upper bound"));
    }
    let mut eval = |x: &[f64], g: &mut [f64], iteration: usize| -> Result<f64> {
        let f = objective(x, g);
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                iteration,
                message: format!("objective evaluated to {f}"),
            });
        }
        Ok(f)
    };

    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut g = vec![0.0; n];
    let mut fx = eval(&x, &mut g, 0)?;
    let initial_f = fx;
    let mut history: VecDeque<Correction> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut x_trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];

    let termination = loop {
        if projected_gradient_norm(&x, &g, lower, upper) < opts.pg_tol {
            break Termination::ProjectedGradient;
        }
        if iterations >= opts.max_iter {
            break Termination::MaxIterations;
        }
        let free = free_mask(&x, &g, lower, upper);
        let mut d = two_loop(&g, &free, &history);
        if history.is_empty() || dot(&g, &d) >= 0.0 {
            history.clear();
            let norm = dot(&d, &d).sqrt();
            let scale = if norm > 0.0 { opts.initial_step / norm } else { 0.0 };
            d = g
                .iter()
                .zip(&free)
                .map(|(&gi, &f)| if f { -gi * scale } else { 0.0 })
                .collect();
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            for i in 0..n {
                x_trial[i] = x[i] + t * d[i];
            }
            project(&mut x_trial, lower, upper);
            let step: Vec<f64> = x_trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &step);
            if decrease >= 0.0 {
                // The projected step no longer points downhill.
                t *= 0.5;
                continue;
            }
            let f_trial = eval(&x_trial, &mut g_trial, iterations + 1)?;
            if f_trial <= fx + ARMIJO_C1 * decrease {
                accepted = Some((f_trial, step));
                break;
            }
            t *= 0.5;
        }

        match accepted {
            Some((f_trial, s)) => {
                let y: Vec<f64> = g_trial.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-10 * dot(&y, &y).max(f64::MIN_POSITIVE) {
                    if history.len() == opts.memory {
                        history.pop_front();
                    }
                    history.push_back(Correction { s, y, rho: 1.0 / sy });
                }
                std::mem::swap(&mut x, &mut x_trial);
                std::mem::swap(&mut g, &mut g_trial);
                fx = f_trial;
                iterations += 1;
            }
            None if !history.is_empty() => history.clear(),
            None => break Termination::LineSearchStalled,
        }
    };

    Ok(Minimum {
        x,
        f: fx,
        initial_f,
        iterations,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn solves_rosenbrock_unbounded() {
        let inf = f64::INFINITY;
        let opts = LbfgsbOptions {
            max_iter: 500,
            ..Default::default()
        };
        let m = minimize(rosenbrock, &[-1.2, 1.0], &[-inf; 2], &[inf; 2], &opts).unwrap();
        assert_eq!(m.termination, Termination::ProjectedGradient);
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{:?}", m.x);
    }

    #[test]
    fn respects_active_bound() {
        // min (x - 3)^2 + (y + 2)^2 with x <= 1, y >= 0
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 3.0);
            g[1] = 2.0 * (x[1] + 2.0);
            (x[0] - 3.0).powi(2) + (x[1] + 2.0).powi(2)
        };
        let inf = f64::INFINITY;
        let m = minimize(f, &[0.0, 5.0], &[-inf, 0.0], &[1.0, inf], &Default::default()).unwrap();
        assert_eq!(m.x, vec![1.0, 0.0]);
        assert!((m.f - 8.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_start_takes_no_steps() {
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * x[0];
            x[0] * x[0]
        };
        let m = minimize(f, &[0.0], &[-1.0], &[1.0], &Default::default()).unwrap();
        assert_eq!(m.iterations, 0);
        assert_eq!(m.termination, Termination::ProjectedGradient);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            if x[0] < 0.5 {
                f64::NAN
            } else {
                x[0]
            }
        };
        let err = minimize(f, &[1.0], &[f64::NEG_INFINITY], &[f64::INFINITY], &Default::default())
            .unwrap_err();
        assert!(matches!(err, Error::NumericFailure { iteration: 1, .. }), "{err:?}");
    }

    #[test]
    fn start_is_projected_into_the_box() {
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            x[0]
        };
        let m = minimize(f, &[-5.0], &[2.0], &[10.0], &Default::default()).unwrap();
        assert_eq!(m.x, vec![2.0]);
    }
}
