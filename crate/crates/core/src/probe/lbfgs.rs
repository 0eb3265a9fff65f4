//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! Full-batch and single-threaded, so a given objective and start point
//! always produce the same iterates.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    /// Number of stored correction pairs.
    pub history: usize,
    pub max_iterations: usize,
    /// Stop when `||grad||_inf <= gradient_tolerance`.
    pub gradient_tolerance: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            history: 10,
            max_iterations: 500,
            gradient_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Minimizes `f` from `x0`. `f` writes the gradient into its second argument
/// and returns the objective value.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, options: &LbfgsOptions) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let mut value = f(&x, &mut grad);

    let mut s_hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(options.history);
    let mut y_hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(options.history);
    let mut rho_hist: VecDeque<f64> = VecDeque::with_capacity(options.history);

    let mut x_new = vec![0.0; n];
    let mut grad_new = vec![0.0; n];
    let mut alpha = vec![0.0; options.history];

    let mut iterations = 0;
    loop {
        let g_inf = inf_norm(&grad);
        if g_inf <= options.gradient_tolerance {
            return LbfgsOutcome {
                x,
                value,
                gradient_inf_norm: g_inf,
                iterations,
                converged: true,
            };
        }
        if iterations >= options.max_iterations {
            return LbfgsOutcome {
                x,
                value,
                gradient_inf_norm: g_inf,
                iterations,
                converged: false,
            };
        }

        // Two-loop recursion: direction = -H * grad.
        let mut direction: Vec<f64> = grad.iter().map(|g| -g).collect();
        let k = s_hist.len();
        for i in (0..k).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &direction);
            axpy(-alpha[i], &y_hist[i], &mut direction);
        }
        let gamma = match (s_hist.back(), y_hist.back()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            // First step: unit length in the infinity norm.
            _ => 1.0 / g_inf.max(1.0),
        };
        direction.iter_mut().for_each(|d| *d *= gamma);
        for i in 0..k {
            let beta = rho_hist[i] * dot(&y_hist[i], &direction);
            axpy(alpha[i] - beta, &s_hist[i], &mut direction);
        }

        let mut slope = dot(&grad, &direction);
        if slope >= 0.0 {
            // Lost descent (numerical breakdown); restart from steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            direction = grad.iter().map(|g| -g / g_inf.max(1.0)).collect();
            slope = dot(&grad, &direction);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                x_new[i] = x[i] + step * direction[i];
            }
            let v = f(&x_new, &mut grad_new);
            if v.is_finite() && v <= value + ARMIJO_C1 * step * slope {
                accepted = Some(v);
                break;
            }
            step *= 0.5;
        }
        iterations += 1;

        let Some(v) = accepted else {
            // No representable decrease along the direction.
            return LbfgsOutcome {
                x,
                value,
                gradient_inf_norm: g_inf,
                iterations,
                converged: false,
            };
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            if s_hist.len() == options.history {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
            s_hist.push_back(s);
            y_hist.push_back(y);
            rho_hist.push_back(1.0 / sy);
        }

        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut grad, &mut grad_new);
        value = v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
