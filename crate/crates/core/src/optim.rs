//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! Objective failures (for instance a flow blow-up) and non-finite values
//! are treated as `+∞`, so the line search simply backs off.

use std::collections::VecDeque;

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when `‖∇f‖ ≤ grad_tol`.
    pub grad_tol: f64,
    /// Stop when the decrease over one iteration is below `f_tol·(1 + |f|)`.
    pub f_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { memory: 10, max_iter: 500, grad_tol: 1e-9, f_tol: 1e-15 }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimize `f`, which returns the value and gradient.
///
/// An error at the starting point is returned; errors at trial points count
/// as `+∞`.
pub fn lbfgs<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = norm(&g) <= opts.grad_tol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if hist.is_empty() { (1.0 / norm(&g)).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let xt: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
            if let Ok((ft, gt)) = f(&xt) {
                if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                    accepted = Some((xt, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - fnew;
        x = xn;
        fx = fnew;
        g = gn;
        if norm(&g) <= opts.grad_tol {
            converged = true;
        } else if decrease <= opts.f_tol * (1.0 + fx.abs()) {
            break;
        }
    }
    Ok(LbfgsResult { x, f: fx, grad: g, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use approx::assert_relative_eq;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((v, g))
        };
        let r = lbfgs(f, &[-1.2, 1.0], &LbfgsOptions::default()).unwrap();
        assert!(r.converged);
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(r.x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn backs_off_from_failures() {
        // undefined for x > 2; minimum of (x-1.9)^2 inside
        let f = |x: &[f64]| {
            if x[0] > 2.0 {
                Err(Error::Config("outside".into()))
            } else {
                Ok(((x[0] - 1.9).powi(2), vec![2.0 * (x[0] - 1.9)]))
            }
        };
        let r = lbfgs(f, &[-5.0], &LbfgsOptions::default()).unwrap();
        assert_relative_eq!(r.x[0], 1.9, epsilon = 1e-8);
    }
}
