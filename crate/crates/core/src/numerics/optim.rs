//! Quasi-Newton minimization and finite-difference helpers.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Relative objective change below which an iteration counts as stalled.
    pub rel_tol: f64,
    /// Max-norm of the gradient at which the search stops.
    pub grad_tol: f64,
    /// Cap on the Euclidean length of a single search direction.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            rel_tol: 1e-8,
            grad_tol: 1e-6,
            max_step: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// BFGS with an Armijo backtracking line search.
///
/// `fg` returns the objective and its gradient. Non-finite objective values
/// are treated as infeasible and shrink the step. Convergence is declared
/// when the relative objective change stays below `rel_tol` for two
/// consecutive iterations, or the gradient max-norm drops below `grad_tol`.
pub fn minimize_bfgs<F>(mut fg: F, x0: &[f64], opts: &BfgsOptions) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut f, g0) = fg(x0);
    let mut g = DVector::from_vec(g0);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut stalled = 0;
    let mut iterations = 0;
    let mut converged = false;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Minimum {
            x: x0.to_vec(),
            value: f,
            gradient: g.as_slice().to_vec(),
            iterations: 0,
            converged: false,
        };
    }
    if inf_norm(g.as_slice()) < opts.grad_tol {
        converged = true;
    }
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut p = -(&h * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            fresh = true;
            p = -g.clone();
            slope = g.dot(&p);
        }
        let norm = p.norm();
        if norm > opts.max_step {
            p *= opts.max_step / norm;
            slope = g.dot(&p);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + alpha * &p;
            let (fn_, gn) = fg(xn.as_slice());
            if fn_.is_finite()
                && gn.iter().all(|v| v.is_finite())
                && fn_ <= f + 1e-4 * alpha * slope
            {
                accepted = Some((xn, fn_, DVector::from_vec(gn)));
                break;
            }
            if fn_.is_finite() {
                let denom = 2.0 * (fn_ - f - slope * alpha);
                let mut a = if denom > 0.0 {
                    -slope * alpha * alpha / denom
                } else {
                    0.5 * alpha
                };
                a = a.clamp(0.1 * alpha, 0.5 * alpha);
                alpha = a;
            } else {
                alpha *= 0.25;
            }
        }
        let Some((xn, fn_, gn)) = accepted else {
            if !fresh {
                h = DMatrix::identity(n, n);
                fresh = true;
                continue;
            }
            break;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h *= sy / y.dot(&y);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H += rho^2 (y'Hy) ss' + rho ss' - rho (Hy s' + s y'H)
            let coeff = rho * rho * yhy + rho;
            h += coeff * (&s * s.transpose()) - rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        let change = (f - fn_).abs() / fn_.abs().max(1.0);
        x = xn;
        f = fn_;
        g = gn;
        if change < opts.rel_tol {
            stalled += 1;
        } else {
            stalled = 0;
        }
        if stalled >= 2 || inf_norm(g.as_slice()) < opts.grad_tol {
            converged = true;
        }
    }
    Minimum {
        x: x.as_slice().to_vec(),
        value: f,
        gradient: g.as_slice().to_vec(),
        iterations,
        converged,
    }
}

/// Central-difference gradient with step `h_scale * (1 + |x_i|)`.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h_scale: f64) -> Vec<f64> {
    let mut xx = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = h_scale * (1.0 + x[i].abs());
            xx[i] = x[i] + h;
            let fp = f(&xx);
            xx[i] = x[i] - h;
            let fm = f(&xx);
            xx[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Symmetrized Jacobian of a gradient map by central differences.
pub fn jacobian_of_gradient<F: FnMut(&[f64]) -> Vec<f64>>(
    mut grad: F,
    x: &[f64],
    h_scale: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut xx = x.to_vec();
    for i in 0..n {
        let h = h_scale * (1.0 + x[i].abs());
        xx[i] = x[i] + h;
        let gp = grad(&xx);
        xx[i] = x[i] - h;
        let gm = grad(&xx);
        xx[i] = x[i];
        for j in 0..n {
            jac[(j, i)] = (gp[j] - gm[j]) / (2.0 * h);
        }
    }
    0.5 * (&jac + jac.transpose())
}
