//! Unconstrained quasi-Newton maximization with finite-difference gradients.
//!
//! BFGS on the negated objective with a backtracking Armijo line search.
//! Gradients use central differences with step `1e-6 * (1 + |x_i|)`; if one
//! side of the stencil is non-finite (a likelihood barrier), the one-sided
//! difference is used instead. Convergence is declared on the scaled
//! gradient `max_i |g_i| * max(1, |x_i|) / max(1, |f|)`.

#[derive(Clone, Debug)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Scaled-gradient convergence tolerance.
    pub tol: f64,
    pub fd_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-5,
            fd_step: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    StartNotFinite,
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    /// Maximized objective value.
    pub f: f64,
    pub status: OptimStatus,
    pub iterations: usize,
    pub n_evals: usize,
    pub scaled_grad_norm: f64,
}

impl OptimResult {
    pub fn converged(&self) -> bool {
        self.status == OptimStatus::Converged
    }
}

/// Central finite-difference gradient of `f`, with one-sided fallback when a
/// stencil point is non-finite.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    step: f64,
    n_evals: &mut usize,
) -> Vec<f64> {
    let n = x.len();
    let mut grad = vec![0.0; n];
    let mut xs = x.to_vec();
    for i in 0..n {
        let h = step * (1.0 + x[i].abs());
        xs[i] = x[i] + h;
        let fp = f(&xs);
        xs[i] = x[i] - h;
        let fm = f(&xs);
        xs[i] = x[i];
        *n_evals += 2;
        grad[i] = if fp.is_finite() && fm.is_finite() {
            (fp - fm) / (2.0 * h)
        } else if fp.is_finite() && fx.is_finite() {
            (fp - fx) / h
        } else if fm.is_finite() && fx.is_finite() {
            (fx - fm) / h
        } else {
            0.0
        };
    }
    grad
}

fn scaled_grad_norm(grad: &[f64], x: &[f64], fx: f64) -> f64 {
    grad.iter()
        .zip(x)
        .map(|(&g, &xi)| g.abs() * xi.abs().max(1.0))
        .fold(0.0, f64::max)
        / fx.abs().max(1.0)
}

/// Maximizes `f` from `x0` by BFGS. `f` may return `-inf`/NaN outside its
/// domain; the line search backtracks away from such points.
pub fn maximize<F: FnMut(&[f64]) -> f64>(f: &mut F, x0: &[f64], opts: &OptimOptions) -> OptimResult {
    let n = x0.len();
    let mut n_evals = 0usize;
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    n_evals += 1;
    if !fx.is_finite() {
        return OptimResult {
            x,
            f: fx,
            status: OptimStatus::StartNotFinite,
            iterations: 0,
            n_evals,
            scaled_grad_norm: f64::INFINITY,
        };
    }
    if n == 0 {
        return OptimResult {
            x,
            f: fx,
            status: OptimStatus::Converged,
            iterations: 0,
            n_evals,
            scaled_grad_norm: 0.0,
        };
    }

    let mut grad = fd_gradient(f, &x, fx, opts.fd_step, &mut n_evals);
    // Inverse Hessian approximation of the negated objective, row-major.
    let mut h_inv = identity(n);
    let mut status = OptimStatus::MaxIterations;
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let gnorm = scaled_grad_norm(&grad, &x, fx);
        if gnorm <= opts.tol {
            status = OptimStatus::Converged;
            iterations = iter;
            break;
        }
        // Ascent direction d = H * grad (H approximates the inverse Hessian
        // of -f, so this is the Newton step for the maximization).
        let mut d = mat_vec(&h_inv, &grad);
        let g_dot_d: f64 = grad.iter().zip(&d).map(|(g, di)| g * di).sum();
        if !g_dot_d.is_finite() || g_dot_d <= 0.0 {
            h_inv = identity(n);
            d = grad.clone();
        }

        // Backtracking Armijo line search; if the quasi-Newton direction
        // fails, fall back to steepest ascent before giving up.
        let mut x_new = x.clone();
        let mut f_new = f64::NEG_INFINITY;
        let mut ok = false;
        'directions: for fallback in 0..2 {
            if fallback == 1 {
                if d == grad {
                    break;
                }
                h_inv = identity(n);
                d = grad.clone();
            }
            let g_dot_d: f64 = grad.iter().zip(&d).map(|(g, di)| g * di).sum();
            let mut step = 1.0;
            for _ in 0..40 {
                for i in 0..n {
                    x_new[i] = x[i] + step * d[i];
                }
                f_new = f(&x_new);
                n_evals += 1;
                if f_new.is_finite() && f_new >= fx + 1e-4 * step * g_dot_d {
                    ok = true;
                    break 'directions;
                }
                step *= 0.5;
            }
        }
        if !ok {
            // The gradient direction itself is stuck: improvements are below
            // evaluation noise.
            status = if gnorm <= opts.tol * 100.0 {
                OptimStatus::Converged
            } else {
                OptimStatus::LineSearchFailed
            };
            break;
        }

        let grad_new = fd_gradient(f, &x_new, f_new, opts.fd_step, &mut n_evals);
        // BFGS update on the negated objective: s = x_new - x,
        // y = (-grad_new) - (-grad) = grad - grad_new.
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = grad.iter().zip(&grad_new).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let s_norm: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm: f64 = yv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-10 * s_norm * y_norm && sy.is_finite() {
            bfgs_update(&mut h_inv, &s, &yv, sy);
        }
        x = x_new;
        fx = f_new;
        grad = grad_new;
    }

    let scaled = scaled_grad_norm(&grad, &x, fx);
    if status == OptimStatus::MaxIterations && scaled <= opts.tol {
        status = OptimStatus::Converged;
    }
    OptimResult {
        x,
        f: fx,
        status,
        iterations,
        n_evals,
        scaled_grad_norm: scaled,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum())
        .collect()
}

/// H <- (I - rho s y') H (I - rho y s') + rho s s', rho = 1/(s'y).
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let y_h_y: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += rho * rho * y_h_y * s[i] * s[j] + rho * s[i] * s[j]
                - rho * (s[i] * hy[j] + hy[i] * s[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_concave_quadratic() {
        let mut f = |x: &[f64]| {
            -(x[0] - 1.0).powi(2) - 2.0 * (x[1] + 0.5).powi(2) - 0.5 * x[0] * x[1]
        };
        let r = maximize(&mut f, &[0.0, 0.0], &OptimOptions::default());
        assert!(r.converged());
        // Stationary point of [2x + 0.5y = 2; 0.5x + 4y = -2].
        assert!((r.x[0] - 18.0 / 15.5).abs() < 1e-3, "{:?}", r.x);
        assert!((r.x[1] + 10.0 / 15.5).abs() < 1e-3, "{:?}", r.x);
    }

    #[test]
    fn handles_barrier() {
        // Undefined for x >= 1; maximum at x = 1 - 1/3 boundary-interior mix.
        let mut f = |x: &[f64]| {
            if x[0] >= 1.0 {
                f64::NEG_INFINITY
            } else {
                x[0] + (1.0 - x[0]).ln() * 0.25
            }
        };
        let r = maximize(&mut f, &[0.0], &OptimOptions::default());
        assert!(r.converged());
        assert!((r.x[0] - 0.75).abs() < 1e-4);
    }

    #[test]
    fn rosenbrock_like_valley() {
        let mut f = |x: &[f64]| -(1.0 - x[0]).powi(2) - 10.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = maximize(&mut f, &[-1.2, 1.0], &OptimOptions::default());
        assert!(r.converged());
        assert!((r.x[0] - 1.0).abs() < 1e-3);
        assert!((r.x[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn empty_parameter_vector() {
        let mut f = |_: &[f64]| 3.5;
        let r = maximize(&mut f, &[], &OptimOptions::default());
        assert!(r.converged());
        assert_eq!(r.f, 3.5);
    }
}
