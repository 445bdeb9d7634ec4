//! Root solve for the probability of the maximizing history.
//!
//! With normalized ratios `k_i` (max exactly 1) and a target odds product,
//! the root function is
//!
//! `g(x) = sum_i w_i ln k_i + d_1 ln x - sum_i w_i ln(1 - k_i x) - ln gop`,
//!
//! strictly increasing on (0,1) with limits -inf and +inf, so a bracketed
//! solve cannot miss. Bisection is safeguarded with Newton steps and a final
//! Newton polish; `1 - k_i x` is evaluated through `q_i = 1 - k_i` so cells
//! with `k_i` near one keep full precision.

use crate::error::{Error, Result};

const BRACKET_EPS: f64 = 1e-15;
const X_TOL: f64 = 1e-12;
const MAX_ITER: usize = 200;

/// Solves `g(x) = 0` for `x` in `(0,1)` given the normalized ratio array.
/// Requires every `k_i` in `(0, 1]` with maximum 1 and a positive `gop`.
/// Absolute tolerance 1e-12, refined by guarded Newton steps.
pub fn solve_pmax(k: &[f64], gop: f64) -> Result<f64> {
    if k.is_empty() {
        return Err(Error::InvalidParameter("empty ratio array".into()));
    }
    let mut max = f64::NEG_INFINITY;
    for &v in k {
        if !(v > 0.0 && v <= 1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "normalized ratios must lie in (0, 1], got {v}"
            )));
        }
        max = max.max(v);
    }
    if (max - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "normalized ratios must attain 1, max is {max}"
        )));
    }
    if !(gop > 0.0 && gop.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gop must be positive and finite, got {gop}"
        )));
    }
    let entries: Vec<(f64, f64)> = k.iter().map(|&v| (v.min(1.0).ln(), 1.0)).collect();
    solve_grouped(&entries, entries.len() as f64, gop.ln(), None)
}

/// Grouped form of the solve: entries are `(ln k_i, weight)` pairs with total
/// weight `d_1`, and the odds product arrives on the log scale. The exact
/// solve uses unit weights; the Monte Carlo approximation uses
/// multiplicities scaled by `d_1 / m`.
pub(crate) fn solve_grouped(
    entries: &[(f64, f64)],
    d1: f64,
    log_gop: f64,
    hint: Option<f64>,
) -> Result<f64> {
    if !log_gop.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "log gop must be finite, got {log_gop}"
        )));
    }
    // Precompute (k, q = 1 - k, w); q via expm1 keeps precision near k = 1.
    let cells: Vec<(f64, f64, f64)> = entries
        .iter()
        .map(|&(lk, w)| (lk.exp(), -lk.exp_m1(), w))
        .collect();
    let s: f64 = entries.iter().map(|&(lk, w)| w * lk).sum();
    if !s.is_finite() {
        return Err(Error::RootSolve("non-finite ratio sum".into()));
    }

    // g and g' at x; 1 - k x computed as (1 - x) + q x.
    let eval = |x: f64| -> (f64, f64) {
        let u = 1.0 - x;
        let mut f = s + d1 * x.ln() - log_gop;
        let mut df = d1 / x;
        for &(k, q, w) in &cells {
            let t = u + q * x;
            f -= w * t.ln();
            df += w * k / t;
        }
        (f, df)
    };

    let mut a = BRACKET_EPS;
    let mut b = 1.0 - BRACKET_EPS;
    let (fa, _) = eval(a);
    let (fb, _) = eval(b);
    // The root can sit outside the representable bracket when the odds
    // product is extreme (the flat-likelihood regime) or, for sampled
    // ratios, when no sampled cell attains the maximum; clamp.
    if fa >= 0.0 {
        return Ok(a);
    }
    if fb <= 0.0 {
        return Ok(b);
    }

    let mut x = match hint {
        Some(h) if h > a && h < b => h,
        _ => 0.5 * (a + b),
    };
    let mut dx_old = b - a;
    let mut dx = dx_old;
    let (mut f, mut df) = eval(x);
    for _ in 0..MAX_ITER {
        if f < 0.0 {
            a = x;
        } else {
            b = x;
        }
        let newton_in_bracket =
            df > 0.0 && ((x - b) * df - f) * ((x - a) * df - f) < 0.0;
        if newton_in_bracket && (2.0 * f).abs() <= (dx_old * df).abs() {
            dx_old = dx;
            dx = f / df;
            x -= dx;
        } else {
            dx_old = dx;
            dx = 0.5 * (b - a);
            x = a + dx;
        }
        if dx.abs() < X_TOL {
            break;
        }
        let r = eval(x);
        f = r.0;
        df = r.1;
    }
    // Newton polish; the bracket endpoints are themselves approximate, so
    // only the hard domain bounds are enforced here.
    for _ in 0..3 {
        let (f, df) = eval(x);
        if !(df > 0.0) {
            break;
        }
        let xn = x - f / df;
        if !xn.is_finite() || xn <= 0.5 * BRACKET_EPS || xn >= 1.0 - 0.5 * BRACKET_EPS {
            break;
        }
        let moved = (xn - x).abs();
        x = xn;
        if moved < 1e-17 {
            break;
        }
    }
    Ok(x)
}
