//! Variation-dependence demonstration for additive blips (and the
//! multiplicative contrast that motivates the rest of the crate).
//!
//! For a two-stage design, fixing the second-stage additive blips
//! `B(a_0, l_1) = E[Y(a_0,1) - Y(a_0,0) | A_0 = a_0, L_1 = l_1]` confines
//! each second-stage baseline mean to `(max(0,-B), min(1,1-B))`; averaging
//! over `L_1 | A_0 = a_0` bounds `E[Y(a_0, 0)]`, which in turn restricts the
//! attainable first-stage blip `E[Y(1,0) - Y(0,0)]` to a subinterval of
//! (-1,1). The multiplicative analogue leaves the full range because every
//! per-cell bound keeps zero in its closure.

use crate::error::{Error, Result};

/// Range of the first-stage additive blip implied by second-stage additive
/// blips `blips[a_0][l_1]` and covariate means `eta[a_0] = P(L_1=1|A_0=a_0)`.
/// Returns the open interval `(lo, hi)`.
pub fn additive_first_stage_range(
    blips: [[f64; 2]; 2],
    eta: [f64; 2],
) -> Result<(f64, f64)> {
    for row in &blips {
        for &b in row {
            if !(b > -1.0 && b < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "additive blips must lie in (-1,1), got {b}"
                )));
            }
        }
    }
    validate_eta(&eta)?;
    let mut lo = [0.0f64; 2];
    let mut hi = [0.0f64; 2];
    for a0 in 0..2 {
        let w = [1.0 - eta[a0], eta[a0]];
        for l1 in 0..2 {
            let b = blips[a0][l1];
            lo[a0] += w[l1] * f64::max(0.0, -b);
            hi[a0] += w[l1] * f64::min(1.0, 1.0 - b);
        }
    }
    Ok((lo[1] - hi[0], hi[1] - lo[0]))
}

/// Multiplicative analogue: the implied range of the first-stage ratio given
/// second-stage ratios `ratios[a_0][l_1]`. Always the full `(0, inf)`; the
/// per-cell baseline bound `(0, min(1, 1/ratio))` has infimum zero, so the
/// marginal bounds do too and the ratio of the two marginals is unrestricted.
pub fn multiplicative_first_stage_range(
    ratios: [[f64; 2]; 2],
    eta: [f64; 2],
) -> Result<(f64, f64)> {
    for row in &ratios {
        for &r in row {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "multiplicative blips must be positive and finite, got {r}"
                )));
            }
        }
    }
    validate_eta(&eta)?;
    let lo = [0.0f64; 2];
    let mut hi = [0.0f64; 2];
    for a0 in 0..2 {
        let w = [1.0 - eta[a0], eta[a0]];
        for l1 in 0..2 {
            let r = ratios[a0][l1];
            // baseline mean confined to (0, min(1, 1/r))
            hi[a0] += w[l1] * f64::min(1.0, 1.0 / r);
        }
    }
    Ok((lo[1] / hi[0], if lo[0] == 0.0 { f64::INFINITY } else { hi[1] / lo[0] }))
}

fn validate_eta(eta: &[f64; 2]) -> Result<()> {
    for &e in eta {
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "eta must lie strictly inside (0,1), got {e}"
            )));
        }
    }
    Ok(())
}
