//! The natural-parameter/probability-table bijection.
//!
//! Natural parameters for one baseline stratum are the stage-wise blip
//! ratios `theta_k`, covariate ratios `phi_k`, the scalar generalized odds
//! product, and the covariate transition probabilities `eta_k`. The forward
//! map builds the full table of `E[Y | a-bar_K, l-bar_K]` by
//!
//! 1. converting each `theta`/`phi` into a conditional-mean ratio at
//!    zero-padded histories (dividing out a correction product of
//!    `eta*phi + 1 - eta` factors),
//! 2. chaining every history to the all-zero reference through its
//!    time-order-last set bit,
//! 3. normalizing by the largest ratio,
//! 4. root-solving for the probability of the maximizing history so the
//!    table's odds product matches the requested one, and
//! 5. scaling.
//!
//! The inverse recovers the parameters through the backward recursion on
//! blipped-down means. All ratio products are accumulated in log space.

mod additive;
mod markov;
mod root;

pub use additive::{additive_first_stage_range, multiplicative_first_stage_range};
pub use markov::{
    r_max_dp, solve_pmax_markov, solve_pmax_mc, MarkovParams, RatioProfile, RatioSampling,
};
pub use root::solve_pmax;
pub(crate) use root::solve_grouped;

use crate::error::{Error, Result};
use crate::history::{blip_cells, d1, nuisance_cells, MAX_EXACT_HORIZON};

/// The variation-independent parameter vector for one baseline stratum.
#[derive(Clone, Debug, PartialEq)]
pub struct SnmmNaturalParams {
    horizon: usize,
    /// `theta[k]` has `4^k` entries indexed by the blip prefix
    /// `(a_0, l_1, ..., a_{k-1}, l_k)`; `theta[0]` is the scalar stage-0 blip.
    theta: Vec<Vec<f64>>,
    /// `phi[k]` has `2*4^k` entries indexed by the nuisance prefix
    /// `(a_0, l_1, ..., l_k, a_k)`, for `k = 0..K-1`.
    phi: Vec<Vec<f64>>,
    /// The generalized odds product, kept on the log scale: as a product of
    /// `2^(2K+1)` odds it routinely leaves f64 range.
    log_gop: f64,
    /// `eta[k]` has the same shape as `phi[k]`.
    eta: Vec<Vec<f64>>,
}

impl SnmmNaturalParams {
    pub fn new(
        horizon: usize,
        theta: Vec<Vec<f64>>,
        phi: Vec<Vec<f64>>,
        gop: f64,
        eta: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_positive("gop", gop)?;
        Self::new_log(horizon, theta, phi, gop.ln(), eta)
    }

    /// Like [`SnmmNaturalParams::new`] but with the odds product given on
    /// the log scale.
    pub fn new_log(
        horizon: usize,
        theta: Vec<Vec<f64>>,
        phi: Vec<Vec<f64>>,
        log_gop: f64,
        eta: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if theta.len() != horizon + 1 {
            return Err(Error::InvalidParameter(format!(
                "theta must have {} stage tables, got {}",
                horizon + 1,
                theta.len()
            )));
        }
        if phi.len() != horizon || eta.len() != horizon {
            return Err(Error::InvalidParameter(format!(
                "phi and eta must have {} stage tables, got {} and {}",
                horizon,
                phi.len(),
                eta.len()
            )));
        }
        for (k, table) in theta.iter().enumerate() {
            if table.len() as u64 != blip_cells(k) {
                return Err(Error::InvalidParameter(format!(
                    "theta stage {k} must have {} cells, got {}",
                    blip_cells(k),
                    table.len()
                )));
            }
            for &v in table {
                check_positive("theta", v)?;
            }
        }
        for (k, (p, e)) in phi.iter().zip(eta.iter()).enumerate() {
            if p.len() as u64 != nuisance_cells(k) || e.len() as u64 != nuisance_cells(k) {
                return Err(Error::InvalidParameter(format!(
                    "phi/eta stage {k} must have {} cells, got {} and {}",
                    nuisance_cells(k),
                    p.len(),
                    e.len()
                )));
            }
            for &v in p {
                check_positive("phi", v)?;
            }
            for &v in e {
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "eta entries must lie strictly inside (0,1), got {v}"
                    )));
                }
            }
        }
        if !log_gop.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "log gop must be finite, got {log_gop}"
            )));
        }
        Ok(Self {
            horizon,
            theta,
            phi,
            log_gop,
            eta,
        })
    }

    /// All blips and ratios equal to the given constants; handy for tests.
    pub fn constant(horizon: usize, theta: f64, phi: f64, gop: f64, eta: f64) -> Result<Self> {
        let theta_tables = (0..=horizon)
            .map(|k| vec![theta; blip_cells(k) as usize])
            .collect();
        let phi_tables = (0..horizon)
            .map(|k| vec![phi; nuisance_cells(k) as usize])
            .collect();
        let eta_tables = (0..horizon)
            .map(|k| vec![eta; nuisance_cells(k) as usize])
            .collect();
        Self::new(horizon, theta_tables, phi_tables, gop, eta_tables)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// May underflow to zero (or overflow) for extreme tables; prefer
    /// [`SnmmNaturalParams::log_gop`] in computations.
    pub fn gop(&self) -> f64 {
        self.log_gop.exp()
    }

    pub fn log_gop(&self) -> f64 {
        self.log_gop
    }

    pub fn with_log_gop(mut self, log_gop: f64) -> Self {
        self.log_gop = log_gop;
        self
    }

    pub fn theta(&self, stage: usize, blip_idx: u64) -> f64 {
        self.theta[stage][blip_idx as usize]
    }

    pub fn phi(&self, stage: usize, nuisance_idx: u64) -> f64 {
        self.phi[stage][nuisance_idx as usize]
    }

    pub fn eta(&self, stage: usize, nuisance_idx: u64) -> f64 {
        self.eta[stage][nuisance_idx as usize]
    }

    pub fn theta_tables(&self) -> &[Vec<f64>] {
        &self.theta
    }

    pub fn phi_tables(&self) -> &[Vec<f64>] {
        &self.phi
    }

    pub fn eta_tables(&self) -> &[Vec<f64>] {
        &self.eta
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "{name} entries must be positive and finite, got {v}"
        )));
    }
    Ok(())
}

/// `E[Y | a-bar_K, l-bar_K]` for all histories, plus the transition
/// probabilities that complete the bijection's target.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityTable {
    horizon: usize,
    p: Vec<f64>,
    eta: Vec<Vec<f64>>,
}

impl ProbabilityTable {
    pub fn new(horizon: usize, p: Vec<f64>, eta: Vec<Vec<f64>>) -> Result<Self> {
        if horizon > MAX_EXACT_HORIZON {
            return Err(Error::HorizonTooLarge(horizon, MAX_EXACT_HORIZON));
        }
        if p.len() as u64 != d1(horizon) {
            return Err(Error::InvalidTable(format!(
                "table must have {} cells, got {}",
                d1(horizon),
                p.len()
            )));
        }
        for &v in &p {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidTable(format!(
                    "probabilities must lie strictly inside (0,1), got {v}"
                )));
            }
        }
        if eta.len() != horizon {
            return Err(Error::InvalidTable(format!(
                "eta must have {} stage tables, got {}",
                horizon,
                eta.len()
            )));
        }
        for (k, e) in eta.iter().enumerate() {
            if e.len() as u64 != nuisance_cells(k) {
                return Err(Error::InvalidTable(format!(
                    "eta stage {k} must have {} cells, got {}",
                    nuisance_cells(k),
                    e.len()
                )));
            }
            for &v in e {
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::InvalidTable(format!(
                        "eta entries must lie strictly inside (0,1), got {v}"
                    )));
                }
            }
        }
        Ok(Self { horizon, p, eta })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn p_at(&self, code: u64) -> f64 {
        self.p[code as usize]
    }

    pub fn eta(&self, stage: usize, nuisance_idx: u64) -> f64 {
        self.eta[stage][nuisance_idx as usize]
    }

    pub fn eta_tables(&self) -> &[Vec<f64>] {
        &self.eta
    }

    /// The generalized odds product of the table, `prod p / prod (1-p)`,
    /// accumulated in log space.
    pub fn gop(&self) -> f64 {
        self.log_gop().exp()
    }

    pub fn log_gop(&self) -> f64 {
        self.p
            .iter()
            .map(|&p| p.ln() - (-p).ln_1p())
            .sum()
    }
}

/// Correction factor `C` at stage `k` such that the conditional-mean ratio
/// for flipping `a_k` at zero-padded futures equals `theta_k / C`.
/// The product is empty (`C = 1`) for `k = K`.
pub fn blip_correction(params: &SnmmNaturalParams, stage: usize, blip_idx: u64) -> Result<f64> {
    let horizon = params.horizon;
    if stage > horizon || blip_idx >= blip_cells(stage) {
        return Err(Error::StageOutOfRange { stage, horizon });
    }
    Ok(log_blip_correction(params, stage, blip_idx).exp())
}

fn log_blip_correction(params: &SnmmNaturalParams, stage: usize, blip_idx: u64) -> f64 {
    let mut acc = 0.0;
    for m in stage..params.horizon {
        let shift = 2 * (m - stage);
        let num = ((blip_idx << 1) | 1) << shift;
        let den = (blip_idx << 1) << shift;
        acc += log_mix(params, m, num) - log_mix(params, m, den);
    }
    acc
}

/// Correction factor `D` at stage `k` such that the ratio for flipping
/// `l_{k+1}` at zero-padded futures equals `phi_k / D`.
/// The product is empty (`D = 1`) for `k = K-1`.
pub fn covariate_correction(
    params: &SnmmNaturalParams,
    stage: usize,
    nuisance_idx: u64,
) -> Result<f64> {
    let horizon = params.horizon;
    if stage >= horizon || nuisance_idx >= nuisance_cells(stage) {
        return Err(Error::StageOutOfRange { stage, horizon });
    }
    Ok(log_covariate_correction(params, stage, nuisance_idx).exp())
}

fn log_covariate_correction(params: &SnmmNaturalParams, stage: usize, nuisance_idx: u64) -> f64 {
    let mut acc = 0.0;
    for m in stage..params.horizon.saturating_sub(1) {
        let shift = 2 * (m - stage);
        let num = ((nuisance_idx << 2) | 2) << shift;
        let den = (nuisance_idx << 2) << shift;
        acc += log_mix(params, m + 1, num) - log_mix(params, m + 1, den);
    }
    acc
}

/// `ln(eta*phi + 1 - eta)` at one nuisance cell.
fn log_mix(params: &SnmmNaturalParams, stage: usize, nuisance_idx: u64) -> f64 {
    let e = params.eta(stage, nuisance_idx);
    let p = params.phi(stage, nuisance_idx);
    (e * p + (1.0 - e)).ln()
}

/// Cell ratios relative to the all-zero history, normalized so the largest
/// entry is exactly one. Stored in log space.
#[derive(Clone, Debug)]
pub struct RatioTable {
    horizon: usize,
    log_r: Vec<f64>,
    log_r_max: f64,
}

impl RatioTable {
    pub fn from_params(params: &SnmmNaturalParams) -> Result<Self> {
        let horizon = params.horizon;
        if horizon > MAX_EXACT_HORIZON {
            return Err(Error::HorizonTooLarge(horizon, MAX_EXACT_HORIZON));
        }
        // Per-stage log ratios at zero-padded histories (Step 1).
        let log_trt: Vec<Vec<f64>> = (0..=horizon)
            .map(|k| {
                (0..blip_cells(k))
                    .map(|bi| params.theta(k, bi).ln() - log_blip_correction(params, k, bi))
                    .collect()
            })
            .collect();
        let log_cov: Vec<Vec<f64>> = (0..horizon)
            .map(|k| {
                (0..nuisance_cells(k))
                    .map(|ni| params.phi(k, ni).ln() - log_covariate_correction(params, k, ni))
                    .collect()
            })
            .collect();

        // Chain each history to the all-zero reference through its
        // time-order-last set bit (Step 2); the parent code is always
        // smaller, so a single increasing pass suffices.
        let n = d1(horizon);
        let mut log_r = vec![0.0f64; n as usize];
        for code in 1..n {
            let j = code.trailing_zeros() as usize;
            let parent = (code & (code - 1)) as usize;
            let prefix = (code >> (j + 1)) as usize;
            let step = if j % 2 == 0 {
                log_trt[horizon - j / 2][prefix]
            } else {
                log_cov[horizon - (j + 1) / 2][prefix]
            };
            let v = step + log_r[parent];
            if !v.is_finite() {
                return Err(Error::InvalidParameter(
                    "non-finite intermediate ratio".into(),
                ));
            }
            log_r[code as usize] = v;
        }
        let log_r_max = log_r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            horizon,
            log_r,
            log_r_max,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn log_r(&self) -> &[f64] {
        &self.log_r
    }

    pub fn log_r_max(&self) -> f64 {
        self.log_r_max
    }

    pub fn r(&self) -> Vec<f64> {
        self.log_r.iter().map(|v| v.exp()).collect()
    }

    pub fn r_max(&self) -> f64 {
        self.log_r_max.exp()
    }

    /// Normalized ratios `k = r / r_max`; the maximum entry is exactly one.
    pub fn k(&self) -> Vec<f64> {
        self.log_r
            .iter()
            .map(|v| (v - self.log_r_max).exp())
            .collect()
    }
}

/// Algorithm steps 1-6: natural parameters to the probability table.
pub fn forward_map(params: &SnmmNaturalParams) -> Result<ProbabilityTable> {
    forward_map_with_hint(params, None).map(|(t, _)| t)
}

/// Same as [`forward_map`], also returning the solved `p_max`. The hint
/// warm-starts the root solve; it never changes the result beyond the
/// solver tolerance.
pub fn forward_map_with_hint(
    params: &SnmmNaturalParams,
    hint: Option<f64>,
) -> Result<(ProbabilityTable, f64)> {
    let ratios = RatioTable::from_params(params)?;
    let entries: Vec<(f64, f64)> = ratios
        .log_r
        .iter()
        .map(|&lr| (lr - ratios.log_r_max, 1.0))
        .collect();
    let p_max = root::solve_grouped(&entries, entries.len() as f64, params.log_gop, hint)?;
    let p: Vec<f64> = entries.iter().map(|&(lk, _)| lk.exp() * p_max).collect();
    let table = ProbabilityTable::new(params.horizon, p, params.eta.clone())?;
    Ok((table, p_max))
}

/// Blipped-down means `V_k(a-bar_k, l-bar_{1:k}) = E[Y(a-bar_k, 0) | ...]`,
/// computed from a probability table by the backward recursion
/// `V_k = eta_k * V_{k+1}(.., l=1) + (1 - eta_k) * V_{k+1}(.., l=0)`.
#[derive(Clone, Debug)]
pub struct BlippedDownMeans {
    horizon: usize,
    /// `v[k]` indexed by the stage-`k` nuisance prefix.
    v: Vec<Vec<f64>>,
}

impl BlippedDownMeans {
    pub fn from_table(table: &ProbabilityTable) -> Self {
        let horizon = table.horizon;
        let mut v: Vec<Vec<f64>> = vec![Vec::new(); horizon + 1];
        v[horizon] = table.p.clone();
        for k in (0..horizon).rev() {
            let cells = nuisance_cells(k) as usize;
            let mut cur = vec![0.0; cells];
            for (ni, slot) in cur.iter_mut().enumerate() {
                let e = table.eta(k, ni as u64);
                let hi = v[k + 1][(ni << 2) | 2];
                let lo = v[k + 1][ni << 2];
                *slot = e * hi + (1.0 - e) * lo;
            }
            v[k] = cur;
        }
        Self { horizon, v }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn v(&self, stage: usize, nuisance_idx: u64) -> f64 {
        self.v[stage][nuisance_idx as usize]
    }
}

/// Exact inverse of [`forward_map`]: recovers the natural parameters from a
/// probability table via the blipped-down-mean recursion.
pub fn inverse_map(table: &ProbabilityTable) -> Result<SnmmNaturalParams> {
    let horizon = table.horizon;
    let means = BlippedDownMeans::from_table(table);
    let mut theta = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let cells = blip_cells(k) as usize;
        let mut t = vec![0.0; cells];
        for (bi, slot) in t.iter_mut().enumerate() {
            *slot = means.v(k, ((bi as u64) << 1) | 1) / means.v(k, (bi as u64) << 1);
        }
        theta.push(t);
    }
    let mut phi = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let cells = nuisance_cells(k) as usize;
        let mut f = vec![0.0; cells];
        for (ni, slot) in f.iter_mut().enumerate() {
            *slot = means.v(k + 1, ((ni as u64) << 2) | 2) / means.v(k + 1, (ni as u64) << 2);
        }
        phi.push(f);
    }
    SnmmNaturalParams::new_log(horizon, theta, phi, table.log_gop(), table.eta.clone())
}

#[cfg(test)]
mod tests;
