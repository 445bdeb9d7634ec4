//! Markov-restricted parameters and the O(K) machinery they enable.
//!
//! Under the Markov restriction `theta(a-bar_{k-1}, l-bar_k) = theta(l_k)`,
//! `phi(a-bar_k, l-bar_k) = phi(a_k)`, `eta(a-bar_k, l-bar_k) = eta(a_k, l_k)`
//! (shared across stages), every correction product collapses to a single
//! stage-independent factor, each history's cell ratio factorizes into
//! per-step ratios that depend only on the current `(a_k, l_k)` pair, and
//! `r_max` is computable by backward induction instead of enumeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::root::solve_grouped;
use super::SnmmNaturalParams;
use crate::error::{Error, Result};
use crate::history::{blip_cells, d1, nuisance_cells, MAX_EXACT_HORIZON, MAX_HORIZON};

/// Time-homogeneous Markov natural parameters: `theta(l)`, `phi(a)`,
/// `eta(a, l)`. The stage-0 covariate state is the baseline bit `l_0`,
/// which is supplied per stratum at call time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarkovParams {
    horizon: usize,
    theta: [f64; 2],
    phi: [f64; 2],
    /// Indexed `eta[a][l]`.
    eta: [[f64; 2]; 2],
}

impl MarkovParams {
    pub fn new(horizon: usize, theta: [f64; 2], phi: [f64; 2], eta: [[f64; 2]; 2]) -> Result<Self> {
        if horizon > MAX_HORIZON {
            return Err(Error::HorizonTooLarge(horizon, MAX_HORIZON));
        }
        for v in theta.iter().chain(phi.iter()) {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "Markov theta/phi entries must be positive and finite, got {v}"
                )));
            }
        }
        for row in &eta {
            for &v in row {
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "Markov eta entries must lie strictly inside (0,1), got {v}"
                    )));
                }
            }
        }
        Ok(Self {
            horizon,
            theta,
            phi,
            eta,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn theta(&self, l: u8) -> f64 {
        self.theta[l as usize]
    }

    pub fn phi(&self, a: u8) -> f64 {
        self.phi[a as usize]
    }

    pub fn eta(&self, a: u8, l: u8) -> f64 {
        self.eta[a as usize][l as usize]
    }

    fn log_mix(&self, a: usize, l: usize) -> f64 {
        let e = self.eta[a][l];
        (e * self.phi[a] + (1.0 - e)).ln()
    }

    /// Log of the correction the stage-k (k < K) blip ratio is divided by;
    /// depends only on `l_k`.
    fn log_blip_corr(&self, l: usize) -> f64 {
        self.log_mix(1, l) - self.log_mix(0, l)
    }

    /// Log of the correction the covariate ratio for `l_{k+1}` (k < K-1) is
    /// divided by; a single constant.
    fn log_cov_corr(&self) -> f64 {
        self.log_mix(0, 1) - self.log_mix(0, 0)
    }

    /// Log step ratio contributed by `a_k = 1` given `l_k = l`.
    pub fn log_trt_ratio(&self, stage: usize, l: u8) -> f64 {
        let t = self.theta[l as usize].ln();
        if stage == self.horizon {
            t
        } else {
            t - self.log_blip_corr(l as usize)
        }
    }

    /// Log step ratio contributed by `l_{k+1} = 1` given `a_k = a`, for
    /// `stage = k` in `0..K`.
    pub fn log_cov_ratio(&self, stage: usize, a: u8) -> f64 {
        let f = self.phi[a as usize].ln();
        if stage + 1 == self.horizon {
            f
        } else {
            f - self.log_cov_corr()
        }
    }

    /// The eight distinct per-step log ratios, in [`RatioProfile`] order.
    pub fn log_ratio_basis(&self) -> [f64; 8] {
        [
            self.theta[0].ln() - self.log_blip_corr(0),
            self.theta[1].ln() - self.log_blip_corr(1),
            self.theta[0].ln(),
            self.theta[1].ln(),
            self.phi[0].ln() - self.log_cov_corr(),
            self.phi[1].ln() - self.log_cov_corr(),
            self.phi[0].ln(),
            self.phi[1].ln(),
        ]
    }

    /// Log cell ratio relative to the all-zero history, walked in O(K).
    pub fn log_r_of_code(&self, l0: u8, code: u64) -> f64 {
        let horizon = self.horizon;
        let mut acc = 0.0;
        let mut l_cur = l0;
        for k in 0..=horizon {
            let a_k = ((code >> (2 * (horizon - k))) & 1) as u8;
            if a_k == 1 {
                acc += self.log_trt_ratio(k, l_cur);
            }
            if k < horizon {
                let l_next = ((code >> (2 * (horizon - k) - 1)) & 1) as u8;
                if l_next == 1 {
                    acc += self.log_cov_ratio(k, a_k);
                }
                l_cur = l_next;
            }
        }
        acc
    }

    /// Backward induction for `ln r_max`, O(K).
    pub fn log_r_max_dp(&self, l0: u8) -> f64 {
        let horizon = self.horizon;
        // Optimal continuation from l_K onward.
        let mut o_l = [
            f64::max(0.0, self.log_trt_ratio(horizon, 0)),
            f64::max(0.0, self.log_trt_ratio(horizon, 1)),
        ];
        for k in (0..horizon).rev() {
            let o_a = [
                f64::max(o_l[0], self.log_cov_ratio(k, 0) + o_l[1]),
                f64::max(o_l[0], self.log_cov_ratio(k, 1) + o_l[1]),
            ];
            o_l = [
                f64::max(o_a[0], self.log_trt_ratio(k, 0) + o_a[1]),
                f64::max(o_a[0], self.log_trt_ratio(k, 1) + o_a[1]),
            ];
        }
        o_l[l0 as usize]
    }

    /// Expands the compact view into full per-stage tables for the given
    /// baseline stratum. Only available for horizons small enough to
    /// enumerate.
    pub fn expand(&self, l0: u8, gop: f64) -> Result<SnmmNaturalParams> {
        if !(gop > 0.0 && gop.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gop must be positive and finite, got {gop}"
            )));
        }
        self.expand_log(l0, gop.ln())
    }

    /// [`MarkovParams::expand`] with the odds product on the log scale.
    pub fn expand_log(&self, l0: u8, log_gop: f64) -> Result<SnmmNaturalParams> {
        let horizon = self.horizon;
        if horizon > MAX_EXACT_HORIZON {
            return Err(Error::HorizonTooLarge(horizon, MAX_EXACT_HORIZON));
        }
        let mut theta = Vec::with_capacity(horizon + 1);
        for k in 0..=horizon {
            let cells = blip_cells(k) as usize;
            let table: Vec<f64> = (0..cells)
                .map(|bi| {
                    let l = if k == 0 { l0 } else { (bi & 1) as u8 };
                    self.theta(l)
                })
                .collect();
            theta.push(table);
        }
        let mut phi = Vec::with_capacity(horizon);
        let mut eta = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let cells = nuisance_cells(k) as usize;
            phi.push((0..cells).map(|ni| self.phi((ni & 1) as u8)).collect());
            eta.push(
                (0..cells)
                    .map(|ni| {
                        let a = (ni & 1) as u8;
                        let l = if k == 0 { l0 } else { ((ni >> 1) & 1) as u8 };
                        self.eta(a, l)
                    })
                    .collect(),
            );
        }
        SnmmNaturalParams::new_log(horizon, theta, phi, log_gop, eta)
    }
}

/// Exact `r_max` under the Markov restriction, by dynamic programming.
pub fn r_max_dp(params: &MarkovParams, l0: u8) -> f64 {
    params.log_r_max_dp(l0).exp()
}

/// Exponent counts of one history over the eight distinct per-step ratios.
/// Layout: `[trt(l=0) mid, trt(1) mid, trt(0) last, trt(1) last,
///           cov(a=0) mid, cov(1) mid, cov(0) last, cov(1) last]`,
/// where "last" marks the final stage whose correction product is empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RatioProfile(pub [u8; 8]);

impl RatioProfile {
    pub fn of_code(horizon: usize, l0: u8, code: u64) -> Self {
        let mut c = [0u8; 8];
        let mut l_cur = l0;
        for k in 0..=horizon {
            let a_k = ((code >> (2 * (horizon - k))) & 1) as u8;
            if a_k == 1 {
                let slot = if k == horizon { 2 } else { 0 } + l_cur as usize;
                c[slot] += 1;
            }
            if k < horizon {
                let l_next = ((code >> (2 * (horizon - k) - 1)) & 1) as u8;
                if l_next == 1 {
                    let slot = 4 + if k + 1 == horizon { 2 } else { 0 } + a_k as usize;
                    c[slot] += 1;
                }
                l_cur = l_next;
            }
        }
        Self(c)
    }

    pub fn key(&self) -> u64 {
        u64::from_le_bytes(self.0)
    }

    pub fn log_r(&self, basis: &[f64; 8]) -> f64 {
        self.0
            .iter()
            .zip(basis)
            .map(|(&c, &b)| f64::from(c) * b)
            .sum()
    }
}

/// How the normalized-ratio multiset feeding the root solve is formed.
#[derive(Clone, Copy, Debug)]
pub enum RatioSampling {
    /// Enumerate all `2^(2K+1)` histories; the root function is exact.
    Exhaustive,
    /// Evaluate at `m` histories drawn uniformly, fixed by the seed.
    MonteCarlo { m: usize, seed: u64 },
}

/// Deduplicated `(ln k, weight)` entries for the root solve, built from the
/// Markov ratio structure for one baseline stratum.
pub(crate) fn grouped_ratio_entries(
    params: &MarkovParams,
    l0: u8,
    sampling: RatioSampling,
) -> Result<(Vec<(f64, f64)>, f64)> {
    let horizon = params.horizon;
    let total = d1(horizon) as f64;
    let basis = params.log_ratio_basis();
    let log_r_max = params.log_r_max_dp(l0);
    let mut groups: std::collections::HashMap<u64, (RatioProfile, f64)> =
        std::collections::HashMap::new();
    match sampling {
        RatioSampling::Exhaustive => {
            if horizon > MAX_EXACT_HORIZON {
                return Err(Error::HorizonTooLarge(horizon, MAX_EXACT_HORIZON));
            }
            for code in 0..d1(horizon) {
                let p = RatioProfile::of_code(horizon, l0, code);
                groups.entry(p.key()).or_insert((p, 0.0)).1 += 1.0;
            }
        }
        RatioSampling::MonteCarlo { m, seed } => {
            if m == 0 {
                return Err(Error::InvalidParameter(
                    "Monte Carlo sample count must be at least 1".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = d1(horizon) - 1;
            let w = total / m as f64;
            for _ in 0..m {
                let code = rng.random::<u64>() & mask;
                let p = RatioProfile::of_code(horizon, l0, code);
                groups.entry(p.key()).or_insert((p, 0.0)).1 += w;
            }
        }
    }
    let mut entries: Vec<(u64, f64, f64)> = groups
        .into_iter()
        .map(|(key, (p, w))| (key, p.log_r(&basis) - log_r_max, w))
        .collect();
    // Deterministic order regardless of hash iteration.
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((
        entries.into_iter().map(|(_, lk, w)| (lk, w)).collect(),
        total,
    ))
}

/// Root of the (exact or Monte Carlo) root function for a Markov stratum.
pub fn solve_pmax_markov(
    params: &MarkovParams,
    l0: u8,
    gop: f64,
    sampling: RatioSampling,
) -> Result<f64> {
    if !(gop > 0.0 && gop.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gop must be positive and finite, got {gop}"
        )));
    }
    solve_pmax_markov_log(params, l0, gop.ln(), sampling, None)
}

pub(crate) fn solve_pmax_markov_log(
    params: &MarkovParams,
    l0: u8,
    log_gop: f64,
    sampling: RatioSampling,
    hint: Option<f64>,
) -> Result<f64> {
    let (entries, total) = grouped_ratio_entries(params, l0, sampling)?;
    solve_grouped(&entries, total, log_gop, hint)
}

/// Monte Carlo approximation of the root function: `m` histories sampled
/// uniformly (fixed once per solve by the seed), each weighted `d_1 / m`.
pub fn solve_pmax_mc(params: &MarkovParams, l0: u8, gop: f64, m: usize, seed: u64) -> Result<f64> {
    solve_pmax_markov(params, l0, gop, RatioSampling::MonteCarlo { m, seed })
}
