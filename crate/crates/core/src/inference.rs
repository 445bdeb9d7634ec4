//! Post-fit causal inference: g-formula regime means and contrasts,
//! nonparametric bootstrap variance, and the multivariate Wald test of the
//! g-null hypothesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::history::MAX_EXACT_HORIZON;
use crate::likelihood::{fit, FitMethod, FitOptions, FitResult, StratumTable, TableCache};
use crate::models::ModelSpec;

/// A deterministic treatment rule: the action at each stage as a function of
/// the realized covariates `l_0..l_k` and the actions taken so far.
pub trait TreatmentRule: Sync {
    fn action(&self, stage: usize, l_hist: &[u8], a_hist: &[u8]) -> u8;

    /// True when the rule depends on the covariate history only through the
    /// current `l_k`; such rules admit an O(K) g-formula pass under Markov
    /// specs. Markov rules must read only `l_hist.last()`.
    fn is_markov(&self) -> bool {
        false
    }
}

/// Serializable regimes understood by the command-line surface.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Regime {
    /// Fixed treatment vector `a_0..a_K`.
    Static { actions: Vec<u8> },
    /// `a_k = when1` if the current covariate is 1, else `when0`.
    CurrentCovariate { when0: u8, when1: u8 },
}

impl Regime {
    pub fn always(horizon: usize) -> Self {
        Regime::Static {
            actions: vec![1; horizon + 1],
        }
    }

    pub fn never(horizon: usize) -> Self {
        Regime::Static {
            actions: vec![0; horizon + 1],
        }
    }

    #[allow(non_snake_case)]
    pub fn Static(actions: Vec<u8>) -> Self {
        Regime::Static { actions }
    }

    /// Parses `static:0110...`, `dynamic:treat-if-l`, `dynamic:treat-if-not-l`.
    pub fn parse(s: &str, horizon: usize) -> Result<Self> {
        if let Some(bits) = s.strip_prefix("static:") {
            let actions: Vec<u8> = bits
                .chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    other => Err(Error::InvalidRegime(format!(
                        "unexpected character `{other}` in static regime"
                    ))),
                })
                .collect::<Result<_>>()?;
            if actions.len() != horizon + 1 {
                return Err(Error::InvalidRegime(format!(
                    "static regime needs {} actions, got {}",
                    horizon + 1,
                    actions.len()
                )));
            }
            return Ok(Regime::Static { actions });
        }
        match s {
            "dynamic:treat-if-l" => Ok(Regime::CurrentCovariate { when0: 0, when1: 1 }),
            "dynamic:treat-if-not-l" => Ok(Regime::CurrentCovariate { when0: 1, when1: 0 }),
            other => Err(Error::InvalidRegime(format!(
                "unrecognized regime `{other}`; use static:<bits>, dynamic:treat-if-l, \
                 or dynamic:treat-if-not-l"
            ))),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Regime::Static { actions } => format!(
                "static:{}",
                actions.iter().map(|a| a.to_string()).collect::<String>()
            ),
            Regime::CurrentCovariate { when0: 0, when1: 1 } => "dynamic:treat-if-l".into(),
            Regime::CurrentCovariate { when0: 1, when1: 0 } => "dynamic:treat-if-not-l".into(),
            Regime::CurrentCovariate { when0, when1 } => {
                format!("dynamic:l0->{when0},l1->{when1}")
            }
        }
    }
}

impl TreatmentRule for Regime {
    fn action(&self, stage: usize, l_hist: &[u8], _a_hist: &[u8]) -> u8 {
        match self {
            Regime::Static { actions } => actions[stage],
            Regime::CurrentCovariate { when0, when1 } => {
                if *l_hist.last().unwrap_or(&0) == 1 {
                    *when1
                } else {
                    *when0
                }
            }
        }
    }

    fn is_markov(&self) -> bool {
        true
    }
}

/// Exact g-formula mean for one stratum table: the sum over covariate paths
/// of the outcome probability weighted by the transition probabilities, with
/// actions supplied by the rule.
pub(crate) fn stratum_regime_mean(
    table: &StratumTable,
    horizon: usize,
    l0: u8,
    regime: &dyn TreatmentRule,
) -> Result<f64> {
    if let (StratumTable::Markov { params, log_p_zero, .. }, true) = (table, regime.is_markov()) {
        // O(K) forward pass: per-step ratio factors depend only on the
        // current (a, l) pair, so the path sum factorizes. Markov rules see
        // only the current covariate.
        let act = |k: usize, l: u8| regime.action(k, &[l], &[]);
        let mut m = [0.0f64; 2];
        let a0 = act(0, l0);
        m[l0 as usize] = if a0 == 1 {
            params.log_trt_ratio(0, l0).exp()
        } else {
            1.0
        };
        for k in 0..horizon {
            let mut next = [0.0f64; 2];
            for l in 0..2u8 {
                let w = m[l as usize];
                if w == 0.0 {
                    continue;
                }
                let a_k = act(k, l);
                let e = params.eta(a_k, l);
                for l_next in 0..2u8 {
                    let trans = if l_next == 1 { e } else { 1.0 - e };
                    let cov = if l_next == 1 {
                        params.log_cov_ratio(k, a_k).exp()
                    } else {
                        1.0
                    };
                    let a_next = act(k + 1, l_next);
                    let trt = if a_next == 1 {
                        params.log_trt_ratio(k + 1, l_next).exp()
                    } else {
                        1.0
                    };
                    next[l_next as usize] += w * trans * cov * trt;
                }
            }
            m = next;
        }
        return Ok(log_p_zero.exp() * (m[0] + m[1]));
    }

    if horizon > MAX_EXACT_HORIZON {
        return Err(Error::HorizonTooLarge(horizon, MAX_EXACT_HORIZON));
    }
    let mut mean = 0.0;
    let n_paths = 1u64 << horizon;
    let mut l_hist = vec![0u8; horizon + 1];
    let mut a_hist = vec![0u8; horizon + 1];
    for lbits in 0..n_paths {
        l_hist[0] = l0;
        for k in 0..horizon {
            l_hist[k + 1] = ((lbits >> (horizon - 1 - k)) & 1) as u8;
        }
        let mut prob = 1.0;
        let mut code = 0u64;
        for k in 0..=horizon {
            a_hist[k] = regime.action(k, &l_hist[..=k], &a_hist[..k]);
            code = (code << 1) | u64::from(a_hist[k]);
            if k < horizon {
                let e = table.eta_at(k, code);
                prob *= if l_hist[k + 1] == 1 { e } else { 1.0 - e };
                code = (code << 1) | u64::from(l_hist[k + 1]);
            }
        }
        mean += prob * table.p(code);
    }
    Ok(mean)
}

/// G-formula marginal mean `E[Y(regime)]` at the given coefficients,
/// averaged over the empirical baseline `(x, l_0)` sample of the dataset.
pub fn gformula_mean(
    spec: &ModelSpec,
    coefs: &[f64],
    data: &LongitudinalDataset,
    regime: &dyn TreatmentRule,
    opts: &FitOptions,
) -> Result<f64> {
    if data.subjects.is_empty() {
        return Err(Error::InvalidData("dataset is empty".into()));
    }
    let cols: Vec<usize> = spec
        .covariates
        .iter()
        .map(|name| {
            data.covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::MissingCovariate(name.clone()))
        })
        .collect::<Result<_>>()?;
    let mut tables = TableCache::new(spec, coefs, opts)?;
    let mut mean_cache: std::collections::BTreeMap<(Vec<u64>, u8), f64> =
        std::collections::BTreeMap::new();
    let mut total = 0.0;
    for s in &data.subjects {
        let x: Vec<f64> = cols.iter().map(|&c| s.x[c]).collect();
        let key = (x.iter().map(|v| v.to_bits()).collect::<Vec<u64>>(), s.l0);
        let mean = match mean_cache.get(&key) {
            Some(&m) => m,
            None => {
                let table = tables.stratum(&x, s.l0)?;
                let m = stratum_regime_mean(table, spec.horizon, s.l0, regime)?;
                mean_cache.insert(key, m);
                m
            }
        };
        total += mean;
    }
    Ok(total / data.n() as f64)
}

/// Two-regime ratio contrast `E[Y(numerator)] / E[Y(denominator)]`.
pub fn gformula_contrast(
    spec: &ModelSpec,
    coefs: &[f64],
    data: &LongitudinalDataset,
    numerator: &dyn TreatmentRule,
    denominator: &dyn TreatmentRule,
    opts: &FitOptions,
) -> Result<f64> {
    let num = gformula_mean(spec, coefs, data, numerator, opts)?;
    let den = gformula_mean(spec, coefs, data, denominator, opts)?;
    Ok(num / den)
}

#[derive(Clone, Debug, Serialize)]
pub struct IntervalEstimate {
    pub estimate: f64,
    pub se: f64,
    pub wald_lower: f64,
    pub wald_upper: f64,
    pub percentile_lower: f64,
    pub percentile_upper: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BootstrapOutput {
    pub point: FitResult,
    /// Extra functionals evaluated at the point fit.
    pub point_extras: Vec<f64>,
    pub b_requested: usize,
    pub n_dropped: usize,
    /// Converged replicate coefficient draws, in replicate order.
    pub coef_draws: Vec<Vec<f64>>,
    pub extra_draws: Vec<Vec<f64>>,
    /// Row-major coefficient covariance from the replicate draws.
    pub covariance: Vec<f64>,
    pub coefs: Vec<IntervalEstimate>,
    pub extras: Vec<IntervalEstimate>,
}

/// Functional recomputed on every replicate (fitted coefficients plus the
/// resampled data), e.g. g-formula contrasts.
pub type ReplicateFunctional<'a> =
    &'a (dyn Fn(&FitResult, &LongitudinalDataset) -> Result<Vec<f64>> + Sync);

/// Nonparametric bootstrap: resample subjects with replacement, refit
/// (warm-started at the point estimate, no extra starts), and summarize.
/// Replicates whose refit fails or does not converge are dropped and
/// counted; more than 10% dropped is an error. With 1.96-multiplier Wald
/// intervals and percentile intervals from the draws.
pub fn bootstrap(
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    method: FitMethod,
    b: usize,
    seed: u64,
    opts: &FitOptions,
    functional: Option<ReplicateFunctional>,
) -> Result<BootstrapOutput> {
    if b < 2 {
        return Err(Error::InvalidData(
            "bootstrap needs at least 2 replicates".into(),
        ));
    }
    let point = fit(spec, data, method, opts)?;
    let point_extras = match functional {
        Some(f) => f(&point, data)?,
        None => Vec::new(),
    };
    let n = data.n();
    let replicate_opts = FitOptions {
        warm_start: Some(point.coefs.clone()),
        multi_start: 0,
        ..opts.clone()
    };

    let draws: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, rep as u64));
            let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let resampled = data.resample(&indices);
            let refit = match fit(spec, &resampled, method, &replicate_opts) {
                Ok(r) if r.converged => r,
                _ => return None,
            };
            let extras = match functional {
                Some(f) => match f(&refit, &resampled) {
                    Ok(e) => e,
                    Err(_) => return None,
                },
                None => Vec::new(),
            };
            Some((refit.coefs, extras))
        })
        .collect();

    let kept: Vec<(Vec<f64>, Vec<f64>)> = draws.into_iter().flatten().collect();
    let n_dropped = b - kept.len();
    if n_dropped * 10 > b {
        return Err(Error::TooManyDropped {
            dropped: n_dropped,
            total: b,
        });
    }
    let coef_draws: Vec<Vec<f64>> = kept.iter().map(|(c, _)| c.clone()).collect();
    let extra_draws: Vec<Vec<f64>> = kept.iter().map(|(_, e)| e.clone()).collect();

    let covariance = sample_covariance(&coef_draws, point.coefs.len());
    let coefs = summarize(&point.coefs, &coef_draws, &covariance);
    let extra_cov = sample_covariance(&extra_draws, point_extras.len());
    let extras = summarize(&point_extras, &extra_draws, &extra_cov);

    Ok(BootstrapOutput {
        point,
        point_extras,
        b_requested: b,
        n_dropped,
        coef_draws,
        extra_draws,
        covariance,
        coefs,
        extras,
    })
}

fn mix_seed(seed: u64, rep: u64) -> u64 {
    let mut z = seed ^ rep.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x2545f4914f6cdd1d);
    z = (z ^ (z >> 33)).wrapping_mul(0xff51afd7ed558ccd);
    z ^ (z >> 33)
}

fn sample_covariance(draws: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut cov = vec![0.0; dim * dim];
    if draws.len() < 2 || dim == 0 {
        return cov;
    }
    let m = draws.len() as f64;
    let mut mean = vec![0.0; dim];
    for d in draws {
        for (mi, &v) in mean.iter_mut().zip(d) {
            *mi += v;
        }
    }
    for mi in &mut mean {
        *mi /= m;
    }
    for d in draws {
        for i in 0..dim {
            let di = d[i] - mean[i];
            for j in 0..dim {
                cov[i * dim + j] += di * (d[j] - mean[j]);
            }
        }
    }
    for c in &mut cov {
        *c /= m - 1.0;
    }
    cov
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
    }
}

fn summarize(point: &[f64], draws: &[Vec<f64>], cov: &[f64]) -> Vec<IntervalEstimate> {
    let dim = point.len();
    (0..dim)
        .map(|i| {
            let se = cov[i * dim + i].max(0.0).sqrt();
            let mut col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            IntervalEstimate {
                estimate: point[i],
                se,
                wald_lower: point[i] - 1.96 * se,
                wald_upper: point[i] + 1.96 * se,
                percentile_lower: percentile(&col, 0.025),
                percentile_upper: percentile(&col, 0.975),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Multivariate Wald test of `estimates[subset] = 0` against the bootstrap
/// covariance: `est' Cov^-1 est` referred to chi-square with `|subset|`
/// degrees of freedom.
pub fn wald_test(estimates: &[f64], covariance: &[f64], subset: &[usize]) -> Result<WaldTest> {
    let dim = estimates.len();
    if covariance.len() != dim * dim {
        return Err(Error::InvalidParameter(
            "covariance dimension does not match estimates".into(),
        ));
    }
    let m = subset.len();
    if m == 0 {
        return Err(Error::InvalidParameter("empty test subset".into()));
    }
    for &i in subset {
        if i >= dim {
            return Err(Error::InvalidParameter(format!(
                "subset index {i} out of range"
            )));
        }
    }
    let mut sub = vec![0.0; m * m];
    for (r, &i) in subset.iter().enumerate() {
        for (c, &j) in subset.iter().enumerate() {
            sub[r * m + c] = covariance[i * dim + j];
        }
    }
    let chol = cholesky(&mut sub, m);
    if chol.is_err() {
        return Err(Error::SingularCovariance);
    }
    let est: Vec<f64> = subset.iter().map(|&i| estimates[i]).collect();
    let z = chol_solve(&sub, m, &est);
    let statistic: f64 = est.iter().zip(&z).map(|(a, b)| a * b).sum();
    let p_value = if statistic <= 0.0 {
        1.0
    } else {
        let chi = ChiSquared::new(m as f64).expect("df >= 1");
        1.0 - chi.cdf(statistic)
    };
    Ok(WaldTest {
        statistic: statistic.max(0.0),
        df: m,
        p_value,
    })
}

/// In-place lower-triangular Cholesky; fails on non-positive pivots.
fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if sum <= 1e-300 {
                    return Err(Error::SingularCovariance);
                }
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    Ok(())
}

/// Solves `A x = b` given the Cholesky factor stored in `l`'s lower triangle.
fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

#[cfg(test)]
mod tests;
