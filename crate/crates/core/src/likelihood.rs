//! Observed-data log-likelihood and its maximization.
//!
//! The likelihood of one subject factorizes into a Bernoulli outcome term at
//! the subject's realized history and Bernoulli covariate-transition terms;
//! treatment and baseline factors carry no information about the model
//! parameters and are not modeled. Subjects sharing a `(x, l_0)` stratum
//! share one probability table per evaluation, and within a stratum the data
//! collapse to per-cell counts, so an evaluation costs O(cells), not O(n).
//!
//! Two fitting routes are provided: full maximum likelihood over all
//! coefficient blocks, and the two-step variant that first fits the
//! covariate-transition block by itself and then maximizes the outcome
//! factor with it frozen.
//!
//! For Markov specs the outcome table is never materialized: the cell
//! probability is `exp(log r(h) + log p_zero)` with `r` factorized into
//! per-step ratios, `r_max` from the dynamic program, and `p_max` from the
//! root solve on either the exhaustively enumerated ratio multiset (small
//! horizons) or the Monte Carlo approximation with histories sampled once
//! per fit.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::history::d1;
use crate::models::{evaluate, evaluate_markov, MarkovView, ModelSpec};
use crate::optim::{self, OptimOptions, OptimStatus};
use crate::parammap::{forward_map_with_hint, ProbabilityTable, RatioProfile};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Scaled-gradient convergence tolerance.
    pub tol: f64,
    /// Extra optimizer starts beyond the zero (g-null) start, each
    /// perturbed by centered Gaussian noise with variance 0.25.
    pub multi_start: usize,
    /// Monte Carlo sample count for the root solve of Markov specs whose
    /// `2^(2K+1)` cells exceed it; smaller horizons enumerate exactly.
    pub mc_samples: usize,
    pub seed: u64,
    /// Starting point override (bootstrap refits warm-start at the point
    /// estimate).
    #[serde(skip)]
    pub warm_start: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-5,
            multi_start: 1,
            mc_samples: 4096,
            seed: 0,
            warm_start: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Mle,
    TwoStep,
}

#[derive(Clone, Debug, Serialize)]
pub struct FitResult {
    pub method: FitMethod,
    pub coefs: Vec<f64>,
    pub coef_names: Vec<String>,
    /// Joint log-likelihood (outcome and transition factors) at the estimate.
    pub loglik: f64,
    pub converged: bool,
    pub status: String,
    pub iterations: usize,
    pub n_evals: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.coef_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.coefs[i])
    }
}

/// Ratio-multiset context for Markov root solves: per baseline bit, the
/// deduplicated history profiles with multiplicities. Fixed once per fit so
/// every evaluation sees the same sample (common random numbers).
#[derive(Clone, Debug)]
pub(crate) struct McSet {
    pub exhaustive: bool,
    pub per_l0: [Vec<(RatioProfile, f64)>; 2],
    pub total: f64,
}

impl McSet {
    pub fn build(horizon: usize, mc_samples: usize, seed: u64) -> McSet {
        use rand::{Rng, SeedableRng};
        let total = d1(horizon) as f64;
        let exhaustive = (d1(horizon) as u128) <= mc_samples as u128;
        let mut per_l0: [Vec<(RatioProfile, f64)>; 2] = [Vec::new(), Vec::new()];
        if exhaustive {
            for l0 in 0..2u8 {
                let mut groups: BTreeMap<u64, (RatioProfile, f64)> = BTreeMap::new();
                for code in 0..d1(horizon) {
                    let p = RatioProfile::of_code(horizon, l0, code);
                    groups.entry(p.key()).or_insert((p, 0.0)).1 += 1.0;
                }
                per_l0[l0 as usize] = groups.into_values().collect();
            }
        } else {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mask = d1(horizon) - 1;
            let codes: Vec<u64> = (0..mc_samples).map(|_| rng.random::<u64>() & mask).collect();
            let w = total / mc_samples as f64;
            for l0 in 0..2u8 {
                let mut groups: BTreeMap<u64, (RatioProfile, f64)> = BTreeMap::new();
                for &code in &codes {
                    let p = RatioProfile::of_code(horizon, l0, code);
                    groups.entry(p.key()).or_insert((p, 0.0)).1 += w;
                }
                per_l0[l0 as usize] = groups.into_values().collect();
            }
        }
        McSet {
            exhaustive,
            per_l0,
            total,
        }
    }
}

/// Sufficient statistics for one `(x, l_0)` stratum.
#[derive(Clone, Debug, Default)]
struct StratumStats {
    present: bool,
    /// Outcome cells: history code -> weights by outcome value.
    y_cells: Vec<(u64, [f64; 2])>,
    /// Cached ratio profiles of the outcome cells (Markov path).
    profiles: Vec<RatioProfile>,
    /// Saturated-path transition stats: per stage, nuisance prefix ->
    /// weights by next-covariate value.
    trans: Vec<Vec<(u64, [f64; 2])>>,
    /// Markov-path transition stats, indexed `[a][l][next]`.
    mtrans: [[[f64; 2]; 2]; 2],
}

#[derive(Clone, Debug)]
struct XGroup {
    x: Vec<f64>,
    strata: [StratumStats; 2],
}

pub(crate) struct Engine<'a> {
    spec: &'a ModelSpec,
    groups: Vec<XGroup>,
    mc: Option<McSet>,
}

/// Per-fit mutable state: root-solve warm starts per (group, stratum).
#[derive(Clone, Debug, Default)]
pub(crate) struct Workspace {
    hints: Vec<[Option<f64>; 2]>,
}

impl Workspace {
    fn for_engine(engine: &Engine) -> Self {
        Self {
            hints: vec![[None; 2]; engine.groups.len()],
        }
    }
}

impl<'a> Engine<'a> {
    pub fn new(spec: &'a ModelSpec, data: &LongitudinalDataset, opts: &FitOptions) -> Result<Self> {
        spec.validate()?;
        if spec.horizon != data.horizon {
            return Err(Error::InvalidSpec(format!(
                "spec horizon {} does not match data horizon {}",
                spec.horizon, data.horizon
            )));
        }
        if data.subjects.is_empty() {
            return Err(Error::InvalidData("dataset is empty".into()));
        }
        // Columns of the data matrix the spec's covariates refer to.
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

        let horizon = data.horizon;
        let mut groups: BTreeMap<Vec<u64>, XGroup> = BTreeMap::new();
        for s in &data.subjects {
            let x: Vec<f64> = cols.iter().map(|&c| s.x[c]).collect();
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let group = groups.entry(key).or_insert_with(|| XGroup {
                x,
                strata: [StratumStats::default(), StratumStats::default()],
            });
            let stratum = &mut group.strata[s.l0 as usize];
            stratum.present = true;
            let code = s.history_code()?;
            match stratum.y_cells.binary_search_by_key(&code, |c| c.0) {
                Ok(i) => stratum.y_cells[i].1[s.y as usize] += 1.0,
                Err(i) => {
                    let mut w = [0.0, 0.0];
                    w[s.y as usize] = 1.0;
                    stratum.y_cells.insert(i, (code, w));
                    stratum
                        .profiles
                        .insert(i, RatioProfile::of_code(horizon, s.l0, code));
                }
            }
            if stratum.trans.is_empty() {
                stratum.trans = vec![Vec::new(); horizon];
            }
            let mut l_prev = s.l0;
            let mut prefix = 0u64;
            for k in 0..horizon {
                prefix = (prefix << 1) | u64::from(s.a[k]);
                let next = s.l[k];
                match stratum.trans[k].binary_search_by_key(&prefix, |c| c.0) {
                    Ok(i) => stratum.trans[k][i].1[next as usize] += 1.0,
                    Err(i) => {
                        let mut w = [0.0, 0.0];
                        w[next as usize] = 1.0;
                        stratum.trans[k].insert(i, (prefix, w));
                    }
                }
                stratum.mtrans[s.a[k] as usize][l_prev as usize][next as usize] += 1.0;
                l_prev = next;
                prefix = (prefix << 1) | u64::from(next);
            }
        }
        let mc = if spec.markov {
            Some(McSet::build(horizon, opts.mc_samples, opts.seed))
        } else {
            None
        };
        Ok(Self {
            spec,
            groups: groups.into_values().collect(),
            mc,
        })
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::for_engine(self)
    }

    fn markov_log_p_zero(
        &self,
        view: &MarkovView,
        l0: u8,
        hint: &mut Option<f64>,
    ) -> Result<f64> {
        let mc = self.mc.as_ref().expect("markov engine");
        let log_r_max = view.params.log_r_max_dp(l0);
        let basis = view.params.log_ratio_basis();
        let entries: Vec<(f64, f64)> = mc.per_l0[l0 as usize]
            .iter()
            .map(|(p, w)| (p.log_r(&basis) - log_r_max, *w))
            .collect();
        let pmax = crate::parammap::solve_grouped(&entries, mc.total, view.log_gop, *hint)?;
        *hint = Some(pmax);
        Ok(pmax.ln() - log_r_max)
    }

    /// Outcome-factor log-likelihood of one Markov stratum given the log
    /// probability of the all-zero history.
    fn markov_y_part(stats: &StratumStats, basis: &[f64; 8], log_p_zero: f64) -> f64 {
        let mut acc = 0.0;
        for ((_, w), prof) in stats.y_cells.iter().zip(&stats.profiles) {
            let log_p = prof.log_r(basis) + log_p_zero;
            let p = log_p.exp();
            // r_max bounds every ratio, so p < p_max < 1 by construction.
            acc += w[1] * log_p + w[0] * (-p).ln_1p();
        }
        acc
    }

    fn markov_eta_part(stats: &StratumStats, view: &MarkovView) -> f64 {
        let mut acc = 0.0;
        for a in 0..2 {
            for l in 0..2 {
                let w = &stats.mtrans[a][l];
                if w[0] + w[1] > 0.0 {
                    let e = view.params.eta(a as u8, l as u8);
                    acc += w[1] * e.ln() + w[0] * (-e).ln_1p();
                }
            }
        }
        acc
    }

    fn exact_y_part(stats: &StratumStats, table: &ProbabilityTable) -> f64 {
        let mut acc = 0.0;
        for (code, w) in &stats.y_cells {
            let p = table.p_at(*code);
            acc += w[1] * p.ln() + w[0] * (-p).ln_1p();
        }
        acc
    }

    fn exact_eta_part(stats: &StratumStats, table: &ProbabilityTable) -> f64 {
        let mut acc = 0.0;
        for (k, stage) in stats.trans.iter().enumerate() {
            for (prefix, w) in stage {
                let e = table.eta(k, *prefix);
                acc += w[1] * e.ln() + w[0] * (-e).ln_1p();
            }
        }
        acc
    }

    /// Joint log-likelihood; `-inf` when the coefficients leave the model's
    /// domain (overflowing links, or a baseline-ratio anchor implying a cell
    /// probability of one or more).
    pub fn loglik(&self, coefs: &[f64], ws: &mut Workspace, parts: Parts) -> f64 {
        match self.loglik_inner(coefs, ws, parts) {
            Ok(v) => v,
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn loglik_inner(&self, coefs: &[f64], ws: &mut Workspace, parts: Parts) -> Result<f64> {
        let mut total = 0.0;
        for (gi, group) in self.groups.iter().enumerate() {
            if self.spec.markov {
                let view = evaluate_markov(self.spec, coefs, &group.x)?;
                let basis = view.params.log_ratio_basis();
                if parts.eta {
                    for stats in group.strata.iter().filter(|s| s.present) {
                        total += Self::markov_eta_part(stats, &view);
                    }
                }
                if !parts.y {
                    continue;
                }
                match view.baseline_log_ratio {
                    None => {
                        for (l0, stats) in group.strata.iter().enumerate() {
                            if !stats.present {
                                continue;
                            }
                            let log_p_zero = self.markov_log_p_zero(
                                &view,
                                l0 as u8,
                                &mut ws.hints[gi][l0],
                            )?;
                            total += Self::markov_y_part(stats, &basis, log_p_zero);
                        }
                    }
                    Some(blr) => {
                        // Stratum l0=0 is anchored by the odds product; the
                        // l0=1 stratum by the never-treat-mean ratio.
                        let log_p_zero0 =
                            self.markov_log_p_zero(&view, 0, &mut ws.hints[gi][0])?;
                        if group.strata[0].present {
                            total += Self::markov_y_part(&group.strata[0], &basis, log_p_zero0);
                        }
                        if group.strata[1].present {
                            let log_p_zero1 = blr + log_p_zero0;
                            let log_r_max1 = view.params.log_r_max_dp(1);
                            if log_r_max1 + log_p_zero1 >= 0.0 {
                                return Err(Error::InvalidParameter(
                                    "baseline ratio pushes a cell probability to one".into(),
                                ));
                            }
                            total += Self::markov_y_part(&group.strata[1], &basis, log_p_zero1);
                        }
                    }
                }
            } else {
                for (l0, stats) in group.strata.iter().enumerate() {
                    if !stats.present {
                        continue;
                    }
                    let params = evaluate(self.spec, coefs, &group.x, l0 as u8)?;
                    if parts.y {
                        let hint = &mut ws.hints[gi][l0];
                        let (table, pmax) = forward_map_with_hint(&params, *hint)?;
                        *hint = Some(pmax);
                        total += Self::exact_y_part(stats, &table);
                        if parts.eta {
                            total += Self::exact_eta_part(stats, &table);
                        }
                    } else if parts.eta {
                        // Transition factors need no table.
                        let mut acc = 0.0;
                        for (k, stage) in stats.trans.iter().enumerate() {
                            for (prefix, w) in stage {
                                let e = params.eta(k, *prefix);
                                acc += w[1] * e.ln() + w[0] * (-e).ln_1p();
                            }
                        }
                        total += acc;
                    }
                }
            }
        }
        Ok(total)
    }
}

/// Which likelihood factors to include.
#[derive(Clone, Copy, Debug)]
pub struct Parts {
    pub y: bool,
    pub eta: bool,
}

impl Parts {
    pub const JOINT: Parts = Parts { y: true, eta: true };
    pub const Y_ONLY: Parts = Parts { y: true, eta: false };
    pub const ETA_ONLY: Parts = Parts { y: false, eta: true };
}

/// Joint observed-data log-likelihood at the given coefficients. Parameter
/// values outside the model's domain yield `-inf`.
pub fn loglik(
    spec: &ModelSpec,
    coefs: &[f64],
    data: &LongitudinalDataset,
    opts: &FitOptions,
) -> Result<f64> {
    spec.validate_coefs(coefs)?;
    let engine = Engine::new(spec, data, opts)?;
    let mut ws = engine.workspace();
    Ok(engine.loglik(coefs, &mut ws, Parts::JOINT))
}

fn gaussian_perturbation(n: usize, seed: u64, sd: f64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            // Box-Muller from two uniforms.
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random::<f64>();
            sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

struct SubFit {
    x: Vec<f64>,
    status: OptimStatus,
    iterations: usize,
    n_evals: usize,
}

/// Maximizes the objective over the coefficients in `active`, holding the
/// rest of `base` fixed. Starts from `base[active]` and, when requested,
/// from additional perturbed starts, keeping the best.
fn optimize_block<F>(
    mut objective: F,
    base: &[f64],
    active: &[usize],
    opts: &FitOptions,
) -> SubFit
where
    F: FnMut(&[f64]) -> f64,
{
    let mut full = base.to_vec();
    let mut eval_sub = |sub: &[f64], full: &mut Vec<f64>| {
        for (i, &idx) in active.iter().enumerate() {
            full[idx] = sub[i];
        }
        objective(full)
    };
    let optim_opts = OptimOptions {
        max_iter: opts.max_iter,
        tol: opts.tol,
        ..OptimOptions::default()
    };
    let start: Vec<f64> = active.iter().map(|&i| base[i]).collect();
    let mut best: Option<optim::OptimResult> = None;
    let mut iterations = 0;
    let mut n_evals = 0;
    for attempt in 0..=opts.multi_start {
        let x0: Vec<f64> = if attempt == 0 {
            start.clone()
        } else {
            let noise = gaussian_perturbation(
                start.len(),
                opts.seed.wrapping_add(0x9e3779b97f4a7c15).wrapping_mul(attempt as u64 + 1),
                0.5,
            );
            start.iter().zip(&noise).map(|(a, b)| a + b).collect()
        };
        let mut f = |sub: &[f64]| eval_sub(sub, &mut full);
        let r = optim::maximize(&mut f, &x0, &optim_opts);
        iterations += r.iterations;
        n_evals += r.n_evals;
        let better = match &best {
            None => true,
            Some(b) => {
                (r.converged() && !b.converged() && r.f >= b.f - 1e-9) || r.f > b.f + 1e-12
            }
        };
        if better {
            best = Some(r);
        }
    }
    let best = best.unwrap();
    let mut x = base.to_vec();
    for (i, &idx) in active.iter().enumerate() {
        x[idx] = best.x[i];
    }
    SubFit {
        x,
        status: best.status,
        iterations,
        n_evals,
    }
}

fn status_name(s: OptimStatus) -> &'static str {
    match s {
        OptimStatus::Converged => "converged",
        OptimStatus::MaxIterations => "max-iterations",
        OptimStatus::LineSearchFailed => "line-search-failed",
        OptimStatus::StartNotFinite => "start-not-finite",
    }
}

fn finish(
    spec: &ModelSpec,
    engine: &Engine,
    method: FitMethod,
    coefs: Vec<f64>,
    statuses: Vec<OptimStatus>,
    iterations: usize,
    n_evals: usize,
) -> FitResult {
    let mut ws = engine.workspace();
    let loglik = engine.loglik(&coefs, &mut ws, Parts::JOINT);
    let converged = statuses.iter().all(|&s| s == OptimStatus::Converged);
    let mut warnings = Vec::new();
    if coefs.iter().any(|c| c.abs() > 20.0) {
        warnings.push(
            "some |coefficient| > 20; possible separation or a flat likelihood direction".into(),
        );
    }
    let status = statuses
        .iter()
        .map(|&s| status_name(s))
        .collect::<Vec<_>>()
        .join("+");
    FitResult {
        method,
        coefs,
        coef_names: spec.coef_names(),
        loglik,
        converged,
        status,
        iterations,
        n_evals,
        warnings,
    }
}

/// Full maximum likelihood over all coefficient blocks.
pub fn fit_mle(
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    opts: &FitOptions,
) -> Result<FitResult> {
    let engine = Engine::new(spec, data, opts)?;
    let n = spec.n_coefs();
    let base = starting_point(spec, opts)?;
    let active: Vec<usize> = (0..n).collect();
    let mut ws = engine.workspace();
    let sub = optimize_block(
        |c| engine.loglik(c, &mut ws, Parts::JOINT),
        &base,
        &active,
        opts,
    );
    Ok(finish(
        spec,
        &engine,
        FitMethod::Mle,
        sub.x,
        vec![sub.status],
        sub.iterations,
        sub.n_evals,
    ))
}

/// Two-step maximum likelihood: the covariate-transition block first (a
/// logistic fit touching no outcome data), then the outcome blocks with the
/// transitions frozen.
pub fn fit_two_step(
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    opts: &FitOptions,
) -> Result<FitResult> {
    let engine = Engine::new(spec, data, opts)?;
    let base = starting_point(spec, opts)?;
    let eta_block: Vec<usize> = spec.block(crate::models::Family::Eta).collect();
    let rest: Vec<usize> = (0..spec.n_coefs()).filter(|i| !eta_block.contains(i)).collect();

    let mut ws = engine.workspace();
    let step1 = optimize_block(
        |c| engine.loglik(c, &mut ws, Parts::ETA_ONLY),
        &base,
        &eta_block,
        opts,
    );
    let mut ws = engine.workspace();
    let step2 = optimize_block(
        |c| engine.loglik(c, &mut ws, Parts::Y_ONLY),
        &step1.x,
        &rest,
        opts,
    );
    Ok(finish(
        spec,
        &engine,
        FitMethod::TwoStep,
        step2.x,
        vec![step1.status, step2.status],
        step1.iterations + step2.iterations,
        step1.n_evals + step2.n_evals,
    ))
}

pub fn fit(
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    method: FitMethod,
    opts: &FitOptions,
) -> Result<FitResult> {
    match method {
        FitMethod::Mle => fit_mle(spec, data, opts),
        FitMethod::TwoStep => fit_two_step(spec, data, opts),
    }
}

fn starting_point(spec: &ModelSpec, opts: &FitOptions) -> Result<Vec<f64>> {
    match &opts.warm_start {
        Some(w) => {
            spec.validate_coefs(w)?;
            Ok(w.clone())
        }
        // The zero vector is the g-null and always interior.
        None => Ok(vec![0.0; spec.n_coefs()]),
    }
}

/// Outcome probabilities and transition probabilities for one `(x, l_0)`
/// stratum at fixed coefficients, behind a uniform interface for the
/// g-formula and the simulator.
#[derive(Clone, Debug)]
pub(crate) enum StratumTable {
    Exact {
        table: ProbabilityTable,
    },
    Markov {
        params: crate::parammap::MarkovParams,
        basis: [f64; 8],
        log_p_zero: f64,
        l0: u8,
    },
}

impl StratumTable {
    pub fn log_p(&self, code: u64) -> f64 {
        match self {
            StratumTable::Exact { table } => table.p_at(code).ln(),
            StratumTable::Markov {
                params,
                basis,
                log_p_zero,
                l0,
            } => RatioProfile::of_code(params.horizon(), *l0, code).log_r(basis) + log_p_zero,
        }
    }

    pub fn p(&self, code: u64) -> f64 {
        match self {
            StratumTable::Exact { table } => table.p_at(code),
            _ => self.log_p(code).exp(),
        }
    }

    /// Transition probability `P(L_{k+1} = 1)` given the stage-`k` nuisance
    /// prefix.
    pub fn eta_at(&self, stage: usize, prefix: u64) -> f64 {
        match self {
            StratumTable::Exact { table } => table.eta(stage, prefix),
            StratumTable::Markov { params, l0, .. } => {
                let a = (prefix & 1) as u8;
                let l = if stage == 0 {
                    *l0
                } else {
                    ((prefix >> 1) & 1) as u8
                };
                params.eta(a, l)
            }
        }
    }
}

/// Builds and caches stratum tables for fixed `(spec, coefs)`. Markov root
/// solves reuse the fit's sampling configuration so fitted likelihoods and
/// downstream functionals see the same approximation.
pub(crate) struct TableCache<'a> {
    spec: &'a ModelSpec,
    coefs: &'a [f64],
    mc: Option<McSet>,
    cache: BTreeMap<(Vec<u64>, u8), StratumTable>,
}

impl<'a> TableCache<'a> {
    pub fn new(spec: &'a ModelSpec, coefs: &'a [f64], opts: &FitOptions) -> Result<Self> {
        spec.validate()?;
        spec.validate_coefs(coefs)?;
        let mc = if spec.markov {
            Some(McSet::build(spec.horizon, opts.mc_samples, opts.seed))
        } else {
            None
        };
        Ok(Self {
            spec,
            coefs,
            mc,
            cache: BTreeMap::new(),
        })
    }

    fn solve_markov(&self, view: &MarkovView, l0: u8) -> Result<f64> {
        let mc = self.mc.as_ref().expect("markov cache");
        let log_r_max = view.params.log_r_max_dp(l0);
        let basis = view.params.log_ratio_basis();
        let entries: Vec<(f64, f64)> = mc.per_l0[l0 as usize]
            .iter()
            .map(|(p, w)| (p.log_r(&basis) - log_r_max, *w))
            .collect();
        let pmax = crate::parammap::solve_grouped(&entries, mc.total, view.log_gop, None)?;
        Ok(pmax.ln() - log_r_max)
    }

    pub fn stratum(&mut self, x: &[f64], l0: u8) -> Result<&StratumTable> {
        let key = (x.iter().map(|v| v.to_bits()).collect::<Vec<u64>>(), l0);
        if !self.cache.contains_key(&key) {
            let table = if self.spec.markov {
                let view = evaluate_markov(self.spec, self.coefs, x)?;
                let basis = view.params.log_ratio_basis();
                let log_p_zero = match (view.baseline_log_ratio, l0) {
                    (Some(blr), 1) => {
                        let anchored = blr + self.solve_markov(&view, 0)?;
                        if view.params.log_r_max_dp(1) + anchored >= 0.0 {
                            return Err(Error::InvalidParameter(
                                "baseline ratio pushes a cell probability to one".into(),
                            ));
                        }
                        anchored
                    }
                    _ => self.solve_markov(&view, l0)?,
                };
                StratumTable::Markov {
                    params: view.params,
                    basis,
                    log_p_zero,
                    l0,
                }
            } else {
                let params = evaluate(self.spec, self.coefs, x, l0)?;
                let (table, _) = forward_map_with_hint(&params, None)?;
                StratumTable::Exact { table }
            };
            self.cache.insert(key.clone(), table);
        }
        Ok(self.cache.get(&key).unwrap())
    }
}
