//! Synthetic longitudinal data generation and exact truth oracles.
//!
//! Baseline covariates are independent Bernoulli draws; treatments follow a
//! logistic model with dependence on the previous treatment and the current
//! covariate; covariate transitions come from the truth model's `eta`
//! family; the outcome is drawn from the stratum probability table at the
//! realized history. Each variable family (X, L, A, Y) has its own random
//! substream derived from the master seed and the subject index, so growing
//! `n` extends the dataset instead of reshuffling it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, Subject};
use crate::error::{Error, Result};
use crate::inference::{self, TreatmentRule};
use crate::likelihood::{FitOptions, TableCache};
use crate::models::ModelSpec;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovariateLaw {
    pub name: String,
    pub prob: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub seed: u64,
    /// Independent Bernoulli laws for the X columns.
    pub covariates: Vec<CovariateLaw>,
    /// Law of the baseline time-varying bit (0 gives a degenerate column).
    #[serde(default)]
    pub l0_prob: f64,
    /// Stage-0 treatment model: expit(eps1 . (1, x) + eps4 * l_0).
    pub eps1: Vec<f64>,
    /// Later stages: expit(eps2 . (1, x) + eps3 * a_{k-1} + eps4 * l_k).
    pub eps2: Vec<f64>,
    pub eps3: f64,
    pub eps4: f64,
    /// Truth model for covariate transitions and the outcome table.
    pub model: ModelSpec,
    pub truth: Vec<f64>,
    /// Monte Carlo sample count for Markov-truth outcome tables.
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
}

fn default_mc() -> usize {
    4096
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.validate_coefs(&self.truth)?;
        if self.n == 0 {
            return Err(Error::InvalidData("sample size must be at least 1".into()));
        }
        let want = 1 + self.covariates.len();
        if self.eps1.len() != want || self.eps2.len() != want {
            return Err(Error::InvalidParameter(format!(
                "eps1/eps2 must have {want} entries (intercept + covariates)"
            )));
        }
        for c in &self.covariates {
            if !(0.0..=1.0).contains(&c.prob) {
                return Err(Error::InvalidParameter(format!(
                    "covariate probability out of range: {}",
                    c.prob
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.l0_prob) {
            return Err(Error::InvalidParameter(format!(
                "l0 probability out of range: {}",
                self.l0_prob
            )));
        }
        for (i, law) in self.covariates.iter().enumerate() {
            if self.model.covariates.get(i) != Some(&law.name) {
                return Err(Error::InvalidSpec(
                    "model covariates must match the simulated covariate laws, in order".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub(crate) fn fit_options(&self) -> FitOptions {
        FitOptions {
            mc_samples: self.mc_samples,
            seed: self.seed ^ 0x7461626c65,
            ..FitOptions::default()
        }
    }

    /// The canonical two-stage benchmark: one Bernoulli(1/2) baseline
    /// covariate, a saturated K=1 truth with blip coefficients (0, -0.5)
    /// and ratio/odds-product/transition coefficients (-0.5, 0.1).
    pub fn benchmark_k1(n: usize, seed: u64) -> Self {
        let model = ModelSpec::saturated(1, vec!["Z".into()]);
        let mut truth = Vec::with_capacity(model.n_coefs());
        // theta cells: intercept 0, slope -0.5
        for _ in 0..5 {
            truth.extend([0.0, -0.5]);
        }
        // phi cells, gop, eta cells: intercept -0.5, slope 0.1
        for _ in 0..5 {
            truth.extend([-0.5, 0.1]);
        }
        Self {
            n,
            seed,
            covariates: vec![CovariateLaw {
                name: "Z".into(),
                prob: 0.5,
            }],
            l0_prob: 0.0,
            eps1: vec![0.1, -0.5],
            eps2: vec![0.1, -0.5],
            eps3: 0.1,
            eps4: -0.5,
            model,
            truth,
            mc_samples: default_mc(),
        }
    }

    /// An eight-period Markov benchmark in the shape of a small
    /// mother/child morbidity panel: four binary baseline confounders, a
    /// time-varying illness indicator, and treatment (stress) depending on
    /// current illness.
    pub fn mscm_shape(n: usize, seed: u64) -> Self {
        let names = ["hhsize", "race", "employed", "married"];
        let model = ModelSpec::markov(7, names.iter().map(|s| s.to_string()).collect(), true);
        let mut truth = vec![0.0; model.n_coefs()];
        let coef_names = model.coef_names();
        let mut set = |name: &str, v: f64| {
            let i = coef_names.iter().position(|n| n == name).unwrap();
            truth[i] = v;
        };
        set("theta.l0", -0.10);
        set("theta.l1", -0.20);
        set("theta.hhsize", 0.20);
        set("theta.race", 0.10);
        set("theta.employed", -0.10);
        set("theta.married", 0.05);
        set("phi.a0", 0.30);
        set("phi.a1", 0.15);
        set("phi.star", -0.35);
        set("phi.hhsize", -0.10);
        set("phi.race", 0.10);
        set("phi.married", 0.05);
        set("gop.int", 1.00);
        set("gop.hhsize", 0.30);
        set("gop.race", -0.20);
        set("gop.employed", 0.10);
        set("eta.a0l0", -2.00);
        set("eta.a0l1", -0.30);
        set("eta.a1l0", -1.80);
        set("eta.a1l1", -0.20);
        set("eta.hhsize", -0.50);
        set("eta.race", 0.30);
        set("eta.married", 0.10);
        Self {
            n,
            seed,
            covariates: vec![
                CovariateLaw {
                    name: "hhsize".into(),
                    prob: 0.5,
                },
                CovariateLaw {
                    name: "race".into(),
                    prob: 0.3,
                },
                CovariateLaw {
                    name: "employed".into(),
                    prob: 0.6,
                },
                CovariateLaw {
                    name: "married".into(),
                    prob: 0.7,
                },
            ],
            l0_prob: 0.35,
            eps1: vec![-0.2, 0.2, -0.3, 0.1, 0.2],
            eps2: vec![-0.2, 0.2, -0.3, 0.1, 0.2],
            eps3: 0.3,
            eps4: 0.7,
            model,
            truth,
            mc_samples: default_mc(),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent substream per (variable family, subject).
fn substream(seed: u64, family: u64, subject: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ splitmix64(family.wrapping_mul(0xa076_1d64_78bd_642f) ^ subject),
    ))
}

fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

const FAMILY_X: u64 = 0;
const FAMILY_L: u64 = 1;
const FAMILY_A: u64 = 2;
const FAMILY_Y: u64 = 3;

/// Draws a dataset from the configured mechanism.
pub fn generate(config: &SimConfig) -> Result<LongitudinalDataset> {
    config.validate()?;
    let horizon = config.model.horizon;
    let opts = config.fit_options();
    let mut tables = TableCache::new(&config.model, &config.truth, &opts)?;
    let mut subjects = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let mut rng_x = substream(config.seed, FAMILY_X, i as u64);
        let mut rng_l = substream(config.seed, FAMILY_L, i as u64);
        let mut rng_a = substream(config.seed, FAMILY_A, i as u64);
        let mut rng_y = substream(config.seed, FAMILY_Y, i as u64);

        let x: Vec<f64> = config
            .covariates
            .iter()
            .map(|law| f64::from(rng_x.random::<f64>() < law.prob))
            .collect();
        let l0 = u8::from(rng_l.random::<f64>() < config.l0_prob);
        let stratum = tables.stratum(&x, l0)?;

        let lin = |eps: &[f64]| -> f64 {
            eps[0] + eps[1..].iter().zip(&x).map(|(e, v)| e * v).sum::<f64>()
        };
        let mut a: Vec<u8> = Vec::with_capacity(horizon + 1);
        let mut l: Vec<u8> = Vec::with_capacity(horizon);
        let mut l_cur = l0;
        let mut prefix = 0u64;
        for k in 0..=horizon {
            let lp = if k == 0 {
                lin(&config.eps1) + config.eps4 * f64::from(l0)
            } else {
                lin(&config.eps2)
                    + config.eps3 * f64::from(a[k - 1])
                    + config.eps4 * f64::from(l_cur)
            };
            let a_k = u8::from(rng_a.random::<f64>() < expit(lp));
            a.push(a_k);
            prefix = (prefix << 1) | u64::from(a_k);
            if k < horizon {
                let e = stratum.eta_at(k, prefix);
                let l_next = u8::from(rng_l.random::<f64>() < e);
                l.push(l_next);
                l_cur = l_next;
                prefix = (prefix << 1) | u64::from(l_next);
            }
        }
        let p = stratum.p(prefix);
        let y = u8::from(rng_y.random::<f64>() < p);
        subjects.push(Subject {
            id: (i + 1).to_string(),
            x,
            l0,
            a,
            l,
            y,
        });
    }
    LongitudinalDataset::new(
        horizon,
        config.covariates.iter().map(|c| c.name.clone()).collect(),
        subjects,
    )
}

/// Exact `E[Y(regime)]` under the configured truth: the g-formula sum over
/// covariate paths, averaged over the exact baseline law.
pub fn true_marginals(config: &SimConfig, regime: &dyn TreatmentRule) -> Result<f64> {
    config.validate()?;
    let opts = config.fit_options();
    let mut tables = TableCache::new(&config.model, &config.truth, &opts)?;
    let q = config.covariates.len();
    if q > 20 {
        return Err(Error::InvalidData(
            "too many covariates to enumerate".into(),
        ));
    }
    let mut mean = 0.0;
    let mut x = vec![0.0; q];
    for bits in 0..(1u64 << q) {
        let mut w = 1.0;
        for (j, law) in config.covariates.iter().enumerate() {
            let on = (bits >> j) & 1 == 1;
            x[j] = f64::from(on);
            w *= if on { law.prob } else { 1.0 - law.prob };
        }
        if w == 0.0 {
            continue;
        }
        for l0 in 0..2u8 {
            let wl = w * if l0 == 1 {
                config.l0_prob
            } else {
                1.0 - config.l0_prob
            };
            if wl == 0.0 {
                continue;
            }
            let stratum = tables.stratum(&x, l0)?;
            mean +=
                wl * inference::stratum_regime_mean(stratum, config.model.horizon, l0, regime)?;
        }
    }
    Ok(mean)
}
