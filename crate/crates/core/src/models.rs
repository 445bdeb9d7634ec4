//! Parametric families mapping baseline covariates to natural parameters:
//! log-linear for `theta`, `phi` and the odds product, logit-linear for
//! `eta`.
//!
//! Two layouts are supported. A saturated spec gives every stage/stratum
//! cell its own intercept plus per-cell slopes on the family's covariates. A
//! Markov spec shares cells across stages (`theta(l)`, `phi(a)`,
//! `eta(a, l)`), gives each family one shared slope vector, and optionally
//! adds a baseline-ratio slot: the log ratio of the never-treat outcome mean
//! between the `l_0 = 1` and `l_0 = 0` strata, which anchors the second
//! stratum's table in place of a second odds product. Following the
//! covariate structure of the ratio models, the baseline-ratio cell shares
//! the `phi` family's slope vector.

use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::history::{blip_cells, nuisance_cells};
use crate::parammap::{MarkovParams, SnmmNaturalParams};

/// Clamp keeping logit-linked probabilities strictly inside (0,1).
const ETA_EPS: f64 = 1e-12;

/// Reserved covariate name referring to the baseline time-varying bit.
pub const L0_NAME: &str = "L0";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub horizon: usize,
    #[serde(default)]
    pub markov: bool,
    /// Adds the baseline-ratio slot (Markov specs only).
    #[serde(default)]
    pub baseline_ratio: bool,
    /// Baseline covariate names, in the order coefficient slopes refer to
    /// them. The intercept is implicit. `"L0"` may appear in the per-family
    /// lists of saturated specs to let a family vary with the baseline bit.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Per-family covariate subsets; `None` means all of `covariates`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_covariates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_covariates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gop_covariates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_covariates: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Theta,
    Phi,
    Gop,
    Eta,
}

/// A resolved covariate reference: a column of `x`, or the baseline bit.
#[derive(Clone, Copy, Debug)]
enum CovRef {
    X(usize),
    L0,
}

fn lookup(names: &[String], name: &str) -> Option<usize> {
    names.iter().position(|n| n == name)
}

impl ModelSpec {
    /// A saturated spec: every cell has its own intercept and slopes.
    pub fn saturated(horizon: usize, covariates: Vec<String>) -> Self {
        Self {
            horizon,
            markov: false,
            baseline_ratio: false,
            covariates,
            theta_covariates: None,
            phi_covariates: None,
            gop_covariates: None,
            eta_covariates: None,
        }
    }

    /// A Markov spec with shared cells across stages.
    pub fn markov(horizon: usize, covariates: Vec<String>, baseline_ratio: bool) -> Self {
        Self {
            horizon,
            markov: true,
            baseline_ratio,
            covariates,
            theta_covariates: None,
            phi_covariates: None,
            gop_covariates: None,
            eta_covariates: None,
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.baseline_ratio && !self.markov {
            return Err(Error::InvalidSpec(
                "baseline_ratio requires a markov spec; saturated specs can reference L0 \
                 directly in family covariate lists"
                    .into(),
            ));
        }
        if lookup(&self.covariates, L0_NAME).is_some() {
            return Err(Error::InvalidSpec(format!(
                "`{L0_NAME}` is reserved for the baseline bit and cannot be an X column"
            )));
        }
        for fam in [Family::Theta, Family::Phi, Family::Gop, Family::Eta] {
            for name in self.family_cov_names(fam) {
                if name == L0_NAME {
                    if self.markov {
                        return Err(Error::InvalidSpec(format!(
                            "`{L0_NAME}` cannot appear in Markov family covariates; the \
                             baseline bit already enters as the stage-0 state"
                        )));
                    }
                } else if lookup(&self.covariates, name).is_none() {
                    return Err(Error::MissingCovariate(name.clone()));
                }
            }
        }
        if !self.markov && self.horizon > 8 {
            return Err(Error::InvalidSpec(format!(
                "saturated specs are limited to horizon 8 ({} coefficient cells requested)",
                self.n_param_functions()
            )));
        }
        Ok(())
    }

    pub fn family_cov_names(&self, fam: Family) -> &[String] {
        let opt = match fam {
            Family::Theta => &self.theta_covariates,
            Family::Phi => &self.phi_covariates,
            Family::Gop => &self.gop_covariates,
            Family::Eta => &self.eta_covariates,
        };
        opt.as_deref().unwrap_or(&self.covariates)
    }

    fn family_cov_refs(&self, fam: Family) -> Vec<CovRef> {
        self.family_cov_names(fam)
            .iter()
            .map(|name| {
                if name == L0_NAME {
                    CovRef::L0
                } else {
                    CovRef::X(lookup(&self.covariates, name).unwrap())
                }
            })
            .collect()
    }

    /// Number of cells (natural-parameter functions) in a family.
    pub fn family_cells(&self, fam: Family) -> usize {
        if self.markov {
            match fam {
                Family::Theta => 2,
                Family::Phi => 2,
                Family::Gop => 1,
                Family::Eta => 4,
            }
        } else {
            match fam {
                Family::Theta => (0..=self.horizon).map(|k| blip_cells(k) as usize).sum(),
                Family::Phi | Family::Eta => {
                    (0..self.horizon).map(|k| nuisance_cells(k) as usize).sum()
                }
                Family::Gop => 1,
            }
        }
    }

    /// Total count of natural-parameter functions across families.
    pub fn n_param_functions(&self) -> usize {
        [Family::Theta, Family::Phi, Family::Gop, Family::Eta]
            .into_iter()
            .map(|f| self.family_cells(f))
            .sum()
    }

    fn family_len(&self, fam: Family) -> usize {
        let n_cov = self.family_cov_names(fam).len();
        if self.markov {
            let extra = if fam == Family::Phi && self.baseline_ratio {
                1
            } else {
                0
            };
            self.family_cells(fam) + extra + n_cov
        } else {
            self.family_cells(fam) * (1 + n_cov)
        }
    }

    pub fn n_coefs(&self) -> usize {
        [Family::Theta, Family::Phi, Family::Gop, Family::Eta]
            .into_iter()
            .map(|f| self.family_len(f))
            .sum()
    }

    pub fn block(&self, fam: Family) -> Range<usize> {
        let mut start = 0;
        for f in [Family::Theta, Family::Phi, Family::Gop, Family::Eta] {
            let len = self.family_len(f);
            if f == fam {
                return start..start + len;
            }
            start += len;
        }
        unreachable!()
    }

    /// Coefficient indices of the blip (`theta`) block, the subset tested by
    /// the g-null Wald test.
    pub fn blip_block(&self) -> Range<usize> {
        self.block(Family::Theta)
    }

    /// Index of the baseline-ratio intercept, when present.
    pub fn baseline_ratio_index(&self) -> Option<usize> {
        if self.markov && self.baseline_ratio {
            Some(self.block(Family::Phi).start + 2)
        } else {
            None
        }
    }

    pub fn coef_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_coefs());
        for fam in [Family::Theta, Family::Phi, Family::Gop, Family::Eta] {
            let tag = match fam {
                Family::Theta => "theta",
                Family::Phi => "phi",
                Family::Gop => "gop",
                Family::Eta => "eta",
            };
            let covs = self.family_cov_names(fam);
            if self.markov {
                match fam {
                    Family::Theta => {
                        names.push("theta.l0".into());
                        names.push("theta.l1".into());
                    }
                    Family::Phi => {
                        names.push("phi.a0".into());
                        names.push("phi.a1".into());
                        if self.baseline_ratio {
                            names.push("phi.star".into());
                        }
                    }
                    Family::Gop => names.push("gop.int".into()),
                    Family::Eta => {
                        for a in 0..2 {
                            for l in 0..2 {
                                names.push(format!("eta.a{a}l{l}"));
                            }
                        }
                    }
                }
                for c in covs {
                    names.push(format!("{tag}.{c}"));
                }
            } else {
                let push_cell = |names: &mut Vec<String>, cell: String| {
                    names.push(cell.clone());
                    for c in covs {
                        names.push(format!("{cell}.{c}"));
                    }
                };
                match fam {
                    Family::Theta => {
                        for k in 0..=self.horizon {
                            for cell in 0..blip_cells(k) {
                                push_cell(&mut names, format!("theta.k{k}.c{cell}"));
                            }
                        }
                    }
                    Family::Phi | Family::Eta => {
                        for k in 0..self.horizon {
                            for cell in 0..nuisance_cells(k) {
                                push_cell(&mut names, format!("{tag}.k{k}.c{cell}"));
                            }
                        }
                    }
                    Family::Gop => push_cell(&mut names, "gop".into()),
                }
            }
        }
        names
    }

    pub fn validate_coefs(&self, coefs: &[f64]) -> Result<()> {
        if coefs.len() != self.n_coefs() {
            return Err(Error::CoefficientLength {
                expected: self.n_coefs(),
                got: coefs.len(),
            });
        }
        for &c in coefs {
            if !c.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "coefficients must be finite, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Compact evaluation of a Markov spec at one covariate vector. The
/// baseline bit enters at use time (stage-0 state, stratum selection).
#[derive(Clone, Debug)]
pub struct MarkovView {
    pub params: MarkovParams,
    pub log_gop: f64,
    /// Linear predictor of the baseline-ratio model, when the spec has one.
    pub baseline_log_ratio: Option<f64>,
}

fn expit(t: f64) -> f64 {
    let p = if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    };
    p.clamp(ETA_EPS, 1.0 - ETA_EPS)
}

fn check_x(spec: &ModelSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.covariates.len() {
        return Err(Error::MissingCovariate(format!(
            "expected {} covariate values, got {}",
            spec.covariates.len(),
            x.len()
        )));
    }
    for &v in x {
        if !v.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "covariate values must be finite, got {v}"
            )));
        }
    }
    Ok(())
}

fn slope_term(refs: &[CovRef], slopes: &[f64], x: &[f64], l0: u8) -> f64 {
    refs.iter()
        .zip(slopes)
        .map(|(r, &s)| {
            s * match r {
                CovRef::X(i) => x[*i],
                CovRef::L0 => f64::from(l0),
            }
        })
        .sum()
}

/// Evaluates a Markov spec into the compact view.
pub fn evaluate_markov(spec: &ModelSpec, coefs: &[f64], x: &[f64]) -> Result<MarkovView> {
    if !spec.markov {
        return Err(Error::InvalidSpec(
            "evaluate_markov requires a markov spec".into(),
        ));
    }
    spec.validate_coefs(coefs)?;
    check_x(spec, x)?;
    let fam_lin = |fam: Family, ints: usize| -> (Vec<f64>, f64) {
        let block = &coefs[spec.block(fam)];
        let extra = if fam == Family::Phi && spec.baseline_ratio {
            1
        } else {
            0
        };
        let refs = spec.family_cov_refs(fam);
        let slopes = &block[ints + extra..];
        let shared = slope_term(&refs, slopes, x, 0);
        (block[..ints + extra].to_vec(), shared)
    };
    let (t_int, t_sh) = fam_lin(Family::Theta, 2);
    let (p_int, p_sh) = fam_lin(Family::Phi, 2);
    let (g_int, g_sh) = fam_lin(Family::Gop, 1);
    let (e_int, e_sh) = fam_lin(Family::Eta, 4);
    let nonfinite = |v: f64| Error::InvalidParameter(format!("non-finite linear predictor {v}"));
    let exp_checked = |t: f64| -> Result<f64> {
        let v = t.exp();
        if !(v > 0.0 && v.is_finite()) {
            return Err(nonfinite(t));
        }
        Ok(v)
    };
    let params = MarkovParams::new(
        spec.horizon,
        [exp_checked(t_int[0] + t_sh)?, exp_checked(t_int[1] + t_sh)?],
        [exp_checked(p_int[0] + p_sh)?, exp_checked(p_int[1] + p_sh)?],
        [
            [expit(e_int[0] + e_sh), expit(e_int[1] + e_sh)],
            [expit(e_int[2] + e_sh), expit(e_int[3] + e_sh)],
        ],
    )?;
    let log_gop = g_int[0] + g_sh;
    if !log_gop.is_finite() {
        return Err(nonfinite(log_gop));
    }
    let baseline_log_ratio = if spec.baseline_ratio {
        let v = p_int[2] + p_sh;
        if !v.is_finite() {
            return Err(nonfinite(v));
        }
        Some(v)
    } else {
        None
    };
    Ok(MarkovView {
        params,
        log_gop,
        baseline_log_ratio,
    })
}

/// Evaluates the spec into full per-stage tables for one `(x, l_0)` stratum.
/// For Markov specs this is the full expansion of the compact view; with a
/// baseline-ratio slot the returned odds product is the shared one that
/// anchors the `l_0 = 0` stratum (the `l_0 = 1` stratum's table is anchored
/// by the ratio instead — see the likelihood table builder).
pub fn evaluate(spec: &ModelSpec, coefs: &[f64], x: &[f64], l0: u8) -> Result<SnmmNaturalParams> {
    spec.validate_coefs(coefs)?;
    check_x(spec, x)?;
    if spec.markov {
        let view = evaluate_markov(spec, coefs, x)?;
        return view.params.expand_log(l0, view.log_gop);
    }
    let horizon = spec.horizon;
    let eval_family = |fam: Family| -> Vec<f64> {
        let block = &coefs[spec.block(fam)];
        let refs = spec.family_cov_refs(fam);
        let stride = 1 + refs.len();
        (0..spec.family_cells(fam))
            .map(|cell| {
                let b = &block[cell * stride..(cell + 1) * stride];
                b[0] + slope_term(&refs, &b[1..], x, l0)
            })
            .collect()
    };
    let lin_theta = eval_family(Family::Theta);
    let lin_phi = eval_family(Family::Phi);
    let lin_gop = eval_family(Family::Gop);
    let lin_eta = eval_family(Family::Eta);

    let mut theta = Vec::with_capacity(horizon + 1);
    let mut offset = 0;
    for k in 0..=horizon {
        let cells = blip_cells(k) as usize;
        theta.push(
            lin_theta[offset..offset + cells]
                .iter()
                .map(|t| t.exp())
                .collect(),
        );
        offset += cells;
    }
    let mut phi = Vec::with_capacity(horizon);
    let mut eta = Vec::with_capacity(horizon);
    let mut offset = 0;
    for k in 0..horizon {
        let cells = nuisance_cells(k) as usize;
        phi.push(
            lin_phi[offset..offset + cells]
                .iter()
                .map(|t| t.exp())
                .collect(),
        );
        eta.push(
            lin_eta[offset..offset + cells]
                .iter()
                .map(|&t| expit(t))
                .collect(),
        );
        offset += cells;
    }
    SnmmNaturalParams::new_log(horizon, theta, phi, lin_gop[0], eta)
}
