use super::*;
use crate::data::Subject;
use crate::models::{evaluate, ModelSpec};
use crate::parammap::forward_map;
use crate::simulate::{generate, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::Normal;

#[test]
fn wald_zero_estimate_gives_p_one() {
    let cov = vec![1.0, 0.2, 0.2, 2.0];
    let t = wald_test(&[0.0, 0.0], &cov, &[0, 1]).unwrap();
    assert_eq!(t.statistic, 0.0);
    assert_eq!(t.df, 2);
    assert!((t.p_value - 1.0).abs() < 1e-12);
}

#[test]
fn wald_scalar_matches_two_sided_normal() {
    let est = 0.37;
    let se = 0.12;
    let t = wald_test(&[est], &[se * se], &[0]).unwrap();
    assert!((t.statistic - (est / se).powi(2)).abs() < 1e-12);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let two_sided = 2.0 * (1.0 - normal.cdf((est / se).abs()));
    assert!((t.p_value - two_sided).abs() < 1e-10);
}

#[test]
fn wald_invariant_under_linear_reparameterization() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let m = 3;
        // Random PD covariance and estimate.
        let a: Vec<f64> = (0..m * m).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut cov = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    cov[i * m + j] += a[i * m + k] * a[j * m + k];
                }
                if i == j {
                    cov[i * m + j] += 0.3;
                }
            }
        }
        let est: Vec<f64> = (0..m).map(|_| rng.random::<f64>() - 0.5).collect();
        let base = wald_test(&est, &cov, &[0, 1, 2]).unwrap();

        // Invertible map B: stat must be unchanged for (B est, B cov B').
        let b: Vec<f64> = {
            let mut b: Vec<f64> = (0..m * m).map(|_| rng.random::<f64>() - 0.5).collect();
            for i in 0..m {
                b[i * m + i] += 1.5;
            }
            b
        };
        let mut est2 = vec![0.0; m];
        for i in 0..m {
            for k in 0..m {
                est2[i] += b[i * m + k] * est[k];
            }
        }
        let mut bc = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    bc[i * m + j] += b[i * m + k] * cov[k * m + j];
                }
            }
        }
        let mut cov2 = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    cov2[i * m + j] += bc[i * m + k] * b[j * m + k];
                }
            }
        }
        let t2 = wald_test(&est2, &cov2, &[0, 1, 2]).unwrap();
        assert!(
            (base.statistic - t2.statistic).abs() < 1e-8 * (1.0 + base.statistic),
            "{} vs {}",
            base.statistic,
            t2.statistic
        );
    }
}

#[test]
fn wald_singular_covariance_is_an_error() {
    let cov = vec![0.0; 4];
    assert!(matches!(
        wald_test(&[1.0, 2.0], &cov, &[0, 1]),
        Err(Error::SingularCovariance)
    ));
}

#[test]
fn constant_table_means_are_constant() {
    // Zero coefficients: p = 1/2 in every cell, so every regime mean is 1/2.
    let cfg = SimConfig::benchmark_k1(40, 2);
    let mut data = generate(&cfg).unwrap();
    data.subjects.truncate(25);
    let spec = ModelSpec::saturated(1, vec!["Z".into()]);
    let coefs = vec![0.0; spec.n_coefs()];
    let opts = FitOptions::default();
    for regime in [
        Regime::always(1),
        Regime::never(1),
        Regime::CurrentCovariate { when0: 1, when1: 0 },
    ] {
        let m = gformula_mean(&spec, &coefs, &data, &regime, &opts).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
    }
}

#[test]
fn never_treat_mean_is_eta_weighted_zero_cell_average() {
    // Direct identity at K=1: E[Y(0,0)] per stratum is
    // eta(0) p_001-cell(l1=1,a=0) + (1-eta(0)) p at the all-zero history.
    let cfg = SimConfig::benchmark_k1(60, 9);
    let data = generate(&cfg).unwrap();
    let spec = &cfg.model;
    let opts = FitOptions::default();
    let by_g = gformula_mean(spec, &cfg.truth, &data, &Regime::never(1), &opts).unwrap();
    let mut acc = 0.0;
    for s in &data.subjects {
        let params = evaluate(spec, &cfg.truth, &s.x, s.l0).unwrap();
        let table = forward_map(&params).unwrap();
        let e = table.eta(0, 0);
        acc += e * table.p_at(0b010) + (1.0 - e) * table.p_at(0);
    }
    acc /= data.n() as f64;
    assert!((by_g - acc).abs() < 1e-12, "{by_g} vs {acc}");
}

#[test]
fn marginalized_stage_one_blip_two_routes() {
    // E[Y(1,1)]/E[Y(1,0)] via the g-formula equals the eta-weighted mixture
    // of table cells, stratum by stratum.
    let cfg = SimConfig::benchmark_k1(60, 10);
    let data = generate(&cfg).unwrap();
    let spec = &cfg.model;
    let opts = FitOptions::default();
    let m11 = gformula_mean(spec, &cfg.truth, &data, &Regime::Static(vec![1, 1]), &opts).unwrap();
    let m10 = gformula_mean(spec, &cfg.truth, &data, &Regime::Static(vec![1, 0]), &opts).unwrap();
    let (mut w11, mut w10) = (0.0, 0.0);
    for s in &data.subjects {
        let params = evaluate(spec, &cfg.truth, &s.x, s.l0).unwrap();
        let table = forward_map(&params).unwrap();
        let e = table.eta(0, 1);
        w11 += e * table.p_at(0b111) + (1.0 - e) * table.p_at(0b101);
        w10 += e * table.p_at(0b110) + (1.0 - e) * table.p_at(0b100);
    }
    w11 /= data.n() as f64;
    w10 /= data.n() as f64;
    assert!((m11 / m10 - w11 / w10).abs() < 1e-10);
}

/// Wrapper hiding a rule's Markov structure, forcing path enumeration.
struct Opaque<'a>(&'a dyn TreatmentRule);

impl TreatmentRule for Opaque<'_> {
    fn action(&self, stage: usize, l_hist: &[u8], a_hist: &[u8]) -> u8 {
        self.0.action(stage, l_hist, a_hist)
    }
}

#[test]
fn markov_fast_path_matches_enumeration() {
    let spec = ModelSpec::markov(3, vec!["z".into()], false);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let subjects: Vec<Subject> = (0..30)
        .map(|i| Subject {
            id: i.to_string(),
            x: vec![f64::from(rng.random_range(0..2u8))],
            l0: rng.random_range(0..2),
            a: (0..=3).map(|_| rng.random_range(0..2)).collect(),
            l: (0..3).map(|_| rng.random_range(0..2)).collect(),
            y: rng.random_range(0..2),
        })
        .collect();
    let data = crate::data::LongitudinalDataset::new(3, vec!["z".into()], subjects).unwrap();
    let opts = FitOptions::default();
    for _ in 0..5 {
        let coefs: Vec<f64> = (0..spec.n_coefs())
            .map(|_| rng.random::<f64>() * 0.8 - 0.4)
            .collect();
        for regime in [
            Regime::always(3),
            Regime::Static(vec![1, 0, 1, 0]),
            Regime::CurrentCovariate { when0: 0, when1: 1 },
        ] {
            let fast = gformula_mean(&spec, &coefs, &data, &regime, &opts).unwrap();
            let slow = gformula_mean(&spec, &coefs, &data, &Opaque(&regime), &opts).unwrap();
            assert!(
                (fast - slow).abs() < 1e-12,
                "{}: {fast} vs {slow}",
                regime.describe()
            );
        }
    }
}

#[test]
fn dynamic_rule_differs_from_static_means() {
    let cfg = SimConfig::benchmark_k1(80, 13);
    let data = generate(&cfg).unwrap();
    let opts = FitOptions::default();
    let dynamic = gformula_mean(
        &cfg.model,
        &cfg.truth,
        &data,
        &Regime::CurrentCovariate { when0: 0, when1: 1 },
        &opts,
    )
    .unwrap();
    assert!(dynamic.is_finite() && dynamic > 0.0 && dynamic < 1.0);
}

#[test]
fn bootstrap_is_bit_reproducible() {
    let cfg = SimConfig::benchmark_k1(120, 3);
    let data = generate(&cfg).unwrap();
    let opts = FitOptions {
        multi_start: 0,
        ..FitOptions::default()
    };
    let run = |_: u32| {
        bootstrap(
            &cfg.model,
            &data,
            FitMethod::TwoStep,
            2,
            77,
            &opts,
            None,
        )
        .unwrap()
    };
    let a = run(0);
    let b = run(1);
    assert_eq!(a.coef_draws, b.coef_draws);
    assert_eq!(a.covariance, b.covariance);
}

#[test]
fn bootstrap_se_tracks_binomial_se() {
    // Saturated intercept-only model: the fitted probability of a history
    // cell is its empirical frequency, so its bootstrap SE should match the
    // binomial formula at the observed cell count.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let subjects: Vec<Subject> = (0..2000)
        .map(|i| Subject {
            id: i.to_string(),
            x: vec![],
            l0: 0,
            a: vec![rng.random_range(0..2), rng.random_range(0..2)],
            l: vec![rng.random_range(0..2)],
            y: u8::from(rng.random::<f64>() < 0.4),
        })
        .collect();
    let data = crate::data::LongitudinalDataset::new(1, vec![], subjects).unwrap();
    let spec = ModelSpec::saturated(1, vec![]);
    let opts = FitOptions {
        multi_start: 0,
        tol: 1e-7,
        ..FitOptions::default()
    };
    let cell = 0b110u64;
    let functional: ReplicateFunctional = &|fit, _| {
        let params = evaluate(&ModelSpec::saturated(1, vec![]), &fit.coefs, &[], 0)?;
        Ok(vec![forward_map(&params)?.p_at(cell)])
    };
    let out = bootstrap(
        &spec,
        &data,
        FitMethod::Mle,
        500,
        5,
        &opts,
        Some(functional),
    )
    .unwrap();
    let n_cell = data
        .subjects
        .iter()
        .filter(|s| s.history_code().unwrap() == cell)
        .count() as f64;
    let p_hat = out.point_extras[0];
    let binom = (p_hat * (1.0 - p_hat) / n_cell).sqrt();
    let boot = out.extras[0].se;
    assert!(
        (boot - binom).abs() / binom < 0.25,
        "bootstrap {boot} vs binomial {binom}"
    );
}
