use super::*;
use crate::history::encode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Draws natural parameters whose implied `p_max` sits well inside (0,1).
/// Free ratio draws with an uncalibrated odds product push the root closer
/// to 1 than machine epsilon (the flat-likelihood regime), so the odds
/// product is derived from a randomly chosen interior root instead.
pub(crate) fn random_params(horizon: usize, rng: &mut impl Rng) -> SnmmNaturalParams {
    let pos = |rng: &mut dyn rand::RngCore| (rng.random::<f64>() * 3.0 - 1.5).exp();
    let unit = |rng: &mut dyn rand::RngCore| rng.random::<f64>() * 0.96 + 0.02;
    let theta: Vec<Vec<f64>> = (0..=horizon)
        .map(|k| (0..blip_cells(k)).map(|_| pos(rng)).collect())
        .collect();
    let phi: Vec<Vec<f64>> = (0..horizon)
        .map(|k| (0..nuisance_cells(k)).map(|_| pos(rng)).collect())
        .collect();
    let eta: Vec<Vec<f64>> = (0..horizon)
        .map(|k| (0..nuisance_cells(k)).map(|_| unit(rng)).collect())
        .collect();
    let provisional = SnmmNaturalParams::new(horizon, theta, phi, 1.0, eta).unwrap();
    let target_pmax = 0.05 + 0.9 * rng.random::<f64>();
    let lg = log_gop_for_pmax(&provisional, target_pmax);
    provisional.with_log_gop(lg)
}

/// The log odds product that makes `forward_map`'s root land exactly at
/// `pmax`.
pub(crate) fn log_gop_for_pmax(params: &SnmmNaturalParams, pmax: f64) -> f64 {
    let ratios = RatioTable::from_params(params).unwrap();
    ratios
        .log_r()
        .iter()
        .map(|&lr| {
            let p = (lr - ratios.log_r_max()).exp() * pmax;
            p.ln() - (-p).ln_1p()
        })
        .sum::<f64>()
}

pub(crate) fn random_table(horizon: usize, rng: &mut impl Rng) -> ProbabilityTable {
    let p = (0..d1(horizon))
        .map(|_| rng.random::<f64>() * 0.96 + 0.02)
        .collect();
    let eta = (0..horizon)
        .map(|k| {
            (0..nuisance_cells(k))
                .map(|_| rng.random::<f64>() * 0.96 + 0.02)
                .collect()
        })
        .collect();
    ProbabilityTable::new(horizon, p, eta).unwrap()
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(1e-300))
        .fold(0.0, f64::max)
}

fn params_rel_err(a: &SnmmNaturalParams, b: &SnmmNaturalParams) -> f64 {
    // |delta log gop| is the relative error of gop itself to first order.
    let mut worst: f64 = (a.log_gop() - b.log_gop()).abs();
    for (ta, tb) in a.theta_tables().iter().zip(b.theta_tables()) {
        worst = worst.max(max_rel_err(ta, tb));
    }
    for (fa, fb) in a.phi_tables().iter().zip(b.phi_tables()) {
        worst = worst.max(max_rel_err(fa, fb));
    }
    worst
}

#[test]
fn blip_correction_examples() {
    // phi identically 1 kills every factor.
    let p = SnmmNaturalParams::constant(2, 1.7, 1.0, 1.0, 0.4).unwrap();
    for k in 0..=2 {
        for bi in 0..blip_cells(k) {
            assert!((blip_correction(&p, k, bi).unwrap() - 1.0).abs() < 1e-15);
        }
    }
    // Empty product at the final stage.
    let p = SnmmNaturalParams::constant(3, 2.0, 3.0, 1.0, 0.3).unwrap();
    assert_eq!(blip_correction(&p, 3, 5).unwrap(), 1.0);

    // K=1, k=0: single factor (eta(1) phi(1) + 1 - eta(1)) / (eta(0) phi(0) + 1 - eta(0)).
    let p = SnmmNaturalParams::new(
        1,
        vec![vec![1.0], vec![1.0; 4]],
        vec![vec![2.0, 2.0]],
        1.0,
        vec![vec![0.25, 0.5]],
    )
    .unwrap();
    assert!((blip_correction(&p, 0, 0).unwrap() - 1.2).abs() < 1e-15);
}

#[test]
fn covariate_correction_examples() {
    let p = SnmmNaturalParams::constant(2, 1.3, 1.0, 1.0, 0.6).unwrap();
    for k in 0..2 {
        for ni in 0..nuisance_cells(k) {
            assert!((covariate_correction(&p, k, ni).unwrap() - 1.0).abs() < 1e-15);
        }
    }
    let p = SnmmNaturalParams::constant(3, 1.3, 2.5, 1.0, 0.6).unwrap();
    for ni in 0..nuisance_cells(2) {
        assert_eq!(covariate_correction(&p, 2, ni).unwrap(), 1.0);
    }
}

/// The corrections' defining property, checked against the definitional
/// route: draw a random table, recover the parameters by the blipped-down
/// recursion, and confirm each zero-padded-history ratio in the table equals
/// theta/C (resp. phi/D).
#[test]
fn corrections_match_table_ratios() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for horizon in 1..=3usize {
        for _ in 0..20 {
            let table = random_table(horizon, &mut rng);
            let params = inverse_map(&table).unwrap();
            for k in 0..=horizon {
                for bi in 0..blip_cells(k) {
                    let with_trt = (bi << 1 | 1) << (2 * (horizon - k));
                    let without = (bi << 1) << (2 * (horizon - k));
                    let ratio = table.p_at(with_trt) / table.p_at(without);
                    let expected =
                        params.theta(k, bi) / blip_correction(&params, k, bi).unwrap();
                    assert!(
                        (ratio - expected).abs() < 1e-10 * ratio.abs(),
                        "K={horizon} k={k} bi={bi}"
                    );
                }
            }
            for k in 0..horizon {
                for ni in 0..nuisance_cells(k) {
                    let with_cov = ((ni << 2) | 2) << (2 * (horizon - k - 1));
                    let without = (ni << 2) << (2 * (horizon - k - 1));
                    let ratio = table.p_at(with_cov) / table.p_at(without);
                    let expected =
                        params.phi(k, ni) / covariate_correction(&params, k, ni).unwrap();
                    assert!(
                        (ratio - expected).abs() < 1e-10 * ratio.abs(),
                        "K={horizon} k={k} ni={ni}"
                    );
                }
            }
        }
    }
}

#[test]
fn forward_map_constant_examples() {
    // All ratios 1, gop 1: every probability is one half.
    let p = SnmmNaturalParams::new(
        1,
        vec![vec![1.0], vec![1.0; 4]],
        vec![vec![1.0, 1.0]],
        1.0,
        vec![vec![0.3, 0.7]],
    )
    .unwrap();
    let table = forward_map(&p).unwrap();
    for &v in table.p() {
        assert!((v - 0.5).abs() < 1e-12);
    }

    // gop = 3^-8 forces every odds to 1/3.
    let p = SnmmNaturalParams::new(
        1,
        vec![vec![1.0], vec![1.0; 4]],
        vec![vec![1.0, 1.0]],
        3f64.powi(-8),
        vec![vec![0.55, 0.1]],
    )
    .unwrap();
    let table = forward_map(&p).unwrap();
    for &v in table.p() {
        assert!((v - 0.25).abs() < 1e-12);
    }
}

#[test]
fn inverse_map_constant_table() {
    let table = ProbabilityTable::new(1, vec![0.5; 8], vec![vec![0.4, 0.6]]).unwrap();
    let params = inverse_map(&table).unwrap();
    for k in 0..=1 {
        for bi in 0..blip_cells(k) {
            assert!((params.theta(k, bi) - 1.0).abs() < 1e-14);
        }
    }
    assert!((params.phi(0, 0) - 1.0).abs() < 1e-14);
    assert!((params.gop() - 1.0).abs() < 1e-12);
}

#[test]
fn inverse_map_phi_is_definitional_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let table = random_table(1, &mut rng);
    let params = inverse_map(&table).unwrap();
    let p = |t: &[u8], c: &[u8]| table.p_at(encode(t, c).unwrap());
    // phi(1) = p_110 / p_100, phi(0) = p_010 / p_000
    let phi1 = p(&[1, 0], &[1]) / p(&[1, 0], &[0]);
    let phi0 = p(&[0, 0], &[1]) / p(&[0, 0], &[0]);
    assert!((params.phi(0, 1) - phi1).abs() < 1e-14);
    assert!((params.phi(0, 0) - phi0).abs() < 1e-14);
}

#[test]
fn round_trip_table_to_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for horizon in [2usize, 3] {
        let table = random_table(horizon, &mut rng);
        let params = inverse_map(&table).unwrap();
        let back = forward_map(&params).unwrap();
        assert!(
            max_rel_err(table.p(), back.p()) < 1e-10,
            "K={horizon}: {}",
            max_rel_err(table.p(), back.p())
        );
    }
}

#[test]
fn round_trip_params_to_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for horizon in 0..=3usize {
        for _ in 0..25 {
            let params = random_params(horizon, &mut rng);
            let table = forward_map(&params).unwrap();
            let back = inverse_map(&table).unwrap();
            assert!(
                params_rel_err(&params, &back) < 1e-8,
                "K={horizon}: {}",
                params_rel_err(&params, &back)
            );
        }
    }
}

#[test]
fn forward_map_range_and_gop_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for horizon in 0..=3usize {
        for _ in 0..25 {
            let params = random_params(horizon, &mut rng);
            let table = forward_map(&params).unwrap();
            for &v in table.p() {
                assert!(v > 0.0 && v < 1.0);
            }
            let gop = table.gop();
            assert!(
                (gop - params.gop()).abs() / params.gop() < 1e-9,
                "gop {gop} vs {}",
                params.gop()
            );
        }
    }
}

/// K=0 reduces to the point-exposure map (RR, OP) -> (p1, p0); cross-check
/// against the direct quadratic solution
/// `RR(OP-1) p0^2 - OP(1+RR) p0 + OP = 0`.
#[test]
fn point_exposure_reduction_matches_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let rr = (rng.random::<f64>() * 4.0 - 2.0).exp();
        let op = (rng.random::<f64>() * 4.0 - 2.0).exp();
        let params =
            SnmmNaturalParams::new(0, vec![vec![rr]], vec![], op, vec![]).unwrap();
        let table = forward_map(&params).unwrap();
        let p0 = table.p_at(0);
        let p1 = table.p_at(1);

        let p0_quad = if (op - 1.0).abs() < 1e-12 {
            1.0 / (1.0 + rr)
        } else {
            let a = rr * (op - 1.0);
            let b = -op * (1.0 + rr);
            let c = op;
            let disc = (b * b - 4.0 * a * c).sqrt();
            let r1 = (-b - disc) / (2.0 * a);
            let r2 = (-b + disc) / (2.0 * a);
            if r1 > 0.0 && r1 < 1.0 && rr * r1 < 1.0 {
                r1
            } else {
                r2
            }
        };
        assert!((p0 - p0_quad).abs() < 1e-9, "rr={rr} op={op}: {p0} vs {p0_quad}");
        assert!((p1 - rr * p0_quad).abs() < 1e-9);
    }
}

/// Theorem-level identity at K=1: the stage-0 blip equals the mixture ratio
/// times p_100/p_000.
#[test]
fn stage_zero_blip_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let table = random_table(1, &mut rng);
        let params = inverse_map(&table).unwrap();
        let e1 = table.eta(0, 1);
        let e0 = table.eta(0, 0);
        let f1 = params.phi(0, 1);
        let f0 = params.phi(0, 0);
        let p100 = table.p_at(encode(&[1, 0], &[0]).unwrap());
        let p000 = table.p_at(0);
        let expected = (e1 * f1 + 1.0 - e1) / (e0 * f0 + 1.0 - e0) * p100 / p000;
        assert!((params.theta(0, 0) - expected).abs() < 1e-12 * expected);
    }
}

#[test]
fn g_is_monotone_and_residual_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        // A random probability table induces a consistent (k, gop) pair with
        // an interior root at its largest entry.
        let n = rng.random_range(2usize..=64);
        let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 0.96 + 0.02).collect();
        let pmax = p.iter().cloned().fold(0.0, f64::max);
        let k: Vec<f64> = p.iter().map(|&v| v / pmax).collect();
        let gop = p
            .iter()
            .map(|&v| (v / (1.0 - v)).ln())
            .sum::<f64>()
            .exp();
        let g = |x: f64| {
            k.iter().map(|&v| v.ln()).sum::<f64>() + (k.len() as f64) * x.ln()
                - k.iter().map(|&v| (1.0 - v * x).ln()).sum::<f64>()
                - gop.ln()
        };
        let mut prev = f64::NEG_INFINITY;
        let mut x = 1e-3;
        while x < 1.0 {
            let v = g(x);
            assert!(v > prev, "g not increasing at {x}");
            prev = v;
            x += 1e-3;
        }
        let root = solve_pmax(&k, gop).unwrap();
        assert!(g(root).abs() <= 1e-9, "residual {} at root {root}", g(root));
    }
}

#[test]
fn inverse_map_rejects_boundary_probabilities() {
    assert!(ProbabilityTable::new(0, vec![0.0, 0.5], vec![]).is_err());
    assert!(ProbabilityTable::new(0, vec![1.0, 0.5], vec![]).is_err());
    assert!(ProbabilityTable::new(1, vec![0.5; 8], vec![vec![0.0, 0.5]]).is_err());
}
