use dpfnas_core::privacy::{
    clt_mu, double_conjugate, eval_f_eps_delta, eval_g_mu, gdp_compose, lower_hull_vertices,
    normal_pdf, normal_quantile, party_privacy, subsample_operator,
};
use dpfnas_core::{GdpLevel, PrivacyQuery, TradeoffFunction};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `Phi(-1)`, from a 30-digit arbitrary-precision evaluation.
const PHI_MINUS_ONE: f64 = 0.158_655_253_931_457_051_414_767_454_368;

/// Most powerful level-`alpha` test between `N(0,1)` and `N(shift,1)`,
/// estimated from draws: the threshold is the empirical upper `alpha`
/// quantile of the null statistic. Returns the type-II error and a
/// standard error that covers both the miss rate and the threshold estimate.
fn monte_carlo_tradeoff(null: &mut [f64], alt: &[f64], alpha: f64, shift: f64) -> (f64, f64) {
    let n = null.len();
    null.sort_by(f64::total_cmp);
    let t = null[((1.0 - alpha) * n as f64) as usize];
    let beta = alt.iter().filter(|&&y| y <= t).count() as f64 / alt.len() as f64;
    // The band only needs the density near the threshold, not a precise one.
    let z = normal_quantile(1.0 - alpha);
    let quantile_se = (alpha * (1.0 - alpha) / n as f64).sqrt() / normal_pdf(z);
    let miss_se = (beta * (1.0 - beta) / alt.len() as f64).sqrt();
    let se = miss_se.hypot(normal_pdf(z - shift) * quantile_se);
    (beta, se)
}

#[test]
fn gaussian_tradeoff_matches_a_likelihood_ratio_test() {
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut null: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let alt: Vec<f64> = (0..n)
        .map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let (beta, se) = monte_carlo_tradeoff(&mut null, &alt, 0.5, 1.0);
    let g = eval_g_mu(1.0, 0.5);
    assert!(
        (g - beta).abs() <= 3.0 * se,
        "closed form {g}, simulated {beta} (se {se})"
    );
    assert!((g - PHI_MINUS_ONE).abs() <= 1e-15, "{g}");
    assert!((g - 0.1586553).abs() <= 1e-6);
}

#[test]
fn two_mechanisms_compose_along_the_mean_direction() {
    // Only the projection on the mean shift carries information.
    let (m1, m2) = (0.6, 0.8);
    let norm = f64::hypot(m1, m2);
    let n = 400_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut draw = |shift: bool| -> f64 {
        let (x, y): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let (x, y) = if shift { (x + m1, y + m2) } else { (x, y) };
        (m1 * x + m2 * y) / norm
    };
    let mut null: Vec<f64> = (0..n).map(|_| draw(false)).collect();
    let alt: Vec<f64> = (0..n).map(|_| draw(true)).collect();
    let composed = gdp_compose(GdpLevel::new(m1).unwrap(), GdpLevel::new(m2).unwrap()).mu();
    assert!((composed - 1.0).abs() <= 1e-12);
    for alpha in [0.05, 0.3, 0.7] {
        let (beta, se) = monte_carlo_tradeoff(&mut null, &alt, alpha, norm);
        let g = eval_g_mu(composed, alpha);
        assert!(
            (g - beta).abs() <= 3.0 * se,
            "alpha {alpha}: {g} vs {beta} (se {se})"
        );
    }
}

#[test]
fn golden_values() {
    let mu = clt_mu(0.004, 10_000, 1.0).unwrap().mu();
    let closed = 0.4 * (std::f64::consts::E - 1.0).sqrt();
    assert!((mu - closed).abs() <= 1e-12);
    assert!((mu - 0.524333).abs() <= 1e-6);
    let f = eval_f_eps_delta(1.0, 0.0, 0.2);
    let oracle = f64::max(1.0 - 0.2 * std::f64::consts::E, 0.8 / std::f64::consts::E);
    assert!((f - oracle).abs() <= 1e-15);
    assert!((f - 0.456344).abs() <= 1e-6);
}

fn check_invariants(f: &TradeoffFunction) {
    f.validate().unwrap();
    for (a, b) in f.alpha().iter().zip(f.beta()) {
        assert!(*b <= 1.0 - a + 1e-12);
    }
}

#[test]
fn subsampled_gaussian_lies_between_the_curve_and_identity() {
    let g1 = TradeoffFunction::gaussian(1.0, 2001).unwrap();
    let id = TradeoffFunction::identity(2001).unwrap();
    for p in [0.1, 0.5, 0.9] {
        let s = subsample_operator(&g1, p).unwrap();
        check_invariants(&s);
        assert!(s.dominates(&g1, 1e-12), "p={p}: below G_1");
        assert!(id.dominates(&s, 1e-12), "p={p}: above Id");
    }
}

#[test]
fn full_sampling_leaves_a_gaussian_curve_unchanged() {
    let g = TradeoffFunction::gaussian(1.0, 10_001).unwrap();
    let s = subsample_operator(&g, 1.0).unwrap();
    assert!(s.sup_distance(&g) < 1e-6);
}

/// `i` is a lower-hull vertex when it lies strictly below every chord
/// spanning it.
fn brute_force_vertices(xs: &[f64], ys: &[f64]) -> Vec<usize> {
    let n = xs.len();
    (0..n)
        .filter(|&i| {
            (0..i).all(|a| {
                (i + 1..n).all(|b| {
                    let cross =
                        (xs[b] - xs[a]) * (ys[i] - ys[a]) - (ys[b] - ys[a]) * (xs[i] - xs[a]);
                    cross < 0.0
                })
            })
        })
        .collect()
}

#[test]
fn hull_matches_brute_force_on_random_curves() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let n = rng.random_range(3..60);
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        // Piecewise curves: a strictly convex trend with random bumps, so no
        // interior point is exactly collinear with its neighbours.
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| {
                (1.0 - x).powi(2)
                    + if rng.random_bool(0.4) {
                        rng.random_range(0.0..0.3)
                    } else {
                        0.0
                    }
            })
            .collect();
        let fast = lower_hull_vertices(&xs, &ys);
        assert_eq!(fast, brute_force_vertices(&xs, &ys));
        let env = double_conjugate(&xs, &ys);
        for &v in &fast {
            assert_eq!(env[v], ys[v]);
        }
        for (e, y) in env.iter().zip(&ys) {
            assert!(e <= y);
        }
    }
}

fn random_query(rng: &mut ChaCha8Rng) -> PrivacyQuery {
    let n_tr = rng.random_range(1_000..50_000);
    let n_val = rng.random_range(1_000..50_000);
    let b = rng.random_range(10.0..500.0);
    PrivacyQuery::new(
        b,
        n_tr,
        n_val,
        rng.random_range(10..20_000),
        rng.random_range(0.5..4.0),
        rng.random_range(0.5..4.0),
    )
}

fn mus(q: &PrivacyQuery) -> (f64, f64) {
    let r = party_privacy(0, q).unwrap();
    (r.mu_w.unwrap().mu(), r.mu_a.unwrap().mu())
}

#[test]
fn report_moves_in_the_expected_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let q = random_query(&mut rng);
        let (w, a) = mus(&q);
        let bigger_b = mus(&PrivacyQuery::new(
            q.batch * 1.1,
            q.n_tr,
            q.n_val,
            q.iterations,
            q.sigma,
            q.tau,
        ));
        assert!(bigger_b.0 > w && bigger_b.1 > a);
        let longer = mus(&PrivacyQuery {
            iterations: q.iterations + 1,
            ..q
        });
        assert!(longer.0 > w && longer.1 > a);
        let more_tr = mus(&PrivacyQuery {
            n_tr: q.n_tr + 100,
            ..q
        });
        assert!(more_tr.0 < w && more_tr.1 == a);
        let more_val = mus(&PrivacyQuery {
            n_val: q.n_val + 100,
            ..q
        });
        assert!(more_val.1 < a && more_val.0 == w);
        let louder_w = mus(&PrivacyQuery {
            sigma: q.sigma * 1.1,
            ..q
        });
        assert!(louder_w.0 < w && louder_w.1 == a);
        let louder_a = mus(&PrivacyQuery {
            tau: q.tau * 1.1,
            ..q
        });
        assert!(louder_a.1 < a && louder_a.0 == w);
    }
}

#[test]
fn self_composition_matches_the_square_root_law() {
    let mu0 = GdpLevel::new(0.03).unwrap();
    let mut acc = GdpLevel::new(0.0).unwrap();
    for t in 1..=400u64 {
        acc = gdp_compose(acc, mu0);
        assert!((acc.mu() - mu0.mu() * (t as f64).sqrt()).abs() <= 1e-12);
    }
    // The same square-root law is what the iteration count enters through.
    let one = clt_mu(0.01, 1, 1.3).unwrap();
    let many = clt_mu(0.01, 400, 1.3).unwrap();
    assert!((many.mu() - 20.0 * one.mu()).abs() <= 1e-12);
}

#[test]
fn doubling_iterations_scales_by_root_two() {
    let q = PrivacyQuery::new(100.0, 25_000, 12_500, 5_000, 1.0, 1.5);
    let (w, a) = mus(&q);
    let (w2, a2) = mus(&PrivacyQuery {
        iterations: 10_000,
        ..q
    });
    assert!((w2 - w * 2f64.sqrt()).abs() <= 1e-12);
    assert!((a2 - a * 2f64.sqrt()).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn composition_is_associative_and_commutative(a in 0.0f64..10.0, b in 0.0f64..10.0, c in 0.0f64..10.0) {
        let (a, b, c) = (GdpLevel::new(a).unwrap(), GdpLevel::new(b).unwrap(), GdpLevel::new(c).unwrap());
        prop_assert!((gdp_compose(a, b).mu() - gdp_compose(b, a).mu()).abs() <= 1e-12);
        let left = gdp_compose(gdp_compose(a, b), c).mu();
        let right = gdp_compose(a, gdp_compose(b, c)).mu();
        prop_assert!((left - right).abs() <= 1e-12);
    }

    #[test]
    fn gaussian_curves_order_by_mu(m1 in 0.0f64..5.0, d in 0.001f64..3.0) {
        let lo = TradeoffFunction::gaussian(m1, 501).unwrap();
        let hi = TradeoffFunction::gaussian(m1 + d, 501).unwrap();
        check_invariants(&lo);
        check_invariants(&hi);
        prop_assert!(lo.dominates(&hi, 0.0));
    }

    #[test]
    fn subsampling_never_weakens_privacy(mu in 0.0f64..4.0, eps in 0.0f64..3.0, p in 0.0f64..=1.0) {
        for f in [
            TradeoffFunction::gaussian(mu, 1001).unwrap(),
            TradeoffFunction::eps_delta(eps, 0.01, 1001).unwrap(),
        ] {
            let s = subsample_operator(&f, p).unwrap();
            check_invariants(&s);
            prop_assert!(s.dominates(&f, 1e-12));
        }
    }
}
