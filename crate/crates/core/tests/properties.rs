use npr_core::beliefs::{expected_log_value_added, fit_belief, synthetic_response, ScenarioResponse};
use npr_core::datamodel::{join_lead, validate_panel, Field, FirmYear, Panel};
use npr_core::linalg::ones;
use npr_core::mcsim::{expected_log_output, optimal_labor, DgpConfig, OptErr};
use npr_core::scam::{fit_scam, Lambda, ScamOptions};
use npr_core::splines::{build_basis, monotone_map, BSplineBasis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Textbook Cox-de Boor recursion with the right endpoint assigned to the last span.
fn cox_de_boor(t: &[f64], i: usize, order: usize, x: f64, upper: f64) -> f64 {
    if order == 1 {
        let inside = t[i] <= x && x < t[i + 1];
        let at_end = x == upper && t[i] < t[i + 1] && t[i + 1] == upper;
        return if inside || at_end { 1.0 } else { 0.0 };
    }
    let p = order - 1;
    let mut v = 0.0;
    let d1 = t[i + p] - t[i];
    if d1 > 0.0 {
        v += (x - t[i]) / d1 * cox_de_boor(t, i, order - 1, x, upper);
    }
    let d2 = t[i + order] - t[i + 1];
    if d2 > 0.0 {
        v += (t[i + order] - x) / d2 * cox_de_boor(t, i + 1, order - 1, x, upper);
    }
    v
}

fn basis_from(lo: f64, width: f64, q: usize, order: usize) -> BSplineBasis {
    build_basis(&[lo, lo + width], q, order).unwrap()
}

proptest! {
    #[test]
    fn partition_of_unity(lo in -50.0..50.0f64, width in 0.01..100.0f64, q in 4usize..30, u in 0.0..=1.0f64) {
        let b = basis_from(lo, width, q, 4);
        let x = lo + u * width;
        let s: f64 = b.eval(x).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-10);
        prop_assert!(b.eval(x).iter().all(|v| *v >= -1e-14));
    }

    #[test]
    fn matches_cox_de_boor(lo in -10.0..10.0f64, width in 0.1..20.0f64, q in 4usize..25, order in 2usize..6, u in 0.0..=1.0f64) {
        prop_assume!(q >= order);
        let b = basis_from(lo, width, q, order);
        let x = lo + u * width;
        let fast = b.eval(x);
        for (i, f) in fast.iter().enumerate() {
            let slow = cox_de_boor(&b.knots, i, order, x, b.upper());
            prop_assert!((f - slow).abs() < 1e-12, "i={} fast={} slow={}", i, f, slow);
        }
    }

    #[test]
    fn monotone_map_is_nondecreasing(raw in prop::collection::vec(-40.0..40.0f64, 1..30)) {
        let g = monotone_map(&raw);
        prop_assert_eq!(g[0], raw[0]);
        prop_assert!(g.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn validate_is_idempotent(ys in prop::collection::vec(prop::option::of(-5.0..5.0f64), 1..40)) {
        let rows: Vec<FirmYear> = ys
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let mut r = FirmYear::new(format!("f{}", i % 7), (i / 7) as i32, y.unwrap_or(f64::NAN), 0.1 * i as f64, 1.0);
                r.m = y.map(|v| v * 0.5);
                r
            })
            .collect();
        let panel = Panel::new(rows).unwrap();
        let req = [Field::Y, Field::L, Field::K, Field::M];
        if let Ok((once, _)) = validate_panel(&panel, &req) {
            let (twice, report) = validate_panel(&once, &req).unwrap();
            prop_assert_eq!(report.total(), 0);
            prop_assert_eq!(once.rows(), twice.rows());
        }
    }

    #[test]
    fn join_lead_pairs_same_firm_at_horizon(years in prop::collection::vec(prop::collection::btree_set(0i32..12, 1..8), 1..6), h in 1i32..4) {
        let mut rows = Vec::new();
        for (f, ys) in years.iter().enumerate() {
            for &y in ys {
                rows.push(FirmYear::new(format!("f{f}"), y, 0.0, 0.0, 0.0));
            }
        }
        let panel = Panel::new(rows).unwrap();
        let pairs = join_lead(&panel, h);
        let expected: usize = years.iter().map(|ys| ys.iter().filter(|y| ys.contains(&(**y + h))).count()).sum();
        prop_assert_eq!(pairs.len(), expected);
        for (a, b) in pairs {
            prop_assert_eq!(&a.firm_id, &b.firm_id);
            prop_assert_eq!(b.year - a.year, h);
        }
    }

    #[test]
    fn belief_fit_is_permutation_and_scale_invariant(mu in 0.0..10.0f64, sd in 0.05..1.0f64, c in -3.0..3.0f64, perm in Just([3usize, 0, 4, 1, 2])) {
        let r = synthetic_response(mu, sd * sd);
        let base = fit_belief(&r).unwrap();
        let shuffled = ScenarioResponse {
            values: perm.map(|i| r.values[i]),
            likelihoods: perm.map(|i| r.likelihoods[i]),
        };
        let p = fit_belief(&shuffled).unwrap();
        prop_assert!((p.mu - base.mu).abs() < 1e-9 && (p.sigma2 - base.sigma2).abs() < 1e-9);
        let scaled = ScenarioResponse { values: r.values.map(|v| v * c.exp()), likelihoods: r.likelihoods };
        let s = fit_belief(&scaled).unwrap();
        prop_assert!((s.mu - base.mu - c).abs() < 1e-7);
        prop_assert!((s.sigma2 - base.sigma2).abs() < 1e-7);
    }
}

#[test]
fn psi_hat_is_monotone_on_a_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 400;
    let z: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 0.5 * x1[i] + z[i].tanh() + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let x = npr_core::linalg::hstack(&[&ones(n), &npr_core::linalg::column(&x1)]);
    let fit = fit_scam(&y, &x, &z, Lambda::Auto, &ScamOptions::default()).unwrap();
    let grid: Vec<f64> = (0..=1000).map(|i| -2.5 + 5.0 * i as f64 / 1000.0).collect();
    let psi = fit.smooth.eval_many(&grid);
    assert!(psi.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    assert!((fit.beta[1] - 0.5).abs() < 0.1);
}

#[test]
fn belief_round_trip_over_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let mu = rng.random_range(0.0..10.0);
        let sd: f64 = rng.random_range(0.05..1.0);
        let fit = fit_belief(&synthetic_response(mu, sd * sd)).unwrap();
        assert!((fit.mu - mu).abs() < 1e-3, "mu {mu} -> {}", fit.mu);
        assert!(
            (fit.sigma2 - sd * sd).abs() < 1e-3,
            "sigma2 {} -> {}",
            sd * sd,
            fit.sigma2
        );
    }
}

#[test]
fn belief_example_lognormal_two_point_three() {
    let fit = fit_belief(&synthetic_response(2.0, 0.09)).unwrap();
    assert!((fit.mu - 2.0).abs() < 1e-3);
    assert!((fit.sigma2 - 0.09).abs() < 1e-3);
}

#[test]
fn comonotone_copula_matches_closed_form() {
    // Equal sigmas and perfect correlation: ln(T - M) = mu_t + s z + ln(1 - e^(mu_m - mu_t)).
    let (mt, mm, s2) = (5.0, 4.0, 0.04);
    let va = expected_log_value_added((mt, s2), (mm, s2), 1.0 - 1e-12, 200_000, 3).unwrap();
    let exact = mt + (1.0 - (mm - mt).exp()).ln();
    assert!((va.e_log_va - exact).abs() < 2e-3, "{} vs {exact}", va.e_log_va);
    assert_eq!(va.share_defined, 1.0);
}

#[test]
fn independent_copula_has_partial_support() {
    let va = expected_log_value_added((1.0, 1.0), (1.0, 1.0), 0.0, 100_000, 4).unwrap();
    assert!((va.share_defined - 0.5).abs() < 0.01);
}

/// Brute force `E_t[y_{t+1}]` from the model primitives, antithetic in every shock.
fn brute_expected_log_output(k_next: f64, omega: f64, cfg: &DgpConfig, draws: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let sx = cfg.sigma_xi();
    let mut acc = 0.0;
    for _ in 0..draws / 2 {
        let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        for sign in [1.0, -1.0] {
            let omega_next = cfg.rho * omega + sign * sx * z[0];
            let l = optimal_labor(k_next.exp(), omega_next, cfg).ln() + sign * cfg.opt_err.l * z[1];
            let shortfall = (sign * cfg.opt_err.m * z[2]).min(0.0);
            let eps = sign * cfg.sigma_eps * z[3];
            acc += cfg.beta0.ln() + cfg.beta_k * k_next + cfg.beta_l * l + omega_next + shortfall + eps;
        }
    }
    acc / draws as f64
}

#[test]
fn expected_log_output_matches_brute_force() {
    for (m, k, w) in [(0.0, 2.0, 0.1), (0.185, 1.0, -0.3), (0.5, 3.0, 0.4)] {
        let cfg = DgpConfig {
            opt_err: OptErr { l: 0.37, i: 0.0, m },
            ..DgpConfig::default()
        };
        let exact = expected_log_output(k, w, &cfg);
        let brute = brute_expected_log_output(k, w, &cfg, 1_000_000);
        assert!((exact - brute).abs() < 1e-3, "m={m}: {exact} vs {brute}");
    }
}
