use npr_core::baselines::{lp_fit, ols_levels, ProxyConfig};
use npr_core::datamodel::{write_panel_csv, ProductionSpec};
use npr_core::linalg::correlation;
use npr_core::mcsim::{
    capital_between_share, r2_k_on_l, run_replications, simulate, DgpConfig, EstimatorKind, OptErr, ReplicationOptions,
    Scenario,
};
use npr_core::tfp::{outcome_regression, tfp_residuals, Outcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn default_calibration() {
    let sim = simulate(&DgpConfig::default()).unwrap();
    let share = capital_between_share(&sim.panel);
    let r2 = r2_k_on_l(&sim.panel);
    assert!((share - 0.95).abs() <= 0.05, "between share {share}");
    assert!((r2 - 0.5).abs() <= 0.1, "r2 {r2}");
}

#[test]
fn same_seed_gives_identical_bytes() {
    let cfg = DgpConfig {
        n_firms: 50,
        seed: 1,
        ..DgpConfig::scenario(Scenario::Lim)
    };
    let bytes = || {
        let mut buf = Vec::new();
        write_panel_csv(&simulate(&cfg).unwrap().panel, &mut buf).unwrap();
        buf
    };
    assert_eq!(bytes(), bytes());
}

#[test]
fn replications_do_not_depend_on_thread_count() {
    let cfg = DgpConfig {
        n_firms: 200,
        n_keep: 5,
        seed: 8,
        ..DgpConfig::default()
    };
    let opts = ReplicationOptions {
        runs: 4,
        estimators: vec![EstimatorKind::Ols, EstimatorKind::Lp, EstimatorKind::Acf],
        ..ReplicationOptions::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_replications(&cfg, &opts).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn zero_runs_is_an_error() {
    let opts = ReplicationOptions {
        runs: 0,
        ..ReplicationOptions::default()
    };
    assert!(run_replications(&DgpConfig::default(), &opts).is_err());
}

#[test]
fn ols_is_biased_up_and_lp_is_not() {
    let cfg = DgpConfig {
        seed: 2,
        ..DgpConfig::default()
    };
    let sim = simulate(&cfg).unwrap();
    let ols = ols_levels(&sim.panel).unwrap();
    let lp = lp_fit(&sim.panel, &ProxyConfig::default()).unwrap();
    assert!(ols.spec.beta_l > 0.85, "{:?}", ols.spec);
    assert!((lp.spec.beta_l - 0.6).abs() < 0.03, "{:?}", lp.spec);
}

#[test]
fn tfp_at_true_coefficients_tracks_productivity() {
    let cfg = DgpConfig {
        opt_err: OptErr {
            l: 0.37,
            i: 0.0,
            m: 0.0,
        },
        sigma_eps: 0.0,
        n_firms: 300,
        ..DgpConfig::default()
    };
    let sim = simulate(&cfg).unwrap();
    let rows = tfp_residuals(&sim.panel, &ProductionSpec::cobb_douglas(0.6, 0.4)).unwrap();
    let tfp: Vec<f64> = rows.iter().map(|r| r.tfp).collect();
    let omega: Vec<f64> = sim.truth.iter().map(|t| t.omega).collect();
    assert!(correlation(&tfp, &omega) > 0.999);
}

#[test]
fn planted_outcome_effect_is_recovered() {
    let sim = simulate(&DgpConfig {
        n_firms: 500,
        ..DgpConfig::default()
    })
    .unwrap();
    let mut rows = tfp_residuals(&sim.panel, &ProductionSpec::cobb_douglas(0.6, 0.4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for r in &mut rows {
        r.growth_1_2 = Some(0.02 * r.tfp + 0.05 * rng.sample::<f64, _>(StandardNormal));
    }
    let fit = outcome_regression(&rows, Outcome::Growth12).unwrap();
    assert!((fit.pi_hat - 0.02).abs() < 3.0 * fit.se, "{} +- {}", fit.pi_hat, fit.se);
    assert_eq!(fit.n, rows.len());
}

#[test]
fn exit_regression_on_unbalanced_panel() {
    let sim = simulate(&DgpConfig {
        n_firms: 400,
        ..DgpConfig::default()
    })
    .unwrap();
    let rows = tfp_residuals(&sim.panel, &ProductionSpec::cobb_douglas(0.6, 0.4)).unwrap();
    // A random half of firms leave before the final year.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut kept = Vec::new();
    for r in sim.panel.rows() {
        let drop = r.year == 10 && rng.random_bool(0.5);
        if !drop {
            kept.push(r.clone());
        }
    }
    let panel = npr_core::datamodel::Panel::new(kept).unwrap();
    let rows2 = tfp_residuals(&panel, &ProductionSpec::cobb_douglas(0.6, 0.4)).unwrap();
    let fit = outcome_regression(&rows2, Outcome::Exit).unwrap();
    assert!(fit.outcome_mean > 0.0 && fit.outcome_mean < 1.0);
    assert!(fit.pi_hat.abs() < 4.0 * fit.se + 1e-12);
    assert!(outcome_regression(&rows, Outcome::Exit).is_err());
}
