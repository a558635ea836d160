use attrition_pqr::dgp::{generate_replication, DesignConfig, DesignId};
use attrition_pqr::propensity::{build_first_stage, fit_logit, inverse_weights, Mechanism, PropensityOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn logit_is_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gamma = [0.4, -1.2, 0.7];
    let n = 20_000;
    let mut x = Vec::with_capacity(n * 3);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row = [1.0, rng.random_range(-2.0..2.0), f64::from(rng.random_bool(0.3))];
        let eta: f64 = row.iter().zip(gamma).map(|(a, b)| a * b).sum();
        y.push(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()));
        x.extend(row);
    }
    let fit = fit_logit(&x, 3, &y).unwrap();
    for (g, truth) in fit.gamma.iter().zip(gamma) {
        assert!((g - truth).abs() < 0.1, "{:?}", fit.gamma);
    }
}

#[test]
fn mar_weights_are_valid_on_attrited_designs() {
    for id in [DesignId::D1b, DesignId::D3, DesignId::D5] {
        let cfg = DesignConfig::preset(id, 200, 5, 9).unwrap();
        let g = generate_replication(&cfg, 0).unwrap();
        let ds = &g.dataset;
        let fit = build_first_stage(ds, Mechanism::Mar, &PropensityOptions::default()).unwrap();
        let w = inverse_weights(&fit, ds).unwrap();
        for i in 0..ds.n_subjects() {
            for t in 0..ds.n_periods() {
                let wt = w[i * ds.n_periods() + t];
                if ds.observed(i, t) {
                    assert!(wt >= 1.0 && wt <= 1.0 / fit.floor + 1e-9, "{id} ({i},{t}) weight {wt}");
                } else {
                    assert_eq!(wt, 0.0);
                }
            }
            assert_eq!(w[i * ds.n_periods()], 1.0);
        }
    }
}

#[test]
fn weighted_counts_track_the_full_panel() {
    // Inverse-probability weights should restore roughly N observations per period.
    let cfg = DesignConfig::preset(DesignId::D1b, 2000, 5, 4).unwrap();
    let g = generate_replication(&cfg, 0).unwrap();
    let ds = &g.dataset;
    let fit = build_first_stage(ds, Mechanism::Mar, &PropensityOptions::default()).unwrap();
    let w = inverse_weights(&fit, ds).unwrap();
    for t in 1..5 {
        let total: f64 = (0..2000).map(|i| w[i * 5 + t]).sum();
        assert!((total / 2000.0 - 1.0).abs() < 0.06, "period {t}: {total}");
    }
}
