mod common;

use amp_core::data::{BidderId, Hour, UnitId};
use amp_core::rdd::{fit_pooled, select_bandwidth, Covariance, ObservationRow, PolyOrder, RddSpec};
use common::{design, ols, random_panel};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn no_fe(cov: Covariance) -> RddSpec {
    RddSpec {
        fixed_effects: false,
        covariance: cov,
        ..RddSpec::default()
    }
}

#[test]
fn singleton_clusters_reduce_to_hc1() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let rows: Vec<ObservationRow> = (0..50)
        .map(|i| {
            let s: f64 = rng.random_range(-1.0..1.0);
            ObservationRow {
                hour: Hour::from_epoch_hours(i),
                bidder_id: BidderId::new(format!("B{i:02}")),
                unit_id: UnitId::new(format!("B{i:02}-U1")),
                p_max: rng.random_range(0.0..100.0),
                score: 1.0 - s,
                centered: s,
                treated: s >= 0.0,
                reference: rng.random_range(20.0..60.0),
                gas: rng.random_range(1.0..5.0),
            }
        })
        .collect();
    let cr1 = fit_pooled(&rows, &no_fe(Covariance::ClusterBidder)).unwrap();
    let hc1 = fit_pooled(&rows, &no_fe(Covariance::Hc1)).unwrap();
    for (a, b) in cr1.std_errors.iter().zip(&hc1.std_errors) {
        assert!((a - b).abs() <= 1e-10 * b.max(1.0), "{a} vs {b}");
    }
}

#[test]
fn noiseless_quadratic_recovers_tau() {
    let rows = random_panel(3, 5, 80, -5.0, 0.0);
    let spec = RddSpec {
        order: PolyOrder::Quadratic,
        ..RddSpec::default()
    };
    let fit = fit_pooled(&rows, &spec).unwrap();
    assert!((fit.treatment().estimate + 5.0).abs() < 1e-8);
    assert!(fit.coefficient("score2").unwrap().estimate.abs() < 1e-8);
}

#[test]
fn retained_share_of_bandwidth() {
    let centered: Vec<f64> = (0..1000).map(|i| (i as f64 - 500.0) / 500.0).collect();
    let h = select_bandwidth(&centered, 0.3).unwrap();
    let kept = centered.iter().filter(|s| s.abs() <= h).count();
    assert!((300..=302).contains(&kept), "{kept}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pooled_fit_matches_normal_equations(seed in 0u64..10_000, g in 3usize..8, per in 15usize..60) {
        let rows = random_panel(seed, g, per, -5.0, 2.0);
        let fit = fit_pooled(&rows, &RddSpec::default()).unwrap();
        let (x, y, ids) = design(&rows, true);
        let o = ols(x, y, Some(&ids));
        for j in 0..5 {
            prop_assert!(close(fit.coefficients[j], o.beta[j], 1e-8), "beta {} {} {}", j, fit.coefficients[j], o.beta[j]);
            prop_assert!(close(fit.std_errors[j], o.se[j], 1e-7), "se {} {} {}", j, fit.std_errors[j], o.se[j]);
        }
    }

    #[test]
    fn intercept_fit_matches_normal_equations(seed in 0u64..10_000, g in 3usize..8) {
        let rows = random_panel(seed, g, 40, 1.0, 2.0);
        let (x, y, ids) = design(&rows, false);
        let cr1 = ols(x.clone(), y.clone(), Some(&ids));
        let hc1 = ols(x, y, None);
        let f1 = fit_pooled(&rows, &no_fe(Covariance::ClusterBidder)).unwrap();
        let f2 = fit_pooled(&rows, &no_fe(Covariance::Hc1)).unwrap();
        for j in 0..6 {
            prop_assert!(close(f1.coefficients[j], cr1.beta[j], 1e-8));
            prop_assert!(close(f1.std_errors[j], cr1.se[j], 1e-7));
            prop_assert!(close(f2.std_errors[j], hc1.se[j], 1e-7));
        }
    }

    #[test]
    fn residuals_are_orthogonal(seed in 0u64..10_000) {
        let rows = random_panel(seed, 4, 50, -3.0, 4.0);
        let fit = fit_pooled(&rows, &RddSpec::default()).unwrap();
        let (x, y, _) = design(&rows, true);
        let beta = DVector::from_vec(fit.coefficients.clone());
        let r = &y - &x * beta;
        let xtr = x.transpose() * &r;
        let scale = x.norm() * y.norm();
        prop_assert!(xtr.amax() <= 1e-9 * scale);
    }

    #[test]
    fn bidder_constants_are_absorbed(seed in 0u64..10_000, shift in -50.0..50.0f64) {
        let rows = random_panel(seed, 5, 40, -5.0, 3.0);
        let mut moved = rows.clone();
        for r in &mut moved {
            let b: f64 = r.bidder_id.as_str()[1..].parse().unwrap();
            r.p_max += shift * (b + 1.0);
        }
        let a = fit_pooled(&rows, &RddSpec::default()).unwrap();
        let b = fit_pooled(&moved, &RddSpec::default()).unwrap();
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            prop_assert!(close(*x, *y, 1e-8));
        }
    }

    #[test]
    fn row_order_does_not_matter(seed in 0u64..10_000, rot in 0usize..200) {
        let rows = random_panel(seed, 4, 50, -5.0, 3.0);
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.rotate_left(rot % rows.len());
        let a = fit_pooled(&rows, &RddSpec::with_bandwidth(0.6)).unwrap();
        let b = fit_pooled(&shuffled, &RddSpec::with_bandwidth(0.6)).unwrap();
        prop_assert_eq!(a.coefficients, b.coefficients);
        prop_assert_eq!(a.std_errors, b.std_errors);
    }

    #[test]
    fn fuzzy_collapses_to_sharp_far_from_cutoff(seed in 0u64..10_000, sigma in 0.001..0.05f64) {
        let rows: Vec<ObservationRow> = random_panel(seed, 4, 80, -5.0, 2.0)
            .into_iter()
            .filter(|r| r.centered.abs() > 10.0 * sigma)
            .collect();
        let sharp = fit_pooled(&rows, &RddSpec::default()).unwrap();
        let fuzzy = fit_pooled(&rows, &RddSpec { fuzzy: Some(sigma), ..RddSpec::default() }).unwrap();
        for (a, b) in sharp.coefficients.iter().zip(&fuzzy.coefficients) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn noiseless_recovery(seed in 0u64..10_000, tau in -20.0..20.0f64) {
        let rows = random_panel(seed, 5, 40, tau, 0.0);
        let fit = fit_pooled(&rows, &RddSpec::default()).unwrap();
        let expected = [tau, 3.0, -2.0, 0.8, 1.5];
        for (b, e) in fit.coefficients.iter().zip(expected) {
            prop_assert!((b - e).abs() < 1e-8, "{} vs {}", b, e);
        }
    }
}

#[test]
fn per_bidder_fits_match_single_bidder_ols() {
    use amp_core::exec::Execution;
    use amp_core::rdd::{fit_per_bidder, ExclusionRule};
    let rows = random_panel(11, 3, 150, -4.0, 2.0);
    let report = fit_per_bidder(
        &rows,
        &RddSpec::default(),
        &ExclusionRule::default(),
        Execution::Sequential,
    )
    .unwrap();
    assert_eq!(report.fits.len(), 3);
    for (b, fit) in &report.fits {
        let mine: Vec<ObservationRow> = rows.iter().filter(|r| &r.bidder_id == b).cloned().collect();
        let (x, y, _) = design(&mine, false);
        let o = ols(x, y, None);
        for j in 0..6 {
            assert!(close(fit.coefficients[j], o.beta[j], 1e-8));
            assert!(close(fit.std_errors[j], o.se[j], 1e-7));
        }
    }
}
