use amp_core::data::validate_dataset;
use amp_core::indices::ScoreKind;
use amp_core::rdd::{fit_pooled, RddSpec};
use amp_core::synth::{generate, generate_panel, perturb, Perturbation, SynthSpec};

#[test]
fn noiseless_panel_is_recovered_exactly() {
    let spec = SynthSpec {
        n_bidders: 8,
        n_hours: 400,
        noise_sd: 0.0,
        ..SynthSpec::default()
    };
    let (rows, truth) = generate_panel(&spec).unwrap();
    for r in &rows {
        assert!((r.p_max - truth.mean_bid(r)).abs() < 1e-9);
    }
    let fit = fit_pooled(&rows, &RddSpec::default()).unwrap();
    let expected = [
        ("treat", spec.tau),
        ("score", spec.beta_score),
        ("score_x_treat", spec.beta_score_treat),
        ("ref", spec.beta_ref),
        ("gas", spec.beta_gas),
    ];
    for (name, value) in expected {
        let got = fit.coefficient(name).unwrap().estimate;
        assert!((got - value).abs() < 1e-8, "{name}: {got} vs {value}");
    }
}

#[test]
fn treated_share_converges_to_mixture_mass() {
    let spec = SynthSpec {
        n_hours: 10_000,
        ..SynthSpec::default()
    };
    let (_, truth) = generate_panel(&spec).unwrap();
    let p = spec.analytic_treated_share();
    let hours = spec.n_hours as f64;
    // equal shares: every bidder in an hour shares the treatment status
    let tol = 4.0 * (p * (1.0 - p) / hours).sqrt();
    assert!((truth.treated_share() - p).abs() < tol, "{} vs {p}", truth.treated_share());
    assert!((p - 0.12).abs() < 0.02, "{p}");
}

#[test]
fn congestion_panels_validate() {
    let spec = SynthSpec {
        n_bidders: 5,
        n_hours: 300,
        score_kind: ScoreKind::Congestion,
        ..SynthSpec::default()
    };
    let (ds, truth) = generate(&spec).unwrap();
    assert!(validate_dataset(&ds).is_empty());
    let p = spec.analytic_treated_share();
    assert!((truth.treated_share() - p).abs() < 4.0 * (p * (1.0 - p) / 300.0).sqrt());
}

#[test]
fn calm_is_identity() {
    let spec = SynthSpec {
        n_bidders: 3,
        n_hours: 24,
        ..SynthSpec::default()
    };
    let (ds, _) = generate(&spec).unwrap();
    assert_eq!(perturb(&ds, &Perturbation::Calm), ds);
}
