mod common;

use amp_core::data::{AreaId, AreaRecord, Hour, UnitId};
use amp_core::indices::{congestion_index, congestion_series, market_rsi_series, rsi, MustTakeRule};
use amp_core::synth::{generate, perturb, Perturbation, SynthSpec};
use proptest::prelude::*;

#[test]
fn rsi_hand_values() {
    assert!((rsi(1200.0, 300.0, 800.0, 100.0).unwrap() - 1.0).abs() < 1e-12);
    assert!((rsi(1000.0, 400.0, 900.0, 100.0).unwrap() - 0.6).abs() < 1e-12);
    assert!(rsi(1000.0, 400.0, 0.0, 0.0).is_err());
}

#[test]
fn withholding_lowers_rivals_rsi() {
    let spec = SynthSpec {
        n_bidders: 4,
        n_hours: 6,
        ..SynthSpec::default()
    };
    let (ds, _) = generate(&spec).unwrap();
    let h = Hour::from_epoch_hours(spec.start + 3);
    let withheld = perturb(
        &ds,
        &Perturbation::Withhold {
            hours: vec![h],
            units: vec![UnitId::from("B001-U1")],
        },
    );
    let before = market_rsi_series(&ds, MustTakeRule::MaxOutput).unwrap();
    let after = market_rsi_series(&withheld, MustTakeRule::MaxOutput).unwrap();
    for (a, b) in before.at_hour(h).iter().zip(after.at_hour(h)) {
        if a.bidder_id.as_ref().unwrap().as_str() != "B001" {
            assert!(b.value < a.value);
        }
    }
}

fn areas() -> impl Strategy<Value = Vec<(f64, f64, bool)>> {
    prop::collection::vec((1.0..1000.0f64, -50.0..200.0f64, prop::bool::weighted(0.2)), 1..8)
        .prop_filter("needs an included area", |v| v.iter().any(|a| !a.2))
}

proptest! {
    #[test]
    fn rsi_falls_with_firm_supply(m in 100.0..1e4f64, f1 in 0.0..1.0f64, f2 in 0.0..1.0f64, l in 10.0..1e4f64) {
        let (lo, hi) = if f1 < f2 { (f1, f2) } else { (f2, f1) };
        prop_assert!(rsi(m, hi * m, l, 0.1 * l).unwrap() <= rsi(m, lo * m, l, 0.1 * l).unwrap());
    }

    #[test]
    fn congestion_is_load_weighted(a in areas()) {
        let recs: Vec<AreaRecord> = a
            .iter()
            .enumerate()
            .map(|(i, &(load, shadow, ex))| AreaRecord {
                area_id: AreaId::new(format!("A{i}")),
                load,
                shadow_price: shadow,
                is_excluded: ex,
            })
            .collect();
        let (num, den) = a.iter().filter(|x| !x.2).fold((0.0, 0.0), |(n, d), x| (n + x.0 * x.1, d + x.0));
        let got = congestion_index(&recs).unwrap();
        prop_assert!((got - num / den).abs() <= 1e-9 * (num / den).abs().max(1.0));
    }
}

#[test]
fn congestion_uses_previous_hour() {
    let spec = SynthSpec {
        n_bidders: 2,
        n_hours: 5,
        score_kind: amp_core::indices::ScoreKind::Congestion,
        ..SynthSpec::default()
    };
    let (ds, truth) = generate(&spec).unwrap();
    let s = congestion_series(&ds).unwrap();
    assert_eq!(s.points.len(), 4);
    for p in &s.points {
        let drawn = truth.hour_draws.iter().find(|d| d.0 == p.hour).unwrap().1;
        assert!((p.value - drawn).abs() < 1e-12);
    }
}
