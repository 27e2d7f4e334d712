mod common;

use amp_core::data::{read_offers, validate_dataset, write_offers, Dataset, FindingKind, Hour, MarketHourRecord};
use amp_core::synth::{generate, SynthSpec};
use common::block;
use proptest::prelude::*;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        n_bidders: 3,
        units_per_bidder: 2,
        n_hours: 12,
        ..SynthSpec::default()
    }
}

#[test]
fn findings_for_broken_stacks() {
    let offers = vec![
        block(0, "U1", "B1", 1, 50.0, 5.0),
        block(0, "U1", "B1", 2, 40.0, 5.0),
        block(1, "U2", "B2", 1, 10.0, -1.0),
    ];
    let market = vec![MarketHourRecord::new(Hour::from_epoch_hours(0), 100.0, 5.0, 3.0)];
    let kinds: Vec<FindingKind> = validate_dataset(&Dataset::new(offers, market, 10))
        .into_iter()
        .map(|f| f.kind)
        .collect();
    assert!(kinds.contains(&FindingKind::NonMonotoneSteps));
    assert!(kinds.contains(&FindingKind::InvalidQuantity));
    assert!(kinds.contains(&FindingKind::MissingMarketHour));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn offers_round_trip(seed in 0u64..1000) {
        let (ds, _) = generate(&small_spec(seed)).unwrap();
        let mut buf = Vec::new();
        write_offers(&mut buf, ds.offers()).unwrap();
        let back = read_offers(buf.as_slice(), ds.segment_cap()).unwrap();
        prop_assert_eq!(back.as_slice(), ds.offers());
    }

    #[test]
    fn row_order_is_irrelevant(seed in 0u64..1000, rot in 0usize..500) {
        let (ds, _) = generate(&small_spec(seed)).unwrap();
        let mut offers = ds.offers().to_vec();
        offers.reverse();
        let r = rot % offers.len();
        offers.rotate_left(r);
        let mut market = ds.market().to_vec();
        market.reverse();
        let again = Dataset::new(offers, market, ds.segment_cap());
        prop_assert_eq!(again, ds);
    }
}
