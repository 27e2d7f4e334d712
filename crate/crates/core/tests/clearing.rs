mod common;

use amp_core::clearing::{clear, clear_ilp_oracle, ClearingError};
use common::stack;
use proptest::prelude::*;

#[test]
fn oracle_picks_cheapest_pair() {
    let offers = stack(&[(1.0, 1.0), (2.0, 1.0), (3.0, 1.0)]);
    let r = clear_ilp_oracle(&offers, 2.0).unwrap();
    assert_eq!(r.total_cost, 3.0);
    assert_eq!(r.clearing_price, 2.0);
    assert_eq!(r.acceptance_set().len(), 2);
}

#[test]
fn indivisibility_gap() {
    let offers = stack(&[(10.0, 10.0), (11.0, 10.0)]);
    let ilp = clear_ilp_oracle(&offers, 11.0).unwrap();
    let greedy = clear(&offers, 11.0).unwrap();
    assert_eq!(ilp.total_cost, 210.0);
    assert_eq!(greedy.total_cost, 111.0);
    assert_eq!(greedy.clearing_price, 11.0);
}

#[test]
fn exact_fit_segment() {
    let offers = stack(&[(5.0, 7.0), (9.0, 3.0)]);
    let r = clear_ilp_oracle(&offers, 7.0).unwrap();
    assert_eq!(r.total_cost, 35.0);
    assert_eq!(r.clearing_price, 5.0);
}

#[test]
fn negative_blocks_break_the_cost_bound() {
    let offers = stack(&[(-14.0, 0.5)]);
    let g = clear(&offers, 0.005).unwrap();
    let o = clear_ilp_oracle(&offers, 0.005).unwrap();
    assert!(g.total_cost > o.total_cost);
    assert_eq!(o.accepted_mw(), 0.5);
}

#[test]
fn short_supply_errors() {
    let offers = stack(&[(5.0, 7.0)]);
    assert!(matches!(clear(&offers, 8.0), Err(ClearingError::InsufficientSupply { .. })));
    assert!(matches!(
        clear_ilp_oracle(&offers, 8.0),
        Err(ClearingError::InsufficientSupply { .. })
    ));
    assert!(matches!(clear(&offers, 0.0), Err(ClearingError::InvalidLoad(_))));
}

// Prices stay in the economic band. Below zero the oracle's `>=` constraint
// absorbs every negative block and greedy can cost more.
fn general_stack() -> impl Strategy<Value = (Vec<(f64, f64)>, f64)> {
    prop::collection::vec((0.0..300.0f64, 0.5..50.0f64), 1..=14).prop_flat_map(|blocks| {
        let total: f64 = blocks.iter().map(|b| b.1).sum();
        (Just(blocks), 0.01..=1.0f64).prop_map(move |(b, f)| (b, f * total))
    })
}

fn equal_stack() -> impl Strategy<Value = (Vec<(f64, f64)>, f64)> {
    (1usize..=20, 1.0..40.0f64)
        .prop_flat_map(|(n, q)| (prop::collection::vec(1u32..60, n), Just(q), 0.001..=1.0f64))
        .prop_map(|(prices, q, f)| {
            let blocks: Vec<(f64, f64)> = prices.iter().map(|&p| (p as f64, q)).collect();
            let load = f * q * blocks.len() as f64;
            (blocks, load)
        })
}

proptest! {
    #[test]
    fn greedy_never_costs_more((blocks, load) in general_stack()) {
        let offers = stack(&blocks);
        let g = clear(&offers, load).unwrap();
        let o = clear_ilp_oracle(&offers, load).unwrap();
        prop_assert!(g.total_cost <= o.total_cost + 1e-9 * o.total_cost.abs().max(1.0));
    }

    #[test]
    fn equal_quantities_match_oracle((blocks, load) in equal_stack()) {
        let offers = stack(&blocks);
        let g = clear(&offers, load).unwrap();
        let o = clear_ilp_oracle(&offers, load).unwrap();
        prop_assert_eq!(g.acceptance_set(), o.acceptance_set());
        prop_assert_eq!(g.clearing_price, o.clearing_price);
    }

    #[test]
    fn price_rises_with_load((blocks, load) in general_stack(), bump in 0.0..1.0f64) {
        let offers = stack(&blocks);
        let total: f64 = blocks.iter().map(|b| b.1).sum();
        let higher = load + bump * (total - load);
        let lo = clear(&offers, load).unwrap();
        let hi = clear(&offers, higher).unwrap();
        prop_assert!(lo.clearing_price <= hi.clearing_price);
    }

    #[test]
    fn dispatch_is_order_free((blocks, load) in general_stack(), rot in 0usize..14) {
        let offers = stack(&blocks);
        let mut shuffled = offers.clone();
        let rot = rot % shuffled.len();
        shuffled.rotate_left(rot);
        prop_assert_eq!(clear(&offers, load).unwrap(), clear(&shuffled, load).unwrap());
    }
}
