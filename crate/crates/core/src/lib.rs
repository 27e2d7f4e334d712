//! Automated market power mitigation in wholesale electricity auctions:
//! screening, merit-order clearing, counterfactual scenarios, synthetic bid
//! panels and regression discontinuity estimation of bidder responses.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clearing;
pub mod data;
pub mod exec;
pub mod indices;
pub mod numeric;
pub mod rdd;
pub mod reference;
pub mod scenario;
pub mod screening;
pub mod synth;
