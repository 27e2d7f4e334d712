//! Uniform-price merit-order clearing of one hour's incremental offers, and
//! an exact branch-and-bound solver for the indivisible-block formulation.

use std::fmt;
use std::io::Write;

use crate::data::{Hour, IncrementalOffer, OfferStatus, UnitId};

/// Largest stack the exact solver accepts.
pub const ORACLE_MAX_SEGMENTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub unit_id: UnitId,
    pub segment: u8,
    /// $/MWh
    pub price: f64,
    /// MW accepted
    pub mw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClearingResult {
    pub hour: Hour,
    /// $/MWh; NaN when infeasible.
    pub clearing_price: f64,
    /// Accepted blocks in merit order.
    pub dispatched: Vec<Dispatch>,
    /// $
    pub total_cost: f64,
    pub feasible: bool,
}

impl ClearingResult {
    /// Placeholder for an hour that could not be cleared.
    pub fn infeasible(hour: Hour) -> Self {
        ClearingResult {
            hour,
            clearing_price: f64::NAN,
            dispatched: Vec::new(),
            total_cost: f64::NAN,
            feasible: false,
        }
    }

    pub fn accepted_mw(&self) -> f64 {
        self.dispatched.iter().map(|d| d.mw).sum()
    }

    /// `(unit, segment)` keys of accepted blocks, sorted.
    pub fn acceptance_set(&self) -> Vec<(UnitId, u8)> {
        let mut keys: Vec<_> = self
            .dispatched
            .iter()
            .filter(|d| d.mw > 0.0)
            .map(|d| (d.unit_id.clone(), d.segment))
            .collect();
        keys.sort();
        keys
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClearingError {
    EmptyStack,
    InvalidLoad(f64),
    InsufficientSupply { hour: Hour, supply: f64, load: f64 },
    TooManySegments(usize),
}

impl fmt::Display for ClearingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClearingError::EmptyStack => write!(f, "no available offers to clear"),
            ClearingError::InvalidLoad(l) => write!(f, "load must be positive and finite, got {l}"),
            ClearingError::InsufficientSupply { hour, supply, load } => {
                write!(f, "{hour}: offered {supply} MW cannot cover load {load} MWh")
            }
            ClearingError::TooManySegments(n) => {
                write!(f, "exact solver limited to {ORACLE_MAX_SEGMENTS} segments, got {n}")
            }
        }
    }
}

impl std::error::Error for ClearingError {}

fn covered(remaining: f64, load: f64) -> bool {
    remaining <= 1e-9 * load.max(1.0)
}

/// Available segments in dispatch order: price ascending, then unit id, then
/// segment index.
pub fn merit_order(offers: &[IncrementalOffer]) -> Vec<&IncrementalOffer> {
    let mut stack: Vec<&IncrementalOffer> = offers
        .iter()
        .filter(|o| o.status != OfferStatus::Unavailable)
        .collect();
    stack.sort_by(|a, b| {
        a.price
            .total_cmp(&b.price)
            .then_with(|| a.unit_id.cmp(&b.unit_id))
            .then_with(|| a.segment.cmp(&b.segment))
    });
    stack
}

fn check_inputs(offers: &[IncrementalOffer], load: f64) -> Result<(Hour, Vec<&IncrementalOffer>), ClearingError> {
    if !(load > 0.0) || !load.is_finite() {
        return Err(ClearingError::InvalidLoad(load));
    }
    let stack = merit_order(offers);
    let Some(first) = stack.first() else {
        return Err(ClearingError::EmptyStack);
    };
    let hour = first.hour;
    let supply: f64 = stack.iter().map(|o| o.quantity).sum();
    if supply < load && !covered(load - supply, load) {
        return Err(ClearingError::InsufficientSupply { hour, supply, load });
    }
    Ok((hour, stack))
}

/// Merit-order clearing with a divisible marginal block. The clearing price is
/// the price of the last block (partially) accepted.
pub fn clear(offers: &[IncrementalOffer], load: f64) -> Result<ClearingResult, ClearingError> {
    let (hour, stack) = check_inputs(offers, load)?;
    let mut remaining = load;
    let mut dispatched = Vec::new();
    let mut total_cost = 0.0;
    for o in stack {
        if covered(remaining, load) {
            break;
        }
        if o.quantity <= 0.0 {
            continue;
        }
        let mw = o.quantity.min(remaining);
        remaining -= mw;
        total_cost += mw * o.price;
        dispatched.push(Dispatch {
            unit_id: o.unit_id.clone(),
            segment: o.segment,
            price: o.price,
            mw,
        });
    }
    let clearing_price = dispatched.last().map(|d| d.price).ok_or(ClearingError::EmptyStack)?;
    Ok(ClearingResult {
        hour,
        clearing_price,
        dispatched,
        total_cost,
        feasible: true,
    })
}

struct Search<'a> {
    items: &'a [&'a IncrementalOffer],
    load: f64,
    best_cost: f64,
    best: Option<Vec<bool>>,
    chosen: Vec<bool>,
}

impl Search<'_> {
    /// Cost of the divisible fill of `need` from items `i..`, or None if they
    /// cannot cover it. Items are in price order, so this is the LP bound.
    fn relaxation(&self, i: usize, mut need: f64) -> Option<f64> {
        let mut cost = 0.0;
        for o in &self.items[i..] {
            if covered(need, self.load) {
                return Some(cost);
            }
            let take = o.quantity.min(need);
            cost += take * o.price;
            need -= take;
        }
        covered(need, self.load).then_some(cost)
    }

    fn dfs(&mut self, i: usize, need: f64, cost: f64) {
        if covered(need, self.load) {
            if cost < self.best_cost {
                self.best_cost = cost;
                self.best = Some(self.chosen.clone());
            }
            return;
        }
        if i == self.items.len() {
            return;
        }
        match self.relaxation(i, need) {
            Some(bound) if cost + bound < self.best_cost => {}
            _ => return,
        }
        let o = self.items[i];
        self.chosen[i] = true;
        self.dfs(i + 1, need - o.quantity, cost + o.price * o.quantity);
        self.chosen[i] = false;
        self.dfs(i + 1, need, cost);
    }
}

/// Exact minimiser of `sum x*p*q` subject to `sum x*q >= load` with binary
/// acceptance of whole blocks.
///
/// The constraint is on accepted quantity; negative-price blocks are always
/// accepted since they lower cost and add supply. Among equal-cost optima the
/// one earliest in merit order wins. Clearing price is the highest accepted
/// price.
pub fn clear_ilp_oracle(offers: &[IncrementalOffer], load: f64) -> Result<ClearingResult, ClearingError> {
    let (hour, stack) = check_inputs(offers, load)?;
    if stack.len() > ORACLE_MAX_SEGMENTS {
        return Err(ClearingError::TooManySegments(stack.len()));
    }
    let (forced, free): (Vec<&IncrementalOffer>, Vec<&IncrementalOffer>) = stack
        .into_iter()
        .filter(|o| o.quantity > 0.0)
        .partition(|o| o.price < 0.0);
    let forced_mw: f64 = forced.iter().map(|o| o.quantity).sum();
    let forced_cost: f64 = forced.iter().map(|o| o.price * o.quantity).sum();

    let mut search = Search {
        items: &free,
        load,
        best_cost: f64::INFINITY,
        best: None,
        chosen: vec![false; free.len()],
    };
    search.dfs(0, load - forced_mw, forced_cost);
    let chosen = search.best.ok_or(ClearingError::InsufficientSupply {
        hour,
        supply: forced_mw + free.iter().map(|o| o.quantity).sum::<f64>(),
        load,
    })?;

    let dispatched: Vec<Dispatch> = forced
        .iter()
        .chain(free.iter().zip(&chosen).filter(|(_, c)| **c).map(|(o, _)| o))
        .map(|o| Dispatch {
            unit_id: o.unit_id.clone(),
            segment: o.segment,
            price: o.price,
            mw: o.quantity,
        })
        .collect();
    let clearing_price = dispatched
        .iter()
        .map(|d| d.price)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ClearingResult {
        hour,
        clearing_price,
        total_cost: search.best_cost,
        dispatched,
        feasible: true,
    })
}

/// Clears the original and the mitigated stack against the same load.
pub fn clear_mitigated(
    offers: &[IncrementalOffer],
    mitigated: &[IncrementalOffer],
    load: f64,
) -> Result<(ClearingResult, ClearingResult), ClearingError> {
    Ok((clear(offers, load)?, clear(mitigated, load)?))
}

/// Writes `hour,clearing_price,total_cost,feasible`.
pub fn write_prices_csv<W: Write>(w: W, results: &[ClearingResult]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["hour", "clearing_price", "total_cost", "feasible"])?;
    for r in results {
        let num = |x: f64| if r.feasible { x.to_string() } else { String::new() };
        wtr.write_record([
            r.hour.to_string(),
            num(r.clearing_price),
            num(r.total_cost),
            r.feasible.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
