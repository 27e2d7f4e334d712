//! Offer-based reference levels: a rolling, quantity-weighted average of each
//! unit's economic bids inside a price band.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use crate::data::{Dataset, Hour, IncrementalOffer, OfferStatus, UnitId};
use crate::exec::Execution;
use crate::numeric::CompensatedSum;

/// Inclusive price band for bids that count toward a reference level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EconomicBand {
    pub low: f64,
    pub high: f64,
}

impl Default for EconomicBand {
    fn default() -> Self {
        EconomicBand { low: 0.0, high: 800.0 }
    }
}

impl EconomicBand {
    pub fn contains(&self, price: f64) -> bool {
        price >= self.low && price <= self.high
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceConfig {
    pub window_days: u32,
    pub band: EconomicBand,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            window_days: 90,
            band: EconomicBand::default(),
        }
    }
}

impl ReferenceConfig {
    pub fn window_hours(&self) -> i64 {
        i64::from(self.window_days) * 24
    }

    fn qualifies(&self, o: &IncrementalOffer) -> bool {
        o.status == OfferStatus::Economic && self.band.contains(o.price)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceError {
    UnknownUnit(UnitId),
}

impl fmt::Display for ReferenceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReferenceError::UnknownUnit(u) => write!(f, "unit {u} has no offers in the dataset"),
        }
    }
}

impl std::error::Error for ReferenceError {}

/// Reference level of a unit at hour `at`, from its offers in
/// `[at - window, at)`. `None` when no economic in-band bid with positive
/// quantity falls in the window.
pub fn reference_level_at<'a, I>(offers: I, at: Hour, cfg: &ReferenceConfig) -> Option<f64>
where
    I: IntoIterator<Item = &'a IncrementalOffer>,
{
    let start = at.offset(-cfg.window_hours());
    let mut weighted = CompensatedSum::new();
    let mut weight = CompensatedSum::new();
    for o in offers {
        if o.hour >= start && o.hour < at && cfg.qualifies(o) {
            weighted.add(o.price * o.quantity);
            weight.add(o.quantity);
        }
    }
    let w = weight.value();
    (w > 0.0).then(|| weighted.value() / w)
}

/// Hourly reference levels of one unit, aligned with the dataset's market hours.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLevelSeries {
    pub unit_id: UnitId,
    pub hours: Vec<Hour>,
    pub values: Vec<Option<f64>>,
    pub window_days: u32,
    pub band: EconomicBand,
}

impl ReferenceLevelSeries {
    pub fn at(&self, hour: Hour) -> Option<f64> {
        self.hours
            .binary_search(&hour)
            .ok()
            .and_then(|i| self.values[i])
    }
}

/// Slides the window forward over chronologically sorted offers.
fn rolling_values(offers: &[&IncrementalOffer], hours: &[Hour], cfg: &ReferenceConfig) -> Vec<Option<f64>> {
    let mut weighted = CompensatedSum::new();
    let mut weight = CompensatedSum::new();
    let mut live = 0usize;
    let (mut lo, mut hi) = (0usize, 0usize);
    let mut values = Vec::with_capacity(hours.len());
    for &t in hours {
        while hi < offers.len() && offers[hi].hour < t {
            let o = offers[hi];
            if cfg.qualifies(o) {
                weighted.add(o.price * o.quantity);
                weight.add(o.quantity);
                live += 1;
            }
            hi += 1;
        }
        let start = t.offset(-cfg.window_hours());
        while lo < hi && offers[lo].hour < start {
            let o = offers[lo];
            if cfg.qualifies(o) {
                weighted.add(-(o.price * o.quantity));
                weight.add(-o.quantity);
                live -= 1;
            }
            lo += 1;
        }
        if live == 0 {
            weighted = CompensatedSum::new();
            weight = CompensatedSum::new();
        }
        let w = weight.value();
        values.push((live > 0 && w > 0.0).then(|| weighted.value() / w));
    }
    values
}

/// One reference value per dataset hour for `unit`.
pub fn rolling_reference_series(
    ds: &Dataset,
    unit: &UnitId,
    cfg: &ReferenceConfig,
) -> Result<ReferenceLevelSeries, ReferenceError> {
    let offers: Vec<&IncrementalOffer> = ds.offers().iter().filter(|o| &o.unit_id == unit).collect();
    if offers.is_empty() {
        return Err(ReferenceError::UnknownUnit(unit.clone()));
    }
    let hours: Vec<Hour> = ds.hours().collect();
    let values = rolling_values(&offers, &hours, cfg);
    Ok(ReferenceLevelSeries {
        unit_id: unit.clone(),
        hours,
        values,
        window_days: cfg.window_days,
        band: cfg.band,
    })
}

/// Reference levels of every unit in a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTable {
    hours: Vec<Hour>,
    series: BTreeMap<UnitId, Vec<Option<f64>>>,
}

impl ReferenceTable {
    pub fn build(ds: &Dataset, cfg: &ReferenceConfig, exec: Execution) -> Self {
        let hours: Vec<Hour> = ds.hours().collect();
        let by_unit: Vec<(&UnitId, Vec<&IncrementalOffer>)> = ds.offers_by_unit().into_iter().collect();
        let values = exec.map(&by_unit, |(_, offers)| rolling_values(offers, &hours, cfg));
        let series = by_unit
            .iter()
            .zip(values)
            .map(|((u, _), v)| ((*u).clone(), v))
            .collect();
        ReferenceTable { hours, series }
    }

    pub fn get(&self, unit: &UnitId, hour: Hour) -> Option<f64> {
        let i = self.hours.binary_search(&hour).ok()?;
        self.series.get(unit).and_then(|v| v[i])
    }

    /// Non-missing reference levels of all units at `hour`.
    pub fn at_hour(&self, hour: Hour) -> BTreeMap<UnitId, f64> {
        let Ok(i) = self.hours.binary_search(&hour) else {
            return BTreeMap::new();
        };
        self.series
            .iter()
            .filter_map(|(u, v)| v[i].map(|r| (u.clone(), r)))
            .collect()
    }

    pub fn units(&self) -> impl Iterator<Item = &UnitId> {
        self.series.keys()
    }

    pub fn hours(&self) -> &[Hour] {
        &self.hours
    }

    /// Writes `hour,unit_id,reference_usd_per_mwh`; missing values are empty cells.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["hour", "unit_id", "reference_usd_per_mwh"])?;
        for (i, h) in self.hours.iter().enumerate() {
            for (u, v) in &self.series {
                let cell = v[i].map(|x| x.to_string()).unwrap_or_default();
                wtr.write_record([h.to_string(), u.to_string(), cell])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BidderId, MarketHourRecord};

    fn bid(hour: i64, price: f64, qty: f64) -> IncrementalOffer {
        IncrementalOffer {
            hour: Hour::from_epoch_hours(hour),
            unit_id: UnitId::from("U1"),
            bidder_id: BidderId::from("B1"),
            segment: 1,
            price,
            quantity: qty,
            status: OfferStatus::Economic,
            max_output: 100.0,
        }
    }

    #[test]
    fn weighted_mean_of_window() {
        let offers = [bid(0, 30.0, 10.0), bid(1, 50.0, 30.0)];
        let r = reference_level_at(&offers, Hour::from_epoch_hours(2), &ReferenceConfig::default());
        assert_eq!(r, Some(45.0));
    }

    #[test]
    fn constant_prices_give_that_price() {
        let offers: Vec<_> = (0..50).map(|h| bid(h, 42.5, 1.0 + h as f64)).collect();
        let r = reference_level_at(&offers, Hour::from_epoch_hours(60), &ReferenceConfig::default()).unwrap();
        assert!((r - 42.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_band_bids_are_missing() {
        let offers = [bid(0, -10.0, 10.0), bid(1, 900.0, 10.0)];
        let r = reference_level_at(&offers, Hour::from_epoch_hours(5), &ReferenceConfig::default());
        assert_eq!(r, None);
    }

    #[test]
    fn band_endpoints_are_inclusive() {
        let offers = [bid(0, 0.0, 10.0), bid(1, 800.0, 10.0)];
        let r = reference_level_at(&offers, Hour::from_epoch_hours(5), &ReferenceConfig::default());
        assert_eq!(r, Some(400.0));
    }

    #[test]
    fn window_excludes_current_and_stale_hours() {
        let cfg = ReferenceConfig { window_days: 1, ..Default::default() };
        let offers = [bid(0, 10.0, 1.0), bid(30, 20.0, 1.0), bid(48, 99.0, 1.0)];
        // window for hour 48 is [24, 48)
        assert_eq!(reference_level_at(&offers, Hour::from_epoch_hours(48), &cfg), Some(20.0));
        assert_eq!(reference_level_at(&offers, Hour::from_epoch_hours(24), &cfg), Some(10.0));
        assert_eq!(reference_level_at(&offers, Hour::from_epoch_hours(0), &cfg), None);
    }

    fn dataset(offers: Vec<IncrementalOffer>, hours: i64) -> Dataset {
        let market = (0..hours)
            .map(|h| MarketHourRecord::new(Hour::from_epoch_hours(h), 100.0, 10.0, 3.0))
            .collect();
        Dataset::new(offers, market, 10)
    }

    #[test]
    fn three_hour_trace_has_leading_missing() {
        // bids at h0 (20 @ 1 MW), h1 (40 @ 3 MW), h2 (10 @ 0 MW)
        let ds = dataset(vec![bid(0, 20.0, 1.0), bid(1, 40.0, 3.0), bid(2, 10.0, 0.0)], 3);
        let s = rolling_reference_series(&ds, &UnitId::from("U1"), &ReferenceConfig::default()).unwrap();
        assert_eq!(s.values, vec![None, Some(20.0), Some(35.0)]);
    }

    #[test]
    fn constant_history_gives_constant_series() {
        let ds = dataset((0..200).map(|h| bid(h, 42.0, 10.0)).collect(), 200);
        let s = rolling_reference_series(&ds, &UnitId::from("U1"), &ReferenceConfig::default()).unwrap();
        assert_eq!(s.values[0], None);
        assert!(s.values[1..].iter().all(|v| *v == Some(42.0)));
    }

    #[test]
    fn doubling_quantities_leaves_series_unchanged() {
        let offers: Vec<_> = (0..100).map(|h| bid(h, 20.0 + (h % 7) as f64, 1.0 + (h % 3) as f64)).collect();
        let doubled: Vec<_> = offers
            .iter()
            .cloned()
            .map(|mut o| {
                o.quantity *= 2.0;
                o
            })
            .collect();
        let u = UnitId::from("U1");
        let cfg = ReferenceConfig::default();
        let a = rolling_reference_series(&dataset(offers, 100), &u, &cfg).unwrap();
        let b = rolling_reference_series(&dataset(doubled, 100), &u, &cfg).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            match (x, y) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9),
                (None, None) => {}
                _ => panic!("missingness differs"),
            }
        }
    }

    #[test]
    fn unknown_unit_is_an_error() {
        let ds = dataset(vec![bid(0, 20.0, 1.0)], 2);
        assert_eq!(
            rolling_reference_series(&ds, &UnitId::from("nope"), &ReferenceConfig::default()),
            Err(ReferenceError::UnknownUnit(UnitId::from("nope")))
        );
    }

    #[test]
    fn table_matches_direct_evaluation() {
        let cfg = ReferenceConfig { window_days: 2, ..Default::default() };
        let offers: Vec<_> = (0..150).map(|h| bid(h, 10.0 + ((h * 37) % 50) as f64, 1.0 + (h % 4) as f64)).collect();
        let ds = dataset(offers.clone(), 150);
        let table = ReferenceTable::build(&ds, &cfg, Execution::Sequential);
        let u = UnitId::from("U1");
        for h in 0..150 {
            let hour = Hour::from_epoch_hours(h);
            let direct = reference_level_at(&offers, hour, &cfg);
            match (table.get(&u, hour), direct) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "hour {h}: {a} vs {b}"),
                (None, None) => {}
                other => panic!("hour {h}: {other:?}"),
            }
        }
    }
}
