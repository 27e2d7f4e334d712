use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::data::{max_economic_bid, BidderId, Dataset, Hour, UnitId};
use crate::indices::ScoreSeries;
use crate::reference::ReferenceTable;

use super::{center_score, ObservationRow, RddError};

pub const PANEL_COLUMNS: [&str; 9] = [
    "hour",
    "bidder_id",
    "unit_id",
    "p_max",
    "score",
    "centered_score",
    "treatment",
    "ref",
    "gas",
];

/// Estimation panel plus counts of unit-hours that could not be used.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PanelBuild {
    pub rows: Vec<ObservationRow>,
    pub missing_reference: usize,
    pub missing_score: usize,
    pub no_economic_bid: usize,
    pub missing_market: usize,
}

impl PanelBuild {
    pub fn dropped(&self) -> usize {
        self.missing_reference + self.missing_score + self.no_economic_bid + self.missing_market
    }
}

/// One row per unit-hour with offers. RSI scores are matched on bidder,
/// congestion scores on hour alone.
pub fn build_panel(ds: &Dataset, refs: &ReferenceTable, scores: &ScoreSeries) -> PanelBuild {
    let mut out = PanelBuild::default();
    let mut hours: Vec<Hour> = ds.offers().iter().map(|o| o.hour).collect();
    hours.dedup();
    for hour in hours {
        let offers = ds.offers_at(hour);
        let units = offers.chunk_by(|a, b| a.unit_id == b.unit_id);
        let Some(market) = ds.market_at(hour) else {
            out.missing_market += units.count();
            continue;
        };
        let points = scores.at_hour(hour);
        for unit_offers in units {
            let unit = &unit_offers[0].unit_id;
            let bidder = ds.bidder_of(unit).cloned().unwrap_or_else(|| unit_offers[0].bidder_id.clone());
            let Some(p_max) = max_economic_bid(unit_offers) else {
                out.no_economic_bid += 1;
                continue;
            };
            let score = points
                .iter()
                .find(|p| p.bidder_id.as_ref().is_none_or(|b| *b == bidder))
                .map(|p| p.value);
            let Some(score) = score else {
                out.missing_score += 1;
                continue;
            };
            let Some(reference) = refs.get(unit, hour) else {
                out.missing_reference += 1;
                continue;
            };
            let (centered, treated) = center_score(score, scores.cutoff, scores.treated_side);
            out.rows.push(ObservationRow {
                hour,
                bidder_id: bidder,
                unit_id: unit.clone(),
                p_max,
                score,
                centered,
                treated,
                reference,
                gas: market.gas_price,
            });
        }
    }
    out
}

pub fn write_panel<W: Write>(w: W, rows: &[ObservationRow]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(PANEL_COLUMNS)?;
    for r in rows {
        wtr.write_record([
            r.hour.to_string(),
            r.bidder_id.to_string(),
            r.unit_id.to_string(),
            r.p_max.to_string(),
            r.score.to_string(),
            r.centered.to_string(),
            if r.treated { "1" } else { "0" }.to_string(),
            r.reference.to_string(),
            r.gas.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_panel<R: Read>(r: R) -> Result<Vec<ObservationRow>, RddError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let malformed = |line: u64, reason: String| RddError::MalformedPanel { line, reason };
    let headers = rdr.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    let mut idx = BTreeMap::new();
    for col in PANEL_COLUMNS {
        let i = headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| malformed(1, format!("missing column `{col}`")))?;
        idx.insert(col, i);
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| malformed(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: &str| rec.get(idx[c]).unwrap_or("");
        let num = |c: &str| {
            field(c)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(line, format!("`{c}` is not a finite number")))
        };
        let hour: Hour = field("hour").parse().map_err(|e| malformed(line, format!("{e}")))?;
        let treated = match field("treatment") {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(malformed(line, format!("treatment `{other}` is not 0 or 1"))),
        };
        rows.push(ObservationRow {
            hour,
            bidder_id: BidderId::new(field("bidder_id")),
            unit_id: UnitId::new(field("unit_id")),
            p_max: num("p_max")?,
            score: num("score")?,
            centered: num("centered_score")?,
            treated,
            reference: num("ref")?,
            gas: num("gas")?,
        });
    }
    Ok(rows)
}
