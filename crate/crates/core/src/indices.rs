//! Structural score variables: per-firm residual supply index and the lagged,
//! load-weighted congestion index.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use crate::data::{AreaRecord, BidderId, Dataset, Hour, IncrementalOffer, OfferStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Rsi,
    Congestion,
}

/// Which side of the cutoff activates screening.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreatedSide {
    /// Treated when `score <= cutoff`.
    Leq,
    /// Treated when `score >= cutoff`.
    Geq,
}

impl TreatedSide {
    pub fn is_treated(self, score: f64, cutoff: f64) -> bool {
        match self {
            TreatedSide::Leq => score <= cutoff,
            TreatedSide::Geq => score >= cutoff,
        }
    }
}

impl ScoreKind {
    pub fn default_cutoff(self) -> f64 {
        match self {
            ScoreKind::Rsi => 1.0,
            ScoreKind::Congestion => 0.04,
        }
    }

    pub fn treated_side(self) -> TreatedSide {
        match self {
            ScoreKind::Rsi => TreatedSide::Leq,
            ScoreKind::Congestion => TreatedSide::Geq,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Rsi => "rsi",
            ScoreKind::Congestion => "congestion",
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rsi" => Ok(ScoreKind::Rsi),
            "congestion" => Ok(ScoreKind::Congestion),
            other => Err(format!("unknown score kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IndexError {
    ZeroDenominator { hour: Option<Hour> },
    NegativeInput { hour: Option<Hour> },
    NoLaggedData { hour: Hour },
    ZeroTotalLoad { hour: Option<Hour> },
}

impl fmt::Display for IndexError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = |h: &Option<Hour>| h.map(|h| format!(" at {h}")).unwrap_or_default();
        match self {
            IndexError::ZeroDenominator { hour } => write!(f, "load plus reserves is not positive{}", at(hour)),
            IndexError::NegativeInput { hour } => {
                write!(f, "supply inputs must satisfy 0 <= firm <= market{}", at(hour))
            }
            IndexError::NoLaggedData { hour } => write!(f, "no area data for the hour before {hour}"),
            IndexError::ZeroTotalLoad { hour } => {
                write!(f, "non-excluded areas carry no load{}", at(hour))
            }
        }
    }
}

impl std::error::Error for IndexError {}

/// Residual supply index `(market - firm) / (load + reserves)`.
pub fn rsi(market_supply: f64, firm_supply: f64, load_forecast: f64, reserves: f64) -> Result<f64, IndexError> {
    let denom = load_forecast + reserves;
    if !(denom > 0.0) {
        return Err(IndexError::ZeroDenominator { hour: None });
    }
    if !(firm_supply >= 0.0) || !(market_supply >= firm_supply) {
        return Err(IndexError::NegativeInput { hour: None });
    }
    Ok((market_supply - firm_supply) / denom)
}

/// How much of a must-run unit's capacity is treated as must-take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MustTakeRule {
    /// The whole `max_output` of a unit with any must-run segment.
    #[default]
    MaxOutput,
    /// Only the summed quantity of its must-run segments.
    SegmentQuantity,
}

/// Flexible capacity of one unit-hour (offers share hour and unit).
pub fn unit_flexible_supply(offers: &[IncrementalOffer], rule: MustTakeRule) -> f64 {
    if offers.iter().all(|o| o.status == OfferStatus::Unavailable) {
        return 0.0;
    }
    let capacity = offers.iter().map(|o| o.max_output).fold(0.0, f64::max);
    let must_take = match rule {
        MustTakeRule::MaxOutput => {
            if offers.iter().any(|o| o.status == OfferStatus::MustRun) {
                capacity
            } else {
                0.0
            }
        }
        MustTakeRule::SegmentQuantity => offers
            .iter()
            .filter(|o| o.status == OfferStatus::MustRun)
            .map(|o| o.quantity)
            .sum(),
    };
    (capacity - must_take).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirmHourSupply {
    pub hour: Hour,
    pub bidder_id: BidderId,
    pub firm_supply: f64,
    pub market_supply: f64,
}

/// Flexible supply per bidder at one hour, plus the market total.
pub fn firm_supplies(offers_at_hour: &[IncrementalOffer], rule: MustTakeRule) -> (f64, BTreeMap<BidderId, f64>) {
    let mut firms: BTreeMap<BidderId, f64> = BTreeMap::new();
    let mut market = 0.0;
    for unit in offers_at_hour.chunk_by(|a, b| a.unit_id == b.unit_id) {
        let supply = unit_flexible_supply(unit, rule);
        *firms.entry(unit[0].bidder_id.clone()).or_insert(0.0) += supply;
        market += supply;
    }
    (market, firms)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorePoint {
    pub hour: Hour,
    pub bidder_id: Option<BidderId>,
    pub value: f64,
}

/// Score values per hour (congestion) or per bidder-hour (RSI).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub kind: ScoreKind,
    pub cutoff: f64,
    pub treated_side: TreatedSide,
    /// Sorted by `(hour, bidder_id)`.
    pub points: Vec<ScorePoint>,
}

impl ScoreSeries {
    fn new(kind: ScoreKind, points: Vec<ScorePoint>) -> Self {
        ScoreSeries {
            kind,
            cutoff: kind.default_cutoff(),
            treated_side: kind.treated_side(),
            points,
        }
    }

    /// Points for one hour.
    pub fn at_hour(&self, hour: Hour) -> &[ScorePoint] {
        let start = self.points.partition_point(|p| p.hour < hour);
        let end = self.points.partition_point(|p| p.hour <= hour);
        &self.points[start..end]
    }

    pub fn is_treated(&self, score: f64) -> bool {
        self.treated_side.is_treated(score, self.cutoff)
    }

    /// Share of hours where at least one point is on the treated side.
    pub fn treated_hour_share(&self) -> f64 {
        let hours: Vec<(Hour, bool)> = self
            .points
            .chunk_by(|a, b| a.hour == b.hour)
            .map(|g| (g[0].hour, g.iter().any(|p| self.is_treated(p.value))))
            .collect();
        if hours.is_empty() {
            return 0.0;
        }
        hours.iter().filter(|(_, t)| *t).count() as f64 / hours.len() as f64
    }

    /// Writes `hour,bidder_id,score` for RSI and `hour,score` for congestion.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        let per_bidder = self.kind == ScoreKind::Rsi;
        if per_bidder {
            wtr.write_record(["hour", "bidder_id", "score"])?;
        } else {
            wtr.write_record(["hour", "score"])?;
        }
        for p in &self.points {
            if per_bidder {
                let b = p.bidder_id.as_ref().map(|b| b.to_string()).unwrap_or_default();
                wtr.write_record([p.hour.to_string(), b, p.value.to_string()])?;
            } else {
                wtr.write_record([p.hour.to_string(), p.value.to_string()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Per bidder-hour RSI for every bidder that submitted offers that hour.
pub fn market_rsi_series(ds: &Dataset, rule: MustTakeRule) -> Result<ScoreSeries, IndexError> {
    let mut points = Vec::new();
    for m in ds.market() {
        let offers = ds.offers_at(m.hour);
        if offers.is_empty() {
            continue;
        }
        let (market, firms) = firm_supplies(offers, rule);
        for (bidder, firm) in firms {
            let value = rsi(market, firm.min(market), m.load_forecast, m.reserves).map_err(|e| match e {
                IndexError::ZeroDenominator { .. } => IndexError::ZeroDenominator { hour: Some(m.hour) },
                IndexError::NegativeInput { .. } => IndexError::NegativeInput { hour: Some(m.hour) },
                other => other,
            })?;
            points.push(ScorePoint {
                hour: m.hour,
                bidder_id: Some(bidder),
                value,
            });
        }
    }
    Ok(ScoreSeries::new(ScoreKind::Rsi, points))
}

/// Load-weighted shadow price over non-excluded areas of one hour.
///
/// Feed it the areas of the hour *before* the one being scored.
pub fn congestion_index(lagged_areas: &[AreaRecord]) -> Result<f64, IndexError> {
    let included = || lagged_areas.iter().filter(|a| !a.is_excluded);
    let total: f64 = included().map(|a| a.load).sum();
    if !(total > 0.0) {
        return Err(IndexError::ZeroTotalLoad { hour: None });
    }
    Ok(included().map(|a| a.load / total * a.shadow_price).sum())
}

/// Congestion score for each market hour whose previous hour has a record.
/// The first hour (and any hour after a gap) has no score.
pub fn congestion_series(ds: &Dataset) -> Result<ScoreSeries, IndexError> {
    let mut points = Vec::new();
    for m in ds.market() {
        let Some(prev) = ds.market_at(m.hour.prev()) else {
            continue;
        };
        let value = congestion_index(&prev.areas).map_err(|_| IndexError::ZeroTotalLoad { hour: Some(prev.hour) })?;
        points.push(ScorePoint {
            hour: m.hour,
            bidder_id: None,
            value,
        });
    }
    Ok(ScoreSeries::new(ScoreKind::Congestion, points))
}

/// Congestion score at a single hour, erroring when the lag is absent.
pub fn congestion_at(ds: &Dataset, hour: Hour) -> Result<f64, IndexError> {
    let prev = ds.market_at(hour.prev()).ok_or(IndexError::NoLaggedData { hour })?;
    congestion_index(&prev.areas)
}

pub fn score_series(ds: &Dataset, kind: ScoreKind, rule: MustTakeRule) -> Result<ScoreSeries, IndexError> {
    match kind {
        ScoreKind::Rsi => market_rsi_series(ds, rule),
        ScoreKind::Congestion => congestion_series(ds),
    }
}
