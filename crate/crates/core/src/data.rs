//! Bid, market and area records, CSV ingestion and dataset validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, TimeZone, Timelike, Utc};

/// Column order written by [`write_offers_csv`].
pub const OFFERS_COLUMNS: [&str; 8] = [
    "hour",
    "unit_id",
    "bidder_id",
    "segment",
    "price_usd_per_mwh",
    "quantity_mw",
    "status",
    "max_output_mw",
];
pub const MARKET_COLUMNS: [&str; 4] = [
    "hour",
    "load_forecast_mwh",
    "reserves_mwh",
    "gas_price_usd_per_mmbtu",
];
/// Optional market column overriding the demand used in surplus accounting.
pub const DEMAND_COLUMN: &str = "demand_mwh";
pub const AREAS_COLUMNS: [&str; 5] = [
    "hour",
    "area_id",
    "load_mwh",
    "shadow_price_usd_per_mwh",
    "is_excluded",
];

/// Segment cap for ISO-NE style markets.
pub const SEGMENT_CAP_ISONE: u8 = 10;
/// Segment cap for NYISO style markets.
pub const SEGMENT_CAP_NYISO: u8 = 12;

/// An hour on the UTC clock, stored as whole hours since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hour(i64);

impl Hour {
    pub const fn from_epoch_hours(hours: i64) -> Self {
        Hour(hours)
    }

    pub const fn epoch_hours(self) -> i64 {
        self.0
    }

    pub fn from_datetime(dt: DateTime<Utc>) -> Option<Self> {
        if dt.minute() != 0 || dt.second() != 0 || dt.nanosecond() != 0 {
            return None;
        }
        Some(Hour(dt.timestamp().div_euclid(3600)))
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        Utc.timestamp_opt(self.0 * 3600, 0)
            .single()
            .expect("hour within chrono range")
    }

    pub fn prev(self) -> Hour {
        Hour(self.0 - 1)
    }

    pub fn next(self) -> Hour {
        Hour(self.0 + 1)
    }

    pub fn offset(self, hours: i64) -> Hour {
        Hour(self.0 + hours)
    }
}

impl fmt::Display for Hour {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_datetime().format("%Y-%m-%dT%H:%MZ"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseHourError(String);

impl fmt::Display for ParseHourError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid hour `{}`", self.0)
    }
}

impl std::error::Error for ParseHourError {}

impl FromStr for Hour {
    type Err = ParseHourError;

    /// Accepts `YYYY-MM-DDTHH:MMZ` and RFC 3339 with a zero UTC offset. Anything
    /// off the hour or carrying a non-UTC offset is rejected.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseHourError(s.to_string());
        let dt = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            if dt.offset().local_minus_utc() != 0 {
                return Err(err());
            }
            dt.with_timezone(&Utc)
        } else {
            let naive = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%MZ").map_err(|_| err())?;
            Utc.from_utc_datetime(&naive)
        };
        Hour::from_datetime(dt).ok_or_else(err)
    }
}

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                $name(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }
    };
}

string_id!(UnitId);
string_id!(BidderId);
string_id!(AreaId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OfferStatus {
    Economic,
    MustRun,
    Unavailable,
}

impl OfferStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            OfferStatus::Economic => "ECONOMIC",
            OfferStatus::MustRun => "MUST_RUN",
            OfferStatus::Unavailable => "UNAVAILABLE",
        }
    }
}

impl FromStr for OfferStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ECONOMIC" => Ok(OfferStatus::Economic),
            "MUST_RUN" => Ok(OfferStatus::MustRun),
            "UNAVAILABLE" => Ok(OfferStatus::Unavailable),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

/// One price-quantity step of a unit's hourly incremental offer.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalOffer {
    pub hour: Hour,
    pub unit_id: UnitId,
    pub bidder_id: BidderId,
    /// 1-based step index.
    pub segment: u8,
    /// $/MWh
    pub price: f64,
    /// MW
    pub quantity: f64,
    pub status: OfferStatus,
    /// MW
    pub max_output: f64,
}

impl IncrementalOffer {
    fn sort_key(&self) -> (Hour, &UnitId, u8) {
        (self.hour, &self.unit_id, self.segment)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaRecord {
    pub area_id: AreaId,
    /// MWh
    pub load: f64,
    /// $/MWh
    pub shadow_price: f64,
    pub is_excluded: bool,
}

/// Hour-level system state.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketHourRecord {
    pub hour: Hour,
    /// MWh
    pub load_forecast: f64,
    /// MWh
    pub reserves: f64,
    /// $/MMBtu
    pub gas_price: f64,
    /// Demand used for surplus accounting when it differs from the load forecast.
    pub demand: Option<f64>,
    pub areas: Vec<AreaRecord>,
}

impl MarketHourRecord {
    pub fn new(hour: Hour, load_forecast: f64, reserves: f64, gas_price: f64) -> Self {
        MarketHourRecord {
            hour,
            load_forecast,
            reserves,
            gas_price,
            demand: None,
            areas: Vec::new(),
        }
    }

    /// Demand in MWh for surplus accounting; falls back to the load forecast.
    pub fn demand(&self) -> f64 {
        self.demand.unwrap_or(self.load_forecast)
    }
}

/// Highest price among the economic segments of one unit-hour.
///
/// Must-run and unavailable segments are ignored. `None` when no economic
/// segment exists.
pub fn max_economic_bid<'a, I>(offers: I) -> Option<f64>
where
    I: IntoIterator<Item = &'a IncrementalOffer>,
{
    offers
        .into_iter()
        .filter(|o| o.status == OfferStatus::Economic)
        .map(|o| o.price)
        .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))))
}

#[derive(Debug)]
pub enum DataError {
    Io { path: PathBuf, source: io::Error },
    MalformedRow { line: u64, reason: String },
    NonMonotoneSteps { hour: Hour, unit_id: UnitId },
    SegmentCapExceeded { hour: Hour, unit_id: UnitId, segment: u8, cap: u8 },
    DuplicateSegment { hour: Hour, unit_id: UnitId, segment: u8 },
    DuplicateHour { hour: Hour },
    UnknownHour { line: u64, hour: Hour },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            DataError::MalformedRow { line, reason } => write!(f, "line {line}: {reason}"),
            DataError::NonMonotoneSteps { hour, unit_id } => {
                write!(f, "unit {unit_id} at {hour}: segment prices decrease")
            }
            DataError::SegmentCapExceeded { hour, unit_id, segment, cap } => write!(
                f,
                "unit {unit_id} at {hour}: segment {segment} exceeds the cap of {cap}"
            ),
            DataError::DuplicateSegment { hour, unit_id, segment } => {
                write!(f, "unit {unit_id} at {hour}: segment {segment} appears twice")
            }
            DataError::DuplicateHour { hour } => write!(f, "hour {hour} appears twice"),
            DataError::UnknownHour { line, hour } => {
                write!(f, "line {line}: hour {hour} has no market record")
            }
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<File, DataError> {
    File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_error(e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    DataError::MalformedRow {
        line,
        reason: e.to_string(),
    }
}

fn io_error(e: io::Error) -> DataError {
    DataError::Io {
        path: PathBuf::from("<stream>"),
        source: e,
    }
}

/// Maps a header row onto the expected columns, in any order.
struct Columns {
    index: Vec<usize>,
    optional: Vec<Option<usize>>,
}

impl Columns {
    fn resolve(
        header: &csv::StringRecord,
        required: &[&str],
        optional: &[&str],
    ) -> Result<Columns, DataError> {
        let find = |name: &str| header.iter().position(|h| h.trim() == name);
        let mut index = Vec::with_capacity(required.len());
        for name in required {
            index.push(find(name).ok_or_else(|| DataError::MalformedRow {
                line: 1,
                reason: format!("missing column `{name}`"),
            })?);
        }
        for h in header.iter() {
            let h = h.trim();
            if !required.contains(&h) && !optional.contains(&h) {
                return Err(DataError::MalformedRow {
                    line: 1,
                    reason: format!("unexpected column `{h}`"),
                });
            }
        }
        let optional = optional.iter().map(|n| find(n)).collect();
        Ok(Columns { index, optional })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, i: usize) -> &'r str {
        rec.get(self.index[i]).unwrap_or("").trim()
    }

    fn get_optional<'r>(&self, rec: &'r csv::StringRecord, i: usize) -> Option<&'r str> {
        self.optional[i]
            .and_then(|c| rec.get(c))
            .map(str::trim)
            .filter(|s| !s.is_empty())
    }
}

fn malformed(line: u64, reason: impl Into<String>) -> DataError {
    DataError::MalformedRow {
        line,
        reason: reason.into(),
    }
}

fn parse_hour(s: &str, line: u64) -> Result<Hour, DataError> {
    s.parse().map_err(|e: ParseHourError| malformed(line, e.to_string()))
}

fn parse_f64(s: &str, col: &str, line: u64) -> Result<f64, DataError> {
    let v: f64 = s
        .parse()
        .map_err(|_| malformed(line, format!("{col}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(malformed(line, format!("{col}: value must be finite")));
    }
    Ok(v)
}

fn parse_nonneg(s: &str, col: &str, line: u64) -> Result<f64, DataError> {
    let v = parse_f64(s, col, line)?;
    if v < 0.0 {
        return Err(malformed(line, format!("{col}: value must be non-negative")));
    }
    Ok(v)
}

fn parse_bool(s: &str, col: &str, line: u64) -> Result<bool, DataError> {
    match s {
        "true" | "TRUE" | "1" => Ok(true),
        "false" | "FALSE" | "0" => Ok(false),
        _ => Err(malformed(line, format!("{col}: `{s}` is not a boolean"))),
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(r)
}

/// Reads and validates an offers table. Rows come back sorted by
/// `(hour, unit_id, segment)`.
pub fn read_offers<R: Read>(r: R, segment_cap: u8) -> Result<Vec<IncrementalOffer>, DataError> {
    let mut rdr = reader(r);
    let cols = Columns::resolve(rdr.headers().map_err(csv_error)?, &OFFERS_COLUMNS, &[])?;
    let mut offers = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let segment: u8 = cols
            .get(&rec, 3)
            .parse()
            .map_err(|_| malformed(line, format!("segment: `{}` is not a small integer", cols.get(&rec, 3))))?;
        if segment == 0 {
            return Err(malformed(line, "segment: indices start at 1"));
        }
        let unit = cols.get(&rec, 1);
        let bidder = cols.get(&rec, 2);
        if unit.is_empty() || bidder.is_empty() {
            return Err(malformed(line, "unit_id and bidder_id must be non-empty"));
        }
        offers.push(IncrementalOffer {
            hour: parse_hour(cols.get(&rec, 0), line)?,
            unit_id: UnitId::new(unit),
            bidder_id: BidderId::new(bidder),
            segment,
            price: parse_f64(cols.get(&rec, 4), OFFERS_COLUMNS[4], line)?,
            quantity: parse_nonneg(cols.get(&rec, 5), OFFERS_COLUMNS[5], line)?,
            status: cols.get(&rec, 6).parse().map_err(|e: String| malformed(line, e))?,
            max_output: parse_nonneg(cols.get(&rec, 7), OFFERS_COLUMNS[7], line)?,
        });
    }
    offers.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    check_steps(&offers, segment_cap)?;
    Ok(offers)
}

/// Checks step-function invariants on offers sorted by `(hour, unit_id, segment)`.
fn check_steps(offers: &[IncrementalOffer], segment_cap: u8) -> Result<(), DataError> {
    for group in offers.chunk_by(|a, b| a.hour == b.hour && a.unit_id == b.unit_id) {
        for pair in group.windows(2) {
            if pair[0].segment == pair[1].segment {
                return Err(DataError::DuplicateSegment {
                    hour: pair[1].hour,
                    unit_id: pair[1].unit_id.clone(),
                    segment: pair[1].segment,
                });
            }
        }
        if let Some(last) = group.last() {
            if last.segment > segment_cap || group.len() > segment_cap as usize {
                return Err(DataError::SegmentCapExceeded {
                    hour: last.hour,
                    unit_id: last.unit_id.clone(),
                    segment: last.segment,
                    cap: segment_cap,
                });
            }
        }
        if group.windows(2).any(|p| p[1].price < p[0].price) {
            return Err(DataError::NonMonotoneSteps {
                hour: group[0].hour,
                unit_id: group[0].unit_id.clone(),
            });
        }
    }
    Ok(())
}

pub fn load_offers_csv(path: &Path, segment_cap: u8) -> Result<Vec<IncrementalOffer>, DataError> {
    read_offers(open(path)?, segment_cap)
}

pub fn write_offers<W: Write>(w: W, offers: &[IncrementalOffer]) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(OFFERS_COLUMNS).map_err(csv_error)?;
    for o in offers {
        wtr.write_record([
            o.hour.to_string(),
            o.unit_id.to_string(),
            o.bidder_id.to_string(),
            o.segment.to_string(),
            o.price.to_string(),
            o.quantity.to_string(),
            o.status.as_str().to_string(),
            o.max_output.to_string(),
        ])
        .map_err(csv_error)?;
    }
    wtr.flush().map_err(io_error)
}

pub fn write_offers_csv(path: &Path, offers: &[IncrementalOffer]) -> Result<(), DataError> {
    write_offers(create(path)?, offers)
}

/// Reads `market.csv`, returning records sorted by hour with empty area lists.
pub fn read_market<R: Read>(r: R) -> Result<Vec<MarketHourRecord>, DataError> {
    let mut rdr = reader(r);
    let cols = Columns::resolve(
        rdr.headers().map_err(csv_error)?,
        &MARKET_COLUMNS,
        &[DEMAND_COLUMN],
    )?;
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let load = parse_f64(cols.get(&rec, 1), MARKET_COLUMNS[1], line)?;
        if load <= 0.0 {
            return Err(malformed(line, "load_forecast_mwh must be positive"));
        }
        let demand = cols
            .get_optional(&rec, 0)
            .map(|s| parse_nonneg(s, DEMAND_COLUMN, line))
            .transpose()?;
        records.push(MarketHourRecord {
            hour: parse_hour(cols.get(&rec, 0), line)?,
            load_forecast: load,
            reserves: parse_nonneg(cols.get(&rec, 2), MARKET_COLUMNS[2], line)?,
            gas_price: parse_f64(cols.get(&rec, 3), MARKET_COLUMNS[3], line)?,
            demand,
            areas: Vec::new(),
        });
    }
    records.sort_by_key(|r| r.hour);
    if let Some(dup) = records.windows(2).find(|p| p[0].hour == p[1].hour) {
        return Err(DataError::DuplicateHour { hour: dup[0].hour });
    }
    Ok(records)
}

/// Reads `areas.csv` and attaches each row to its market hour.
pub fn read_areas<R: Read>(r: R, market: &mut [MarketHourRecord]) -> Result<(), DataError> {
    let mut rdr = reader(r);
    let cols = Columns::resolve(rdr.headers().map_err(csv_error)?, &AREAS_COLUMNS, &[])?;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let hour = parse_hour(cols.get(&rec, 0), line)?;
        let area_id = cols.get(&rec, 1);
        if area_id.is_empty() {
            return Err(malformed(line, "area_id must be non-empty"));
        }
        let area = AreaRecord {
            area_id: AreaId::new(area_id),
            load: parse_nonneg(cols.get(&rec, 2), AREAS_COLUMNS[2], line)?,
            shadow_price: parse_f64(cols.get(&rec, 3), AREAS_COLUMNS[3], line)?,
            is_excluded: parse_bool(cols.get(&rec, 4), AREAS_COLUMNS[4], line)?,
        };
        let idx = market
            .binary_search_by_key(&hour, |m| m.hour)
            .map_err(|_| DataError::UnknownHour { line, hour })?;
        market[idx].areas.push(area);
    }
    for m in market.iter_mut() {
        m.areas.sort_by(|a, b| a.area_id.cmp(&b.area_id));
    }
    Ok(())
}

pub fn write_market<W: Write>(w: W, market: &[MarketHourRecord]) -> Result<(), DataError> {
    let with_demand = market.iter().any(|m| m.demand.is_some());
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = MARKET_COLUMNS.to_vec();
    if with_demand {
        header.push(DEMAND_COLUMN);
    }
    wtr.write_record(&header).map_err(csv_error)?;
    for m in market {
        let mut row = vec![
            m.hour.to_string(),
            m.load_forecast.to_string(),
            m.reserves.to_string(),
            m.gas_price.to_string(),
        ];
        if with_demand {
            row.push(m.demand.map(|d| d.to_string()).unwrap_or_default());
        }
        wtr.write_record(&row).map_err(csv_error)?;
    }
    wtr.flush().map_err(io_error)
}

pub fn write_areas<W: Write>(w: W, market: &[MarketHourRecord]) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(AREAS_COLUMNS).map_err(csv_error)?;
    for m in market {
        for a in &m.areas {
            wtr.write_record([
                m.hour.to_string(),
                a.area_id.to_string(),
                a.load.to_string(),
                a.shadow_price.to_string(),
                a.is_excluded.to_string(),
            ])
            .map_err(csv_error)?;
        }
    }
    wtr.flush().map_err(io_error)
}

/// Loads `market.csv` and, when given, `areas.csv`.
pub fn load_market_csv(
    market_path: &Path,
    areas_path: Option<&Path>,
) -> Result<Vec<MarketHourRecord>, DataError> {
    let mut market = read_market(open(market_path)?)?;
    if let Some(p) = areas_path {
        read_areas(open(p)?, &mut market)?;
    }
    Ok(market)
}

/// Writes offers.csv, market.csv and areas.csv into `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_offers(create(&dir.join("offers.csv"))?, ds.offers())?;
    write_market(create(&dir.join("market.csv"))?, ds.market())?;
    write_areas(create(&dir.join("areas.csv"))?, ds.market())
}

pub fn load_dataset(
    offers_path: &Path,
    market_path: &Path,
    areas_path: Option<&Path>,
    segment_cap: u8,
) -> Result<Dataset, DataError> {
    let offers = load_offers_csv(offers_path, segment_cap)?;
    let market = load_market_csv(market_path, areas_path)?;
    Ok(Dataset::new(offers, market, segment_cap))
}

/// Offers and market records for one market, indexed by hour.
///
/// Immutable once built; share it freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    offers: Vec<IncrementalOffer>,
    market: Vec<MarketHourRecord>,
    unit_to_bidder: BTreeMap<UnitId, BidderId>,
    segment_cap: u8,
    hour_ranges: Vec<(Hour, usize, usize)>,
}

impl Dataset {
    /// Builds a dataset, deriving the unit-to-bidder map from the offers
    /// (first occurrence wins; conflicts surface in [`validate_dataset`]).
    pub fn new(offers: Vec<IncrementalOffer>, market: Vec<MarketHourRecord>, segment_cap: u8) -> Self {
        let mut unit_to_bidder = BTreeMap::new();
        for o in &offers {
            unit_to_bidder
                .entry(o.unit_id.clone())
                .or_insert_with(|| o.bidder_id.clone());
        }
        Self::from_parts(offers, market, unit_to_bidder, segment_cap)
    }

    pub fn from_parts(
        mut offers: Vec<IncrementalOffer>,
        mut market: Vec<MarketHourRecord>,
        unit_to_bidder: BTreeMap<UnitId, BidderId>,
        segment_cap: u8,
    ) -> Self {
        offers.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        market.sort_by_key(|m| m.hour);
        let mut hour_ranges = Vec::new();
        let mut start = 0;
        for group in offers.chunk_by(|a, b| a.hour == b.hour) {
            hour_ranges.push((group[0].hour, start, start + group.len()));
            start += group.len();
        }
        Dataset {
            offers,
            market,
            unit_to_bidder,
            segment_cap,
            hour_ranges,
        }
    }

    pub fn offers(&self) -> &[IncrementalOffer] {
        &self.offers
    }

    pub fn market(&self) -> &[MarketHourRecord] {
        &self.market
    }

    pub fn unit_to_bidder(&self) -> &BTreeMap<UnitId, BidderId> {
        &self.unit_to_bidder
    }

    pub fn segment_cap(&self) -> u8 {
        self.segment_cap
    }

    pub fn bidder_of(&self, unit: &UnitId) -> Option<&BidderId> {
        self.unit_to_bidder.get(unit)
    }

    /// All offers submitted for `hour`, sorted by unit then segment.
    pub fn offers_at(&self, hour: Hour) -> &[IncrementalOffer] {
        match self.hour_ranges.binary_search_by_key(&hour, |r| r.0) {
            Ok(i) => &self.offers[self.hour_ranges[i].1..self.hour_ranges[i].2],
            Err(_) => &[],
        }
    }

    pub fn market_at(&self, hour: Hour) -> Option<&MarketHourRecord> {
        self.market
            .binary_search_by_key(&hour, |m| m.hour)
            .ok()
            .map(|i| &self.market[i])
    }

    /// Hours that carry a market record, ascending.
    pub fn hours(&self) -> impl Iterator<Item = Hour> + '_ {
        self.market.iter().map(|m| m.hour)
    }

    pub fn unit_ids(&self) -> BTreeSet<&UnitId> {
        self.offers.iter().map(|o| &o.unit_id).collect()
    }

    pub fn bidder_ids(&self) -> BTreeSet<&BidderId> {
        self.unit_to_bidder.values().collect()
    }

    /// Each unit's offers in chronological order.
    pub fn offers_by_unit(&self) -> BTreeMap<&UnitId, Vec<&IncrementalOffer>> {
        let mut map: BTreeMap<&UnitId, Vec<&IncrementalOffer>> = BTreeMap::new();
        for o in &self.offers {
            map.entry(&o.unit_id).or_default().push(o);
        }
        map
    }

    pub fn into_parts(self) -> (Vec<IncrementalOffer>, Vec<MarketHourRecord>, BTreeMap<UnitId, BidderId>, u8) {
        (self.offers, self.market, self.unit_to_bidder, self.segment_cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FindingKind {
    MissingMarketHour,
    MissingBidderMapping,
    ConflictingBidder,
    NonMonotoneSteps,
    SegmentCapExceeded,
    DuplicateSegment,
    InvalidQuantity,
    NonFinitePrice,
    InvalidLoad,
    InvalidReserves,
    InvalidAreaLoad,
    DuplicateHour,
}

/// One invariant violation and where it was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub kind: FindingKind,
    pub location: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}", self.kind, self.location)
    }
}

/// Lists every invariant violation in the dataset; empty iff it is consistent.
pub fn validate_dataset(ds: &Dataset) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut push = |kind, location: String| findings.push(Finding { kind, location });

    for pair in ds.market.windows(2) {
        if pair[0].hour == pair[1].hour {
            push(FindingKind::DuplicateHour, pair[0].hour.to_string());
        }
    }
    for m in &ds.market {
        if !(m.load_forecast > 0.0) || !m.load_forecast.is_finite() {
            push(FindingKind::InvalidLoad, m.hour.to_string());
        }
        if !(m.reserves >= 0.0) || !m.reserves.is_finite() {
            push(FindingKind::InvalidReserves, m.hour.to_string());
        }
        for a in &m.areas {
            if !(a.load >= 0.0) || !a.load.is_finite() {
                push(FindingKind::InvalidAreaLoad, format!("{} area {}", m.hour, a.area_id));
            }
        }
    }

    let mut reported_hours = BTreeSet::new();
    let mut reported_units = BTreeSet::new();
    for o in &ds.offers {
        let loc = || format!("{} unit {} segment {}", o.hour, o.unit_id, o.segment);
        if ds.market_at(o.hour).is_none() && reported_hours.insert(o.hour) {
            push(FindingKind::MissingMarketHour, o.hour.to_string());
        }
        match ds.unit_to_bidder.get(&o.unit_id) {
            None => {
                if reported_units.insert(o.unit_id.clone()) {
                    push(FindingKind::MissingBidderMapping, format!("unit {}", o.unit_id));
                }
            }
            Some(b) if *b != o.bidder_id => push(FindingKind::ConflictingBidder, loc()),
            Some(_) => {}
        }
        if !(o.quantity >= 0.0) || !o.quantity.is_finite() || !(o.max_output >= 0.0) || !o.max_output.is_finite() {
            push(FindingKind::InvalidQuantity, loc());
        }
        if !o.price.is_finite() {
            push(FindingKind::NonFinitePrice, loc());
        }
    }

    for group in ds.offers.chunk_by(|a, b| a.hour == b.hour && a.unit_id == b.unit_id) {
        let loc = format!("{} unit {}", group[0].hour, group[0].unit_id);
        if group.windows(2).any(|p| p[0].segment == p[1].segment) {
            push(FindingKind::DuplicateSegment, loc.clone());
        }
        if group.len() > ds.segment_cap as usize
            || group.iter().any(|o| o.segment == 0 || o.segment > ds.segment_cap)
        {
            push(FindingKind::SegmentCapExceeded, loc.clone());
        }
        if group.windows(2).any(|p| p[1].price < p[0].price) {
            push(FindingKind::NonMonotoneSteps, loc);
        }
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "hour,unit_id,bidder_id,segment,price_usd_per_mwh,quantity_mw,status,max_output_mw\n";

    fn parse(body: &str, cap: u8) -> Result<Vec<IncrementalOffer>, DataError> {
        read_offers(format!("{HEADER}{body}").as_bytes(), cap)
    }

    pub(crate) fn offer(hour: i64, unit: &str, seg: u8, price: f64, qty: f64, status: OfferStatus) -> IncrementalOffer {
        IncrementalOffer {
            hour: Hour::from_epoch_hours(hour),
            unit_id: unit.into(),
            bidder_id: format!("B-{unit}").as_str().into(),
            segment: seg,
            price,
            quantity: qty,
            status,
            max_output: 100.0,
        }
    }

    #[test]
    fn parses_single_row() {
        let offers = parse("2019-06-01T14:00Z,U7,B3,1,25.0,50,ECONOMIC,120\n", 10).unwrap();
        assert_eq!(offers.len(), 1);
        let o = &offers[0];
        assert_eq!(o.hour.to_string(), "2019-06-01T14:00Z");
        assert_eq!(o.unit_id.as_str(), "U7");
        assert_eq!(o.bidder_id.as_str(), "B3");
        assert_eq!(o.segment, 1);
        assert_eq!(o.price, 25.0);
        assert_eq!(o.quantity, 50.0);
        assert_eq!(o.status, OfferStatus::Economic);
        assert_eq!(o.max_output, 120.0);
    }

    #[test]
    fn rejects_decreasing_steps() {
        let err = parse(
            "2019-06-01T14:00Z,U7,B3,1,30,50,ECONOMIC,120\n2019-06-01T14:00Z,U7,B3,2,20,50,ECONOMIC,120\n",
            10,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::NonMonotoneSteps { .. }), "{err}");
    }

    #[test]
    fn rejects_thirteen_segments_under_nyiso_cap() {
        let body: String = (1..=13)
            .map(|s| format!("2019-06-01T14:00Z,U1,B1,{s},{},10,ECONOMIC,200\n", 10 + s))
            .collect();
        let err = parse(&body, SEGMENT_CAP_NYISO).unwrap_err();
        assert!(matches!(err, DataError::SegmentCapExceeded { cap: 12, .. }), "{err}");
        let body12: String = (1..=12)
            .map(|s| format!("2019-06-01T14:00Z,U1,B1,{s},{},10,ECONOMIC,200\n", 10 + s))
            .collect();
        assert_eq!(parse(&body12, SEGMENT_CAP_NYISO).unwrap().len(), 12);
    }

    #[test]
    fn rejects_duplicate_segment() {
        let err = parse(
            "2019-06-01T14:00Z,U7,B3,1,30,50,ECONOMIC,120\n2019-06-01T14:00Z,U7,B3,1,30,50,ECONOMIC,120\n",
            10,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::DuplicateSegment { segment: 1, .. }));
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let err = parse(
            "2019-06-01T14:00Z,U7,B3,1,25,50,ECONOMIC,120\n2019-06-01T14:00Z,U8,B3,1,abc,50,ECONOMIC,120\n",
            10,
        )
        .unwrap_err();
        match err {
            DataError::MalformedRow { line, reason } => {
                assert_eq!(line, 3);
                assert!(reason.contains("price_usd_per_mwh"));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(
            parse("2019-06-01T14:30Z,U7,B3,1,25,50,ECONOMIC,120\n", 10),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
        assert!(matches!(
            parse("2019-06-01T14:00+01:00,U7,B3,1,25,50,ECONOMIC,120\n", 10),
            Err(DataError::MalformedRow { .. })
        ));
        assert!(matches!(
            parse("2019-06-01T14:00Z,U7,B3,1,25,-5,ECONOMIC,120\n", 10),
            Err(DataError::MalformedRow { .. })
        ));
    }

    #[test]
    fn header_order_is_free() {
        let csv = "unit_id,hour,segment,bidder_id,status,price_usd_per_mwh,max_output_mw,quantity_mw\nU1,2019-01-01T00:00Z,1,B1,MUST_RUN,5,20,10\n";
        let offers = read_offers(csv.as_bytes(), 10).unwrap();
        assert_eq!(offers[0].status, OfferStatus::MustRun);
        assert_eq!(offers[0].quantity, 10.0);
        assert_eq!(offers[0].max_output, 20.0);
    }

    #[test]
    fn hour_accepts_rfc3339_utc() {
        let a: Hour = "2019-06-01T14:00:00Z".parse().unwrap();
        let b: Hour = "2019-06-01T14:00Z".parse().unwrap();
        let c: Hour = "2019-06-01T14:00:00+00:00".parse().unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.next().to_string(), "2019-06-01T15:00Z");
    }

    #[test]
    fn max_economic_bid_cases() {
        let all = [
            offer(0, "U", 1, 10.0, 1.0, OfferStatus::Economic),
            offer(0, "U", 2, 40.0, 1.0, OfferStatus::Economic),
            offer(0, "U", 3, 90.0, 1.0, OfferStatus::Economic),
        ];
        assert_eq!(max_economic_bid(&all), Some(90.0));
        let mixed = [
            offer(0, "U", 1, 10.0, 1.0, OfferStatus::Economic),
            offer(0, "U", 2, 500.0, 1.0, OfferStatus::Unavailable),
        ];
        assert_eq!(max_economic_bid(&mixed), Some(10.0));
        let none = [offer(0, "U", 1, 10.0, 1.0, OfferStatus::Unavailable)];
        assert_eq!(max_economic_bid(&none), None);
        let must_run = [
            offer(0, "U", 1, 10.0, 1.0, OfferStatus::Economic),
            offer(0, "U", 2, 70.0, 1.0, OfferStatus::MustRun),
        ];
        assert_eq!(max_economic_bid(&must_run), Some(10.0));
    }

    fn toy_dataset() -> Dataset {
        let offers = vec![
            offer(0, "U1", 1, 10.0, 5.0, OfferStatus::Economic),
            offer(0, "U2", 1, 20.0, 5.0, OfferStatus::Economic),
            offer(1, "U1", 1, 11.0, 5.0, OfferStatus::Economic),
        ];
        let market = vec![
            MarketHourRecord::new(Hour::from_epoch_hours(0), 8.0, 1.0, 3.0),
            MarketHourRecord::new(Hour::from_epoch_hours(1), 8.0, 1.0, 3.0),
        ];
        Dataset::new(offers, market, 10)
    }

    #[test]
    fn consistent_dataset_has_no_findings() {
        assert!(validate_dataset(&toy_dataset()).is_empty());
    }

    #[test]
    fn missing_market_hour_is_one_finding() {
        let (mut offers, market, map, cap) = toy_dataset().into_parts();
        offers.push(offer(7, "U1", 1, 10.0, 5.0, OfferStatus::Economic));
        offers.push(offer(7, "U2", 1, 10.0, 5.0, OfferStatus::Economic));
        let findings = validate_dataset(&Dataset::from_parts(offers, market, map, cap));
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].kind, FindingKind::MissingMarketHour);
    }

    #[test]
    fn unmapped_unit_is_one_finding() {
        let (offers, market, mut map, cap) = toy_dataset().into_parts();
        map.remove(&UnitId::from("U2"));
        let findings = validate_dataset(&Dataset::from_parts(offers, market, map, cap));
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].kind, FindingKind::MissingBidderMapping);
        assert!(findings[0].location.contains("U2"));
    }

    #[test]
    fn market_and_areas_parse() {
        let mut market = read_market(
            "hour,load_forecast_mwh,reserves_mwh,gas_price_usd_per_mmbtu\n2019-01-01T01:00Z,900,50,2.5\n2019-01-01T00:00Z,1000,100,2.5\n"
                .as_bytes(),
        )
        .unwrap();
        assert_eq!(market[0].hour.to_string(), "2019-01-01T00:00Z");
        read_areas(
            "hour,area_id,load_mwh,shadow_price_usd_per_mwh,is_excluded\n2019-01-01T00:00Z,NYC,500,9,true\n2019-01-01T00:00Z,CAP,200,1.5,false\n"
                .as_bytes(),
            &mut market,
        )
        .unwrap();
        assert_eq!(market[0].areas.len(), 2);
        assert_eq!(market[0].areas[0].area_id.as_str(), "CAP");
        assert!(market[0].areas[1].is_excluded);
        assert_eq!(market[0].demand(), 1000.0);
        let err = read_areas(
            "hour,area_id,load_mwh,shadow_price_usd_per_mwh,is_excluded\n2019-02-01T00:00Z,CAP,200,1.5,false\n".as_bytes(),
            &mut market,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::UnknownHour { line: 2, .. }));
    }

    #[test]
    fn duplicate_market_hour_rejected() {
        let err = read_market(
            "hour,load_forecast_mwh,reserves_mwh,gas_price_usd_per_mmbtu\n2019-01-01T00:00Z,900,50,2.5\n2019-01-01T00:00Z,1000,100,2.5\n"
                .as_bytes(),
        )
        .unwrap_err();
        assert!(matches!(err, DataError::DuplicateHour { .. }));
    }
}
