//! Counterfactual mitigation scenarios over a year of hours, with price and
//! buyer-surplus accounting.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::clearing::clear;
use crate::data::{Dataset, Hour};
use crate::exec::Execution;
use crate::indices::{score_series, IndexError, MustTakeRule, ScoreKind, ScoreSeries};
use crate::numeric::{compensated_sum, CompensatedSum};
use crate::reference::{ReferenceConfig, ReferenceTable};
use crate::screening::{screen_hour, AmpConfig, HourInputs, HourScores, ScreeningError, ScreeningOutcome};

/// Named threshold sets: the current rules and four tightened variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Preset {
    Baseline,
    LowerConduct,
    LowerImpact,
    LowerBoth,
    NoPivotality,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Baseline,
        Preset::LowerConduct,
        Preset::LowerImpact,
        Preset::LowerBoth,
        Preset::NoPivotality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::LowerConduct => "lower-conduct",
            Preset::LowerImpact => "lower-impact",
            Preset::LowerBoth => "lower-both",
            Preset::NoPivotality => "no-pivotality",
        }
    }

    pub fn config(self) -> AmpConfig {
        let base = AmpConfig::default();
        match self {
            Preset::Baseline => base,
            Preset::LowerConduct => AmpConfig {
                conduct_abs: 50.0,
                conduct_pct: 1.5,
                ..base
            },
            Preset::LowerImpact => AmpConfig {
                impact_abs: 50.0,
                impact_pct: 1.5,
                ..base
            },
            Preset::LowerBoth => AmpConfig {
                conduct_abs: 75.0,
                conduct_pct: 2.0,
                impact_abs: 90.0,
                impact_pct: 1.75,
                ..base
            },
            Preset::NoPivotality => {
                let mut cfg = base;
                cfg.structural.enabled = false;
                cfg
            }
        }
    }
}

impl FromStr for Preset {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ScenarioError::UnknownPreset(s.to_string()))
    }
}

#[derive(Debug)]
pub enum ScenarioError {
    Screening(ScreeningError),
    Index(IndexError),
    MismatchedRuns,
    UnknownPreset(String),
    MalformedFilter(String),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Screening(e) => write!(f, "{e}"),
            ScenarioError::Index(e) => write!(f, "{e}"),
            ScenarioError::MismatchedRuns => write!(f, "scenario runs cover different hours"),
            ScenarioError::UnknownPreset(p) => write!(
                f,
                "unknown preset `{p}` (expected one of: {})",
                Preset::ALL.map(Preset::name).join(", ")
            ),
            ScenarioError::MalformedFilter(msg) => write!(f, "hour filter: {msg}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

impl From<ScreeningError> for ScenarioError {
    fn from(e: ScreeningError) -> Self {
        ScenarioError::Screening(e)
    }
}

impl From<IndexError> for ScenarioError {
    fn from(e: IndexError) -> Self {
        ScenarioError::Index(e)
    }
}

/// Hours left out of a simulation (e.g. historically mitigated or congested).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HourFilter {
    pub excluded: BTreeSet<Hour>,
}

impl HourFilter {
    pub fn includes(&self, hour: Hour) -> bool {
        !self.excluded.contains(&hour)
    }

    /// Reads a CSV with an `hour` column.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, ScenarioError> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers().map_err(|e| ScenarioError::MalformedFilter(e.to_string()))?;
        let col = headers
            .iter()
            .position(|h| h.trim() == "hour")
            .ok_or_else(|| ScenarioError::MalformedFilter("missing `hour` column".into()))?;
        let mut excluded = BTreeSet::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| ScenarioError::MalformedFilter(e.to_string()))?;
            let cell = rec.get(col).unwrap_or("").trim();
            let hour = cell
                .parse()
                .map_err(|e| ScenarioError::MalformedFilter(format!("{e}")))?;
            excluded.insert(hour);
        }
        Ok(HourFilter { excluded })
    }
}

/// Reference levels and structural scores shared by every scenario run on
/// one dataset.
#[derive(Debug, Clone)]
pub struct ScenarioInputs {
    pub references: ReferenceTable,
    pub scores: ScoreSeries,
}

impl ScenarioInputs {
    pub fn prepare(
        ds: &Dataset,
        ref_cfg: &ReferenceConfig,
        kind: ScoreKind,
        must_take: MustTakeRule,
        exec: Execution,
    ) -> Result<Self, ScenarioError> {
        Ok(ScenarioInputs {
            references: ReferenceTable::build(ds, ref_cfg, exec),
            scores: score_series(ds, kind, must_take)?,
        })
    }

    pub fn hour_scores(&self, hour: Hour) -> HourScores {
        let mut scores = HourScores::default();
        for p in self.scores.at_hour(hour) {
            match &p.bidder_id {
                Some(b) => {
                    scores.by_bidder.insert(b.clone(), p.value);
                }
                None => scores.market = Some(p.value),
            }
        }
        scores
    }
}

/// Screens every included hour that has offers. Output is in hour order.
pub fn screen_dataset(
    ds: &Dataset,
    inputs: &ScenarioInputs,
    cfg: &AmpConfig,
    filter: &HourFilter,
    exec: Execution,
) -> Result<Vec<ScreeningOutcome>, ScenarioError> {
    cfg.validate()?;
    let hours: Vec<Hour> = ds.hours().filter(|h| filter.includes(*h)).collect();
    exec.map(&hours, |&hour| {
        let load = ds.market_at(hour).map(|m| m.load_forecast).unwrap_or(f64::NAN);
        let references = inputs.references.at_hour(hour);
        let scores = inputs.hour_scores(hour);
        let hour_inputs = HourInputs {
            hour,
            offers: ds.offers_at(hour),
            references: &references,
            scores: &scores,
        };
        screen_hour(hour_inputs, |o| clear(o, load), cfg)
    })
    .into_iter()
    .map(|r| r.map_err(ScenarioError::from))
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HourResult {
    pub hour: Hour,
    /// Unmitigated clearing price.
    pub p_star: f64,
    /// Price in force after mitigation (equals `p_star` when not mitigated).
    pub p_mitigated: f64,
    pub mitigated: bool,
    /// MWh used for surplus.
    pub demand: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub name: String,
    pub config: AmpConfig,
    pub hours: Vec<HourResult>,
    pub mitigated_hours: Vec<Hour>,
    pub included_hours: usize,
    pub excluded_hours: usize,
    /// Mean price in force over included hours.
    pub avg_clearing_price: Option<f64>,
    /// Mean `P* - Pm` over mitigated hours; `None` when nothing was mitigated.
    pub avg_price_decrease: Option<f64>,
    /// Sum over mitigated hours of `D * (P* - Pm)`, compensated.
    pub total_surplus_increase: f64,
    /// `total_surplus_increase / |M|`; `None` when nothing was mitigated.
    pub per_hour_surplus: Option<f64>,
}

impl ScenarioReport {
    pub fn from_outcomes(
        name: &str,
        config: AmpConfig,
        ds: &Dataset,
        outcomes: &[ScreeningOutcome],
        excluded_hours: usize,
    ) -> Self {
        let hours: Vec<HourResult> = outcomes
            .iter()
            .map(|o| HourResult {
                hour: o.hour,
                p_star: o.original_price,
                p_mitigated: o.mitigated_price,
                mitigated: o.mitigated,
                demand: ds.market_at(o.hour).map_or(f64::NAN, |m| m.demand()),
            })
            .collect();
        let mitigated: Vec<&HourResult> = hours.iter().filter(|h| h.mitigated).collect();
        let n_m = mitigated.len();
        let total_surplus_increase = compensated_sum(mitigated.iter().map(|h| h.demand * (h.p_star - h.p_mitigated)));
        let avg_clearing_price =
            (!hours.is_empty()).then(|| compensated_sum(hours.iter().map(|h| h.p_mitigated)) / hours.len() as f64);
        let avg_price_decrease =
            (n_m > 0).then(|| compensated_sum(mitigated.iter().map(|h| h.p_star - h.p_mitigated)) / n_m as f64);
        ScenarioReport {
            name: name.to_string(),
            config,
            mitigated_hours: mitigated.iter().map(|h| h.hour).collect(),
            included_hours: hours.len(),
            excluded_hours,
            avg_clearing_price,
            avg_price_decrease,
            per_hour_surplus: (n_m > 0).then(|| total_surplus_increase / n_m as f64),
            total_surplus_increase,
            hours,
        }
    }

    pub fn n_mitigated(&self) -> usize {
        self.mitigated_hours.len()
    }

    /// Writes `hour,p_star,p_mitigated,mitigated_flag`.
    pub fn write_hours_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["hour", "p_star", "p_mitigated", "mitigated_flag"])?;
        for h in &self.hours {
            wtr.write_record([
                h.hour.to_string(),
                h.p_star.to_string(),
                h.p_mitigated.to_string(),
                u8::from(h.mitigated).to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per report; undefined averages are empty cells.
pub fn write_report_csv<W: Write>(w: W, reports: &[ScenarioReport]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "scenario",
        "included_hours",
        "excluded_hours",
        "mitigated_hours",
        "avg_clearing_price",
        "avg_price_decrease",
        "total_surplus_increase",
        "per_hour_surplus",
    ])?;
    for r in reports {
        wtr.write_record([
            r.name.clone(),
            r.included_hours.to_string(),
            r.excluded_hours.to_string(),
            r.n_mitigated().to_string(),
            opt(r.avg_clearing_price),
            opt(r.avg_price_decrease),
            r.total_surplus_increase.to_string(),
            opt(r.per_hour_surplus),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Runs one scenario end to end using precomputed inputs.
pub fn run_scenario_with(
    ds: &Dataset,
    inputs: &ScenarioInputs,
    name: &str,
    cfg: &AmpConfig,
    filter: &HourFilter,
    exec: Execution,
) -> Result<ScenarioReport, ScenarioError> {
    let outcomes = screen_dataset(ds, inputs, cfg, filter, exec)?;
    let excluded = ds.hours().filter(|h| !filter.includes(*h)).count();
    Ok(ScenarioReport::from_outcomes(name, *cfg, ds, &outcomes, excluded))
}

/// Runs one scenario with default reference settings and the score kind named
/// in `cfg`.
pub fn run_scenario(
    ds: &Dataset,
    name: &str,
    cfg: &AmpConfig,
    filter: &HourFilter,
    exec: Execution,
) -> Result<ScenarioReport, ScenarioError> {
    let inputs = ScenarioInputs::prepare(
        ds,
        &ReferenceConfig::default(),
        cfg.structural.kind,
        MustTakeRule::default(),
        exec,
    )?;
    run_scenario_with(ds, &inputs, name, cfg, filter, exec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDelta {
    pub baseline: String,
    pub alternative: String,
    pub mitigated_hours: i64,
    pub avg_clearing_price: f64,
    pub total_surplus_increase: f64,
    /// Alternative's surplus per mitigated hour.
    pub per_mitigated_hour_surplus: Option<f64>,
}

/// Differences `alt - baseline`; both runs must cover the same hours.
pub fn compare_scenarios(baseline: &ScenarioReport, alt: &ScenarioReport) -> Result<ScenarioDelta, ScenarioError> {
    let same_hours = baseline.hours.len() == alt.hours.len()
        && baseline.hours.iter().zip(&alt.hours).all(|(a, b)| a.hour == b.hour)
        && baseline.excluded_hours == alt.excluded_hours;
    if !same_hours {
        return Err(ScenarioError::MismatchedRuns);
    }
    let n_alt = alt.n_mitigated();
    Ok(ScenarioDelta {
        baseline: baseline.name.clone(),
        alternative: alt.name.clone(),
        mitigated_hours: n_alt as i64 - baseline.n_mitigated() as i64,
        avg_clearing_price: alt.avg_clearing_price.unwrap_or(0.0) - baseline.avg_clearing_price.unwrap_or(0.0),
        total_surplus_increase: alt.total_surplus_increase - baseline.total_surplus_increase,
        per_mitigated_hour_surplus: (n_alt > 0).then(|| alt.total_surplus_increase / n_alt as f64),
    })
}

pub fn write_deltas_csv<W: Write>(w: W, deltas: &[ScenarioDelta]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "baseline",
        "scenario",
        "delta_mitigated_hours",
        "delta_avg_clearing_price",
        "delta_total_surplus",
        "surplus_per_mitigated_hour",
    ])?;
    for d in deltas {
        wtr.write_record([
            d.baseline.clone(),
            d.alternative.clone(),
            d.mitigated_hours.to_string(),
            d.avg_clearing_price.to_string(),
            d.total_surplus_increase.to_string(),
            opt(d.per_mitigated_hour_surplus),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Sum of per-hour price differences `alt - baseline` over their common hours.
pub fn total_price_difference(baseline: &ScenarioReport, alt: &ScenarioReport) -> f64 {
    let mut s = CompensatedSum::new();
    for (a, b) in baseline.hours.iter().zip(&alt.hours) {
        s.add(b.p_mitigated - a.p_mitigated);
    }
    s.value()
}
