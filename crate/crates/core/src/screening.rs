//! The three-step automated mitigation procedure: structural test, conduct
//! test against reference-based thresholds, and impact test on the re-cleared
//! price.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use crate::clearing::{ClearingError, ClearingResult};
use crate::data::{max_economic_bid, BidderId, Hour, IncrementalOffer, UnitId};
use crate::indices::{ScoreKind, TreatedSide};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructuralTest {
    pub kind: ScoreKind,
    pub cutoff: f64,
    pub side: TreatedSide,
    pub enabled: bool,
}

impl StructuralTest {
    pub fn for_kind(kind: ScoreKind) -> Self {
        StructuralTest {
            kind,
            cutoff: kind.default_cutoff(),
            side: kind.treated_side(),
            enabled: true,
        }
    }

    pub fn fails(&self, score: f64) -> bool {
        self.side.is_treated(score, self.cutoff)
    }
}

/// Base of the percentage impact tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImpactBase {
    #[default]
    Mitigated,
    Unmitigated,
}

/// Area-level conduct tolerance for congestion-screened markets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaConductRule {
    pub pct: f64,
    pub hours_per_year: f64,
    /// 12-month average price of the area, $/MWh.
    pub avg_price: f64,
    pub constrained_hours: f64,
    /// Unit-specific tolerance, used when lower than the area tolerance.
    pub unit_threshold: Option<f64>,
}

impl AreaConductRule {
    pub fn new(avg_price: f64, constrained_hours: f64) -> Self {
        AreaConductRule {
            pct: 0.02,
            hours_per_year: 8760.0,
            avg_price,
            constrained_hours,
            unit_threshold: None,
        }
    }
}

/// Mitigation thresholds for one scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmpConfig {
    pub structural: StructuralTest,
    /// $/MWh
    pub conduct_abs: f64,
    /// Fraction of the reference level (3.0 = a 300% increase).
    pub conduct_pct: f64,
    /// $/MWh
    pub impact_abs: f64,
    /// Fraction of the impact base price.
    pub impact_pct: f64,
    pub impact_base: ImpactBase,
    /// When set, replaces the reference-proportional conduct tolerance.
    pub area_rule: Option<AreaConductRule>,
}

impl Default for AmpConfig {
    fn default() -> Self {
        AmpConfig {
            structural: StructuralTest::for_kind(ScoreKind::Rsi),
            conduct_abs: 100.0,
            conduct_pct: 3.0,
            impact_abs: 100.0,
            impact_pct: 2.0,
            impact_base: ImpactBase::Mitigated,
            area_rule: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScreeningError {
    MissingReference,
    InvalidReference(f64),
    InvalidHours(f64),
    InvalidPrice(f64),
    InvalidConfig(String),
    Clearing { hour: Hour, source: ClearingError },
}

impl fmt::Display for ScreeningError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScreeningError::MissingReference => write!(f, "unit has no reference level"),
            ScreeningError::InvalidReference(r) => write!(f, "reference level must be non-negative, got {r}"),
            ScreeningError::InvalidHours(h) => write!(f, "constrained hours must be at least 1, got {h}"),
            ScreeningError::InvalidPrice(p) => write!(f, "average price must be positive, got {p}"),
            ScreeningError::InvalidConfig(msg) => write!(f, "invalid mitigation config: {msg}"),
            ScreeningError::Clearing { hour, source } => write!(f, "clearing {hour}: {source}"),
        }
    }
}

impl std::error::Error for ScreeningError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ScreeningError::Clearing { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl AmpConfig {
    pub fn validate(&self) -> Result<(), ScreeningError> {
        let positive = [
            ("conduct_abs", self.conduct_abs),
            ("conduct_pct", self.conduct_pct),
            ("impact_abs", self.impact_abs),
            ("impact_pct", self.impact_pct),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ScreeningError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.structural.cutoff.is_finite() {
            return Err(ScreeningError::InvalidConfig("structural cutoff must be finite".into()));
        }
        Ok(())
    }

    /// Conduct threshold for a unit with reference level `reference`.
    pub fn conduct_threshold(&self, reference: Option<f64>) -> Result<f64, ScreeningError> {
        match &self.area_rule {
            None => conduct_threshold_isone(reference, self),
            Some(rule) => {
                let r = checked_reference(reference)?;
                let tolerance = conduct_threshold_nyiso_with(rule)?;
                Ok(r + tolerance)
            }
        }
    }
}

fn checked_reference(reference: Option<f64>) -> Result<f64, ScreeningError> {
    let r = reference.ok_or(ScreeningError::MissingReference)?;
    if !(r >= 0.0) || !r.is_finite() {
        return Err(ScreeningError::InvalidReference(r));
    }
    Ok(r)
}

/// `ref + min(conduct_abs, conduct_pct * ref)`.
pub fn conduct_threshold_isone(reference: Option<f64>, cfg: &AmpConfig) -> Result<f64, ScreeningError> {
    let r = checked_reference(reference)?;
    Ok(r + cfg.conduct_abs.min(cfg.conduct_pct * r))
}

/// Area tolerance `2% * avg_price * 8760 / constrained_hours`, capped by the
/// unit-specific threshold when one is given.
pub fn conduct_threshold_nyiso(
    avg_price: f64,
    constrained_hours: f64,
    unit_threshold: Option<f64>,
) -> Result<f64, ScreeningError> {
    conduct_threshold_nyiso_with(&AreaConductRule {
        unit_threshold,
        ..AreaConductRule::new(avg_price, constrained_hours)
    })
}

fn conduct_threshold_nyiso_with(rule: &AreaConductRule) -> Result<f64, ScreeningError> {
    if !(rule.constrained_hours >= 1.0) || !rule.constrained_hours.is_finite() {
        return Err(ScreeningError::InvalidHours(rule.constrained_hours));
    }
    if !(rule.avg_price > 0.0) || !rule.avg_price.is_finite() {
        return Err(ScreeningError::InvalidPrice(rule.avg_price));
    }
    let area = rule.pct * rule.avg_price * rule.hours_per_year / rule.constrained_hours;
    Ok(match rule.unit_threshold {
        Some(u) => area.min(u),
        None => area,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn failed(self) -> bool {
        self == Verdict::Fail
    }
}

/// Fails iff the maximum bid is strictly above the threshold.
pub fn conduct_test(max_bid: f64, threshold: f64) -> Verdict {
    if max_bid > threshold {
        Verdict::Fail
    } else {
        Verdict::Pass
    }
}

/// Fails (mitigation applies) iff the price gap exceeds
/// `min(impact_abs, impact_pct * base)`.
pub fn impact_test(unmitigated_price: f64, mitigated_price: f64, cfg: &AmpConfig) -> Verdict {
    let base = match cfg.impact_base {
        ImpactBase::Mitigated => mitigated_price,
        ImpactBase::Unmitigated => unmitigated_price,
    };
    let tolerance = cfg.impact_abs.min(cfg.impact_pct * base);
    if unmitigated_price - mitigated_price > tolerance {
        Verdict::Fail
    } else {
        Verdict::Pass
    }
}

/// Structural scores available at one hour.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HourScores {
    /// Market-wide score, used for bidders without their own.
    pub market: Option<f64>,
    pub by_bidder: BTreeMap<BidderId, f64>,
}

impl HourScores {
    pub fn market(score: f64) -> Self {
        HourScores {
            market: Some(score),
            by_bidder: BTreeMap::new(),
        }
    }

    pub fn score_for(&self, bidder: &BidderId) -> Option<f64> {
        self.by_bidder.get(bidder).copied().or(self.market)
    }
}

/// Everything the pipeline needs for one hour.
#[derive(Debug, Clone, Copy)]
pub struct HourInputs<'a> {
    pub hour: Hour,
    /// Offers at the hour, sorted by unit then segment.
    pub offers: &'a [IncrementalOffer],
    pub references: &'a BTreeMap<UnitId, f64>,
    pub scores: &'a HourScores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreeningOutcome {
    pub hour: Hour,
    /// True when any bidder fails the structural test, or when the test is
    /// disabled and screening is always active.
    pub structural_failed: bool,
    pub conduct_failures: BTreeSet<UnitId>,
    pub impact_failed: bool,
    pub mitigated: bool,
    pub original_price: f64,
    pub mitigated_price: f64,
    /// The rewritten stack; present only when mitigation was applied.
    pub mitigated_offers: Option<Vec<IncrementalOffer>>,
}

/// Caps every segment of the listed units at their reference level.
pub fn mitigate_stack(
    offers: &[IncrementalOffer],
    failing: &BTreeSet<UnitId>,
    references: &BTreeMap<UnitId, f64>,
) -> Vec<IncrementalOffer> {
    offers
        .iter()
        .map(|o| {
            let mut o = o.clone();
            if failing.contains(&o.unit_id) {
                if let Some(&r) = references.get(&o.unit_id) {
                    o.price = o.price.min(r);
                }
            }
            o
        })
        .collect()
}

/// Runs structural, conduct and impact tests for one hour.
///
/// `clear` maps a bid stack to its clearing result for this hour's load.
pub fn screen_hour<F>(inputs: HourInputs<'_>, clear: F, cfg: &AmpConfig) -> Result<ScreeningOutcome, ScreeningError>
where
    F: Fn(&[IncrementalOffer]) -> Result<ClearingResult, ClearingError>,
{
    let hour = inputs.hour;
    let clearing_err = |source| ScreeningError::Clearing { hour, source };
    let original = clear(inputs.offers).map_err(clearing_err)?;
    let mut outcome = ScreeningOutcome {
        hour,
        structural_failed: false,
        conduct_failures: BTreeSet::new(),
        impact_failed: false,
        mitigated: false,
        original_price: original.clearing_price,
        mitigated_price: original.clearing_price,
        mitigated_offers: None,
    };

    let screened = |bidder: &BidderId| -> bool {
        if !cfg.structural.enabled {
            return true;
        }
        inputs
            .scores
            .score_for(bidder)
            .is_some_and(|s| cfg.structural.fails(s))
    };

    for unit in inputs.offers.chunk_by(|a, b| a.unit_id == b.unit_id) {
        let head = &unit[0];
        if !screened(&head.bidder_id) {
            continue;
        }
        outcome.structural_failed = true;
        let Some(&reference) = inputs.references.get(&head.unit_id) else {
            continue;
        };
        let Some(max_bid) = max_economic_bid(unit) else {
            continue;
        };
        let threshold = cfg.conduct_threshold(Some(reference))?;
        if conduct_test(max_bid, threshold).failed() {
            outcome.conduct_failures.insert(head.unit_id.clone());
        }
    }
    if !cfg.structural.enabled {
        outcome.structural_failed = true;
    }
    if outcome.conduct_failures.is_empty() {
        return Ok(outcome);
    }

    let stack = mitigate_stack(inputs.offers, &outcome.conduct_failures, inputs.references);
    let recleared = clear(&stack).map_err(clearing_err)?;
    if impact_test(original.clearing_price, recleared.clearing_price, cfg).failed() {
        outcome.impact_failed = true;
        outcome.mitigated = true;
        outcome.mitigated_price = recleared.clearing_price;
        outcome.mitigated_offers = Some(stack);
    }
    Ok(outcome)
}

/// Writes `hour,structural_failed,n_conduct_failures,impact_failed,mitigated,original_price,mitigated_price`.
pub fn write_screening_csv<W: Write>(w: W, outcomes: &[ScreeningOutcome]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "hour",
        "structural_failed",
        "n_conduct_failures",
        "impact_failed",
        "mitigated",
        "original_price",
        "mitigated_price",
    ])?;
    for o in outcomes {
        wtr.write_record([
            o.hour.to_string(),
            o.structural_failed.to_string(),
            o.conduct_failures.len().to_string(),
            o.impact_failed.to_string(),
            o.mitigated.to_string(),
            o.original_price.to_string(),
            o.mitigated_price.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
