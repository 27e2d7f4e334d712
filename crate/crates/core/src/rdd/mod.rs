//! Sharp and fuzzy regression discontinuity estimation of how screening
//! activation shifts maximum bids.
//!
//! The running variable is centred so that treatment is always `S̃ >= 0`:
//! for a `<=` cutoff (RSI) `S̃ = c - S`, for a `>=` cutoff (congestion)
//! `S̃ = S - c`. The outcome is regressed on treatment, the centred score,
//! their interaction (optionally quadratic terms), the unit's reference level
//! and the gas price, with bidder fixed effects and bidder-clustered
//! standard errors.

mod fit;
mod panel;
mod per_bidder;

use std::fmt;

use statrs::function::erf::erfc;

use crate::data::{BidderId, Hour, UnitId};
use crate::indices::TreatedSide;

pub use fit::{fit_pooled, CoefficientEstimate, RddFit};
pub use panel::{build_panel, read_panel, write_panel, PanelBuild, PANEL_COLUMNS};
pub use per_bidder::{
    fit_per_bidder, write_summary_csv, BidderExclusion, ExclusionReason, ExclusionRule, PerBidderReport,
    PerBidderSummary,
};

/// One unit-hour observation for estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRow {
    pub hour: Hour,
    pub bidder_id: BidderId,
    pub unit_id: UnitId,
    /// Highest economic bid, $/MWh.
    pub p_max: f64,
    /// Raw score.
    pub score: f64,
    /// Centred score; treated iff `>= 0`.
    pub centered: f64,
    pub treated: bool,
    /// Reference level, $/MWh.
    pub reference: f64,
    /// Gas price, $/MMBtu.
    pub gas: f64,
}

/// Centres a score on its cutoff. Boundary scores are treated.
pub fn center_score(score: f64, cutoff: f64, side: TreatedSide) -> (f64, bool) {
    let centered = match side {
        TreatedSide::Leq => cutoff - score,
        TreatedSide::Geq => score - cutoff,
    };
    (centered, side.is_treated(score, cutoff))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Treatment probability `Φ(S̃ / σ)` under Gaussian noise in the score.
pub fn fuzzy_probability(centered: f64, sigma: f64) -> f64 {
    normal_cdf(centered / sigma)
}

/// Smallest `h` such that at least `retain_fraction` of observations have
/// `|S̃| <= h`.
pub fn select_bandwidth(centered: &[f64], retain_fraction: f64) -> Result<f64, RddError> {
    if centered.is_empty() {
        return Err(RddError::EmptyInput);
    }
    if !(retain_fraction > 0.0 && retain_fraction <= 1.0) {
        return Err(RddError::InvalidFraction(retain_fraction));
    }
    let mut abs: Vec<f64> = centered.iter().map(|s| s.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let n = abs.len();
    // k = ceil(retain * n), guarded against products like 0.3 * 10 = 3.0000000000000004
    let target = retain_fraction * n as f64;
    let mut k = target.ceil() as usize;
    if k > 1 && ((k - 1) as f64 - target).abs() <= 1e-9 * target.max(1.0) {
        k -= 1;
    }
    Ok(abs[k.clamp(1, n) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolyOrder {
    #[default]
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Covariance {
    /// CR1 sandwich with bidder clusters, `G - 1` degrees of freedom.
    #[default]
    ClusterBidder,
    /// HC1 heteroskedasticity-robust, `N - K` degrees of freedom.
    Hc1,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RddSpec {
    /// Half-width of the estimation window in score units.
    pub bandwidth: f64,
    pub order: PolyOrder,
    /// Score noise scale σ for the fuzzy design; `None` for sharp.
    pub fuzzy: Option<f64>,
    /// In fuzzy mode, interact the score with the probability (true) or with
    /// the sharp indicator (false).
    pub fuzzy_interaction: bool,
    pub fixed_effects: bool,
    pub covariance: Covariance,
    pub alpha: f64,
}

impl Default for RddSpec {
    fn default() -> Self {
        RddSpec {
            bandwidth: f64::INFINITY,
            order: PolyOrder::Linear,
            fuzzy: None,
            fuzzy_interaction: true,
            fixed_effects: true,
            covariance: Covariance::ClusterBidder,
            alpha: 0.05,
        }
    }
}

impl RddSpec {
    pub fn with_bandwidth(bandwidth: f64) -> Self {
        RddSpec {
            bandwidth,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), RddError> {
        if !(self.bandwidth > 0.0) {
            return Err(RddError::InvalidBandwidth(self.bandwidth));
        }
        if let Some(s) = self.fuzzy {
            if !(s > 0.0) || !s.is_finite() {
                return Err(RddError::InvalidSigma(s));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(RddError::InvalidAlpha(self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RddError {
    EmptyInput,
    EmptySample,
    InvalidFraction(f64),
    InvalidBandwidth(f64),
    InvalidSigma(f64),
    InvalidAlpha(f64),
    TooFewClusters(usize),
    TooFewObservations { n: usize, k: usize },
    RankDeficient(Vec<String>),
    MalformedPanel { line: u64, reason: String },
}

impl fmt::Display for RddError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RddError::EmptyInput => write!(f, "no scores to select a bandwidth from"),
            RddError::EmptySample => write!(f, "no observations inside the bandwidth"),
            RddError::InvalidFraction(x) => write!(f, "retain fraction must lie in (0, 1], got {x}"),
            RddError::InvalidBandwidth(h) => write!(f, "bandwidth must be positive, got {h}"),
            RddError::InvalidSigma(s) => write!(f, "fuzzy sigma must be positive, got {s}"),
            RddError::InvalidAlpha(a) => write!(f, "alpha must lie in (0, 1), got {a}"),
            RddError::TooFewClusters(g) => write!(f, "clustered inference needs at least 2 clusters, got {g}"),
            RddError::TooFewObservations { n, k } => {
                write!(f, "{n} observations cannot identify {k} coefficients")
            }
            RddError::RankDeficient(cols) => write!(f, "design is rank deficient in: {}", cols.join(", ")),
            RddError::MalformedPanel { line, reason } => write!(f, "panel line {line}: {reason}"),
        }
    }
}

impl std::error::Error for RddError {}
