//! Synthetic bid panels from a known data-generating process.
//!
//! Each hour draws a structural margin from a two-part mixture (a normal
//! bump near the cutoff and an exponential tail). For RSI panels the margin
//! is total flexible capacity over load plus reserves, so a firm with supply
//! share `w` has `RSI = m (1 - w)`; for congestion panels the draw is the
//! congestion index itself. Maximum bids then follow
//!
//! ```text
//! p_max = β0 + b_j + τ_j T + β2 S̃ + β3 S̃ T + β4 ref + β5 gas + ε
//! ```
//!
//! and lower segments step down from it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    AreaId, AreaRecord, BidderId, Dataset, Hour, IncrementalOffer, MarketHourRecord, OfferStatus, UnitId,
    SEGMENT_CAP_ISONE,
};
use crate::indices::{ScoreKind, TreatedSide};
use crate::rdd::{center_score, normal_cdf, ObservationRow};

/// 2019-01-01T00:00Z.
pub const DEFAULT_START: i64 = 429_528;

/// Two-part score mixture: `N(near_mean, near_sd)` with probability
/// `near_weight`, otherwise `tail_origin ± Exp(mean tail_scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreMixture {
    pub near_weight: f64,
    pub near_mean: f64,
    pub near_sd: f64,
    pub tail_origin: f64,
    pub tail_scale: f64,
    /// Tail extends upward from its origin when true.
    pub tail_up: bool,
    /// Draws below this are rejected.
    pub floor: Option<f64>,
}

impl Default for ScoreMixture {
    fn default() -> Self {
        ScoreMixture::rsi()
    }
}

impl ScoreMixture {
    /// Capacity-margin mixture giving about 12% treated bidder-hours with 40
    /// equal firms at cutoff 1.
    pub fn rsi() -> Self {
        ScoreMixture {
            near_weight: 0.24,
            near_mean: 0.98,
            near_sd: 0.06,
            tail_origin: 1.12,
            tail_scale: 0.6,
            tail_up: true,
            floor: Some(0.95),
        }
    }

    /// Congestion index mixture: mostly near zero with a long upper tail.
    pub fn congestion() -> Self {
        ScoreMixture {
            near_weight: 0.85,
            near_mean: 0.0,
            near_sd: 0.03,
            tail_origin: 0.0,
            tail_scale: 2.0,
            tail_up: true,
            floor: None,
        }
    }

    fn raw_cdf(&self, x: f64) -> f64 {
        let near = normal_cdf((x - self.near_mean) / self.near_sd);
        let tail = if self.tail_up {
            if x < self.tail_origin {
                0.0
            } else {
                1.0 - (-(x - self.tail_origin) / self.tail_scale).exp()
            }
        } else if x > self.tail_origin {
            1.0
        } else {
            (-(self.tail_origin - x) / self.tail_scale).exp()
        };
        self.near_weight * near + (1.0 - self.near_weight) * tail
    }

    /// CDF after truncation at the floor.
    pub fn cdf(&self, x: f64) -> f64 {
        match self.floor {
            None => self.raw_cdf(x),
            Some(f) if x < f => 0.0,
            Some(f) => {
                let lo = self.raw_cdf(f);
                (self.raw_cdf(x) - lo) / (1.0 - lo)
            }
        }
    }

    /// Probability mass kept after truncation.
    pub fn retained_mass(&self) -> f64 {
        self.floor.map_or(1.0, |f| 1.0 - self.raw_cdf(f))
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        let near = Normal::new(self.near_mean, self.near_sd).expect("validated");
        let tail = Exp::new(1.0 / self.tail_scale).expect("validated");
        loop {
            let x = if rng.random::<f64>() < self.near_weight {
                near.sample(rng)
            } else if self.tail_up {
                self.tail_origin + tail.sample(rng)
            } else {
                self.tail_origin - tail.sample(rng)
            };
            if self.floor.is_none_or(|f| x >= f) {
                return x;
            }
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let ok = (0.0..=1.0).contains(&self.near_weight)
            && self.near_sd > 0.0
            && self.tail_scale > 0.0
            && self.near_mean.is_finite()
            && self.tail_origin.is_finite();
        if !ok {
            return Err(SynthError::InvalidSpec("score mixture parameters out of range".into()));
        }
        if self.retained_mass() < 1e-3 {
            return Err(SynthError::InvalidSpec("score floor rejects nearly all draws".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_bidders: usize,
    pub units_per_bidder: usize,
    pub n_hours: usize,
    /// First hour, in hours since the Unix epoch.
    pub start: i64,
    pub score_kind: ScoreKind,
    /// Defaults to the score kind's cutoff.
    pub cutoff: Option<f64>,
    /// Defaults to the score kind's mixture.
    pub score: Option<ScoreMixture>,
    /// Supply shares per bidder; equal when empty.
    pub firm_shares: Vec<f64>,
    /// Common treatment effect, $/MWh.
    pub tau: f64,
    /// Per-bidder effects; overrides `tau` when non-empty.
    pub bidder_taus: Vec<f64>,
    pub beta0: f64,
    pub beta_score: f64,
    pub beta_score_treat: f64,
    pub beta_ref: f64,
    pub beta_gas: f64,
    pub noise_sd: f64,
    pub bidder_sd: f64,
    /// Unit reference means are uniform on `[ref_low, ref_high]`.
    pub ref_low: f64,
    pub ref_high: f64,
    pub ref_ar: f64,
    pub ref_sd: f64,
    pub gas_start: f64,
    pub gas_daily_sd: f64,
    pub gas_min: f64,
    pub load_base: f64,
    pub load_sd: f64,
    pub reserve_share: f64,
    /// Capacity over load plus reserves for congestion panels.
    pub congestion_margin: f64,
    pub max_segments: u8,
    pub n_areas: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 1,
            n_bidders: 40,
            units_per_bidder: 1,
            n_hours: 2000,
            start: DEFAULT_START,
            score_kind: ScoreKind::Rsi,
            cutoff: None,
            score: None,
            firm_shares: Vec::new(),
            tau: -5.0,
            bidder_taus: Vec::new(),
            beta0: 5.0,
            beta_score: 10.0,
            beta_score_treat: -20.0,
            beta_ref: 0.9,
            beta_gas: 2.0,
            noise_sd: 5.0,
            bidder_sd: 3.0,
            ref_low: 25.0,
            ref_high: 55.0,
            ref_ar: 0.99,
            ref_sd: 0.5,
            gas_start: 3.0,
            gas_daily_sd: 0.05,
            gas_min: 1.0,
            load_base: 10_000.0,
            load_sd: 0.03,
            reserve_share: 0.1,
            congestion_margin: 1.2,
            max_segments: SEGMENT_CAP_ISONE,
            n_areas: 3,
        }
    }
}

impl SynthSpec {
    pub fn cutoff(&self) -> f64 {
        self.cutoff.unwrap_or(self.score_kind.default_cutoff())
    }

    pub fn side(&self) -> TreatedSide {
        self.score_kind.treated_side()
    }

    pub fn mixture(&self) -> ScoreMixture {
        self.score.unwrap_or(match self.score_kind {
            ScoreKind::Rsi => ScoreMixture::rsi(),
            ScoreKind::Congestion => ScoreMixture::congestion(),
        })
    }

    pub fn shares(&self) -> Vec<f64> {
        if self.firm_shares.is_empty() {
            vec![1.0 / self.n_bidders as f64; self.n_bidders]
        } else {
            self.firm_shares.clone()
        }
    }

    pub fn tau_for(&self, bidder: usize) -> f64 {
        self.bidder_taus.get(bidder).copied().unwrap_or(self.tau)
    }

    pub fn bidder_id(&self, j: usize) -> BidderId {
        BidderId::new(format!("B{:03}", j + 1))
    }

    pub fn unit_id(&self, j: usize, k: usize) -> UnitId {
        UnitId::new(format!("B{:03}-U{}", j + 1, k + 1))
    }

    /// Expected share of treated bidder-hours under the mixture.
    pub fn analytic_treated_share(&self) -> f64 {
        let mix = self.mixture();
        let c = self.cutoff();
        match self.score_kind {
            ScoreKind::Rsi => {
                let shares = self.shares();
                shares.iter().map(|w| mix.cdf(c / (1.0 - w))).sum::<f64>() / shares.len() as f64
            }
            ScoreKind::Congestion => {
                // P(S >= c) for a continuous draw
                1.0 - mix.cdf(c)
            }
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.n_bidders == 0 || self.units_per_bidder == 0 || self.n_hours == 0 {
            return bad("n_bidders, units_per_bidder and n_hours must be at least 1");
        }
        if !(self.noise_sd >= 0.0) || !(self.bidder_sd >= 0.0) || !(self.ref_sd >= 0.0) || !(self.gas_daily_sd >= 0.0)
        {
            return bad("standard deviations must be non-negative");
        }
        if !self.firm_shares.is_empty() {
            if self.firm_shares.len() != self.n_bidders {
                return bad("firm_shares must have one entry per bidder");
            }
            if self.firm_shares.iter().any(|w| !(*w > 0.0 && *w < 1.0)) {
                return bad("firm shares must lie in (0, 1)");
            }
            let total: f64 = self.firm_shares.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return bad("firm shares must sum to 1");
            }
        }
        if self.n_bidders == 1 && self.score_kind == ScoreKind::Rsi {
            return bad("RSI panels need at least 2 bidders");
        }
        if !self.bidder_taus.is_empty() && self.bidder_taus.len() != self.n_bidders {
            return bad("bidder_taus must have one entry per bidder");
        }
        if !(self.ref_low <= self.ref_high) || !(self.ref_ar.abs() < 1.0) {
            return bad("reference process out of range");
        }
        if !(self.load_base > 0.0) || !(self.reserve_share >= 0.0) || !(self.load_sd >= 0.0) {
            return bad("load process out of range");
        }
        if self.max_segments == 0 {
            return bad("max_segments must be at least 1");
        }
        let mix = self.mixture();
        mix.validate()?;
        match self.score_kind {
            ScoreKind::Rsi => {
                let floor = mix.floor.unwrap_or(f64::NEG_INFINITY);
                if floor * (1.0 + self.reserve_share) <= 1.0 {
                    return bad("score floor must keep capacity above load");
                }
            }
            ScoreKind::Congestion => {
                if self.congestion_margin * (1.0 + self.reserve_share) <= 1.0 {
                    return bad("congestion_margin must keep capacity above load");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    InvalidSpec(String),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::InvalidSpec(m) => write!(f, "invalid synthetic spec: {m}"),
        }
    }
}

impl std::error::Error for SynthError {}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub hour: Hour,
    pub bidder_id: BidderId,
    pub score: f64,
    pub treated: bool,
    pub tau: f64,
}

/// Everything the generator knows that an estimator should recover.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub taus: BTreeMap<BidderId, f64>,
    pub bidder_effects: BTreeMap<BidderId, f64>,
    /// Per hour: the margin (RSI) or congestion index drawn.
    pub hour_draws: Vec<(Hour, f64)>,
    /// Sorted by `(hour, bidder_id)`.
    pub rows: Vec<TruthRow>,
}

impl GroundTruth {
    pub fn treated_share(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.treated).count() as f64 / self.rows.len() as f64
    }

    /// The bid the DGP would produce before noise.
    pub fn mean_bid(&self, row: &ObservationRow) -> f64 {
        let s = &self.spec;
        let t = if row.treated { 1.0 } else { 0.0 };
        let tau = self.taus.get(&row.bidder_id).copied().unwrap_or(s.tau);
        let b = self.bidder_effects.get(&row.bidder_id).copied().unwrap_or(0.0);
        s.beta0
            + b
            + tau * t
            + s.beta_score * row.centered
            + s.beta_score_treat * row.centered * t
            + s.beta_ref * row.reference
            + s.beta_gas * row.gas
    }

    /// Writes `hour,bidder_id,treated,tau`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["hour", "bidder_id", "treated", "tau"])?;
        for r in &self.rows {
            wtr.write_record([
                r.hour.to_string(),
                r.bidder_id.to_string(),
                if r.treated { "1" } else { "0" }.to_string(),
                r.tau.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Panel, ground truth and the hidden state needed to build offers.
struct Draws {
    panel: Vec<ObservationRow>,
    truth: GroundTruth,
}

fn draw_panel(spec: &SynthSpec) -> Result<Draws, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mix = spec.mixture();
    let cutoff = spec.cutoff();
    let side = spec.side();
    let shares = spec.shares();
    let noise = Normal::new(0.0, spec.noise_sd).expect("validated");
    let bidder_noise = Normal::new(0.0, spec.bidder_sd).expect("validated");
    let ref_noise = Normal::new(0.0, spec.ref_sd).expect("validated");
    let gas_noise = Normal::new(0.0, spec.gas_daily_sd).expect("validated");

    let bidders: Vec<BidderId> = (0..spec.n_bidders).map(|j| spec.bidder_id(j)).collect();
    let effects: Vec<f64> = (0..spec.n_bidders).map(|_| bidder_noise.sample(&mut rng)).collect();
    let taus: Vec<f64> = (0..spec.n_bidders).map(|j| spec.tau_for(j)).collect();
    let n_units = spec.n_bidders * spec.units_per_bidder;
    let ref_means: Vec<f64> = (0..n_units)
        .map(|_| spec.ref_low + (spec.ref_high - spec.ref_low) * rng.random::<f64>())
        .collect();
    let unit_ids: Vec<UnitId> = (0..n_units)
        .map(|u| spec.unit_id(u / spec.units_per_bidder, u % spec.units_per_bidder))
        .collect();

    let mut refs = ref_means.clone();
    let mut gas = spec.gas_start;
    let mut panel = Vec::with_capacity(spec.n_hours * n_units);
    let mut rows = Vec::with_capacity(spec.n_hours * spec.n_bidders);
    let mut hour_draws = Vec::with_capacity(spec.n_hours);
    for t in 0..spec.n_hours {
        let hour = Hour::from_epoch_hours(spec.start + t as i64);
        if t > 0 && hour.epoch_hours().rem_euclid(24) == 0 {
            gas = (gas + gas_noise.sample(&mut rng)).max(spec.gas_min);
        }
        let draw = mix.draw(&mut rng);
        hour_draws.push((hour, draw));
        for j in 0..spec.n_bidders {
            let score = match spec.score_kind {
                ScoreKind::Rsi => draw * (1.0 - shares[j]),
                ScoreKind::Congestion => draw,
            };
            let (centered, treated) = center_score(score, cutoff, side);
            let t_ind = if treated { 1.0 } else { 0.0 };
            rows.push(TruthRow {
                hour,
                bidder_id: bidders[j].clone(),
                score,
                treated,
                tau: taus[j],
            });
            for k in 0..spec.units_per_bidder {
                let u = j * spec.units_per_bidder + k;
                if t > 0 {
                    refs[u] = ref_means[u] + spec.ref_ar * (refs[u] - ref_means[u]) + ref_noise.sample(&mut rng);
                }
                let eps = noise.sample(&mut rng);
                let p_max = spec.beta0
                    + effects[j]
                    + taus[j] * t_ind
                    + spec.beta_score * centered
                    + spec.beta_score_treat * centered * t_ind
                    + spec.beta_ref * refs[u]
                    + spec.beta_gas * gas
                    + eps;
                panel.push(ObservationRow {
                    hour,
                    bidder_id: bidders[j].clone(),
                    unit_id: unit_ids[u].clone(),
                    p_max,
                    score,
                    centered,
                    treated,
                    reference: refs[u],
                    gas,
                });
            }
        }
    }

    let truth = GroundTruth {
        spec: spec.clone(),
        taus: bidders.iter().cloned().zip(taus).collect(),
        bidder_effects: bidders.iter().cloned().zip(effects).collect(),
        hour_draws,
        rows,
    };
    Ok(Draws { panel, truth })
}

/// Estimation panel drawn straight from the DGP, with the true reference
/// levels. Much cheaper than [`generate`] for Monte Carlo work.
pub fn generate_panel(spec: &SynthSpec) -> Result<(Vec<ObservationRow>, GroundTruth), SynthError> {
    let d = draw_panel(spec)?;
    Ok((d.panel, d.truth))
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub truth: GroundTruth,
    pub panel: Vec<ObservationRow>,
}

/// Full offer and market dataset. The bid panel is identical to
/// [`generate_panel`] for the same spec; offer shapes, loads and area
/// records come from a separate random stream.
pub fn generate_full(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    let Draws { panel, truth } = draw_panel(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let shares = spec.shares();
    let load_noise = Normal::new(0.0, spec.load_sd).expect("validated");
    let gap = |rng: &mut ChaCha8Rng| 0.5 + 3.5 * rng.random::<f64>();

    let n_units = spec.n_bidders * spec.units_per_bidder;
    let mut offers = Vec::with_capacity(panel.len() * 4);
    let mut market = Vec::with_capacity(spec.n_hours);
    let mut loads = Vec::with_capacity(spec.n_hours);
    for (t, &(hour, draw)) in truth.hour_draws.iter().enumerate() {
        let hod = hour.epoch_hours().rem_euclid(24) as f64;
        let shape = 1.0 + 0.15 * (2.0 * std::f64::consts::PI * (hod - 6.0) / 24.0).sin();
        let load = spec.load_base * shape * (1.0 + load_noise.sample(&mut rng)).max(0.5);
        let reserves = spec.reserve_share * load;
        let margin = match spec.score_kind {
            ScoreKind::Rsi => draw,
            ScoreKind::Congestion => spec.congestion_margin,
        };
        let capacity = margin * (load + reserves);
        loads.push(load);

        let rows = &panel[t * n_units..(t + 1) * n_units];
        for (u, row) in rows.iter().enumerate() {
            let j = u / spec.units_per_bidder;
            let max_output = shares[j] * capacity / spec.units_per_bidder as f64;
            let n_seg = rng.random_range(1..=spec.max_segments);
            let mut prices = vec![row.p_max; n_seg as usize];
            for s in (0..n_seg as usize - 1).rev() {
                prices[s] = prices[s + 1] - gap(&mut rng);
            }
            let weights: Vec<f64> = (0..n_seg).map(|_| 0.2 + rng.random::<f64>()).collect();
            let total: f64 = weights.iter().sum();
            for (s, (price, w)) in prices.into_iter().zip(weights).enumerate() {
                offers.push(IncrementalOffer {
                    hour,
                    unit_id: row.unit_id.clone(),
                    bidder_id: row.bidder_id.clone(),
                    segment: s as u8 + 1,
                    price,
                    quantity: max_output * w / total,
                    status: OfferStatus::Economic,
                    max_output,
                });
            }
        }
        market.push(MarketHourRecord::new(hour, load, reserves, rows[0].gas));
    }

    // areas at t carry the congestion that hour t + 1 will see
    let n_areas = spec.n_areas.max(1);
    for t in 0..market.len() {
        let load = loads[t];
        let next_draw = truth.hour_draws.get(t + 1).map(|d| d.1);
        let mut areas = Vec::with_capacity(n_areas + 1);
        for a in 0..n_areas {
            let shadow = match (spec.score_kind, next_draw) {
                (ScoreKind::Congestion, Some(s)) => s,
                _ => (0.02 * rng.random::<f64>() - 0.01).abs(),
            };
            areas.push(AreaRecord {
                area_id: AreaId::new(format!("A{}", a + 1)),
                load: load / n_areas as f64,
                shadow_price: shadow,
                is_excluded: false,
            });
        }
        areas.push(AreaRecord {
            area_id: AreaId::new("X1"),
            load: 0.25 * load / n_areas as f64,
            shadow_price: 50.0 * rng.random::<f64>(),
            is_excluded: true,
        });
        market[t].areas = areas;
    }

    let dataset = Dataset::new(offers, market, spec.max_segments.max(SEGMENT_CAP_ISONE));
    Ok(SynthOutput { dataset, truth, panel })
}

pub fn generate(spec: &SynthSpec) -> Result<(Dataset, GroundTruth), SynthError> {
    let out = generate_full(spec)?;
    Ok((out.dataset, out.truth))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    Calm,
    /// Raise the top segment of each listed unit to at least `price`.
    Spike {
        hours: Vec<Hour>,
        units: Vec<UnitId>,
        price: f64,
    },
    /// Flag every segment of the listed units unavailable.
    Withhold { hours: Vec<Hour>, units: Vec<UnitId> },
}

pub fn perturb(ds: &Dataset, p: &Perturbation) -> Dataset {
    let mut offers = ds.offers().to_vec();
    match p {
        Perturbation::Calm => {}
        Perturbation::Spike { hours, units, price } => {
            let hours: BTreeSet<&Hour> = hours.iter().collect();
            let units: BTreeSet<&UnitId> = units.iter().collect();
            let mut top: BTreeMap<(Hour, &UnitId), usize> = BTreeMap::new();
            for (i, o) in ds.offers().iter().enumerate() {
                if hours.contains(&o.hour) && units.contains(&o.unit_id) {
                    let e = top.entry((o.hour, &o.unit_id)).or_insert(i);
                    if ds.offers()[*e].segment < o.segment {
                        *e = i;
                    }
                }
            }
            for i in top.into_values() {
                offers[i].price = offers[i].price.max(*price);
            }
        }
        Perturbation::Withhold { hours, units } => {
            let hours: BTreeSet<&Hour> = hours.iter().collect();
            let units: BTreeSet<&UnitId> = units.iter().collect();
            for o in &mut offers {
                if hours.contains(&o.hour) && units.contains(&o.unit_id) {
                    o.status = OfferStatus::Unavailable;
                }
            }
        }
    }
    Dataset::from_parts(offers, ds.market().to_vec(), ds.unit_to_bidder().clone(), ds.segment_cap())
}
