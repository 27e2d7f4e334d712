use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use crate::data::BidderId;
use crate::exec::Execution;
use crate::numeric::{quantile_sorted, sorted};

use super::fit::fit_sorted;
use super::{Covariance, ObservationRow, RddError, RddFit, RddSpec};

/// When a bidder has too little data to estimate its own discontinuity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExclusionRule {
    pub min_rows: usize,
    /// Minimum variance of the outcome inside the bandwidth.
    pub min_variance: f64,
}

impl Default for ExclusionRule {
    fn default() -> Self {
        ExclusionRule {
            min_rows: 100,
            min_variance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExclusionReason {
    TooFewRows(usize),
    NoTreatedRows,
    NoUntreatedRows,
    NoVariation(f64),
    FitFailed(RddError),
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExclusionReason::TooFewRows(n) => write!(f, "only {n} rows inside the bandwidth"),
            ExclusionReason::NoTreatedRows => write!(f, "no treated rows"),
            ExclusionReason::NoUntreatedRows => write!(f, "no untreated rows"),
            ExclusionReason::NoVariation(v) => write!(f, "outcome variance {v:e} too small"),
            ExclusionReason::FitFailed(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BidderExclusion {
    pub bidder_id: BidderId,
    pub reason: ExclusionReason,
}

/// Table-style summary of the per-bidder effects.
#[derive(Debug, Clone, PartialEq)]
pub struct PerBidderSummary {
    pub analyzed: usize,
    pub significant: usize,
    pub significant_share: Option<f64>,
    pub median_all: Option<f64>,
    /// `(q25, q75)`.
    pub iqr_all: Option<(f64, f64)>,
    pub median_significant: Option<f64>,
    pub iqr_significant: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct PerBidderReport {
    pub fits: BTreeMap<BidderId, RddFit>,
    pub excluded: Vec<BidderExclusion>,
    pub summary: PerBidderSummary,
}

impl PerBidderReport {
    /// Writes `bidder_id,tau,std_error,p_value,n_obs,status` for each
    /// analyzed bidder, then one line per excluded bidder.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["bidder_id", "tau", "std_error", "p_value", "n_obs", "status"])?;
        for (b, fit) in &self.fits {
            let t = fit.treatment();
            let status = if t.p_value <= fit.spec.alpha { "significant" } else { "analyzed" };
            wtr.write_record([
                b.to_string(),
                t.estimate.to_string(),
                t.std_error.to_string(),
                t.p_value.to_string(),
                fit.n_obs.to_string(),
                status.to_string(),
            ])?;
        }
        for ex in &self.excluded {
            wtr.write_record([
                ex.bidder_id.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                format!("excluded: {}", ex.reason),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn quartiles(values: &[f64]) -> (Option<f64>, Option<(f64, f64)>) {
    let s = sorted(values.iter().copied());
    let q = |p| quantile_sorted(&s, p);
    (q(0.5), q(0.25).zip(q(0.75)))
}

fn check(rows: &[&ObservationRow], rule: &ExclusionRule) -> Option<ExclusionReason> {
    if rows.len() < rule.min_rows {
        return Some(ExclusionReason::TooFewRows(rows.len()));
    }
    if !rows.iter().any(|r| r.treated) {
        return Some(ExclusionReason::NoTreatedRows);
    }
    if rows.iter().all(|r| r.treated) {
        return Some(ExclusionReason::NoUntreatedRows);
    }
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.p_max).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r.p_max - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var < rule.min_variance {
        return Some(ExclusionReason::NoVariation(var));
    }
    None
}

/// Separate discontinuity per bidder. Each fit carries its own intercept
/// (fixed effects are moot within one bidder) and HC1 standard errors, since
/// clustering on a single bidder is undefined.
pub fn fit_per_bidder(
    rows: &[ObservationRow],
    spec: &RddSpec,
    rule: &ExclusionRule,
    exec: Execution,
) -> Result<PerBidderReport, RddError> {
    spec.validate()?;
    let bidder_spec = RddSpec {
        fixed_effects: false,
        covariance: Covariance::Hc1,
        ..*spec
    };
    let mut groups: BTreeMap<&BidderId, Vec<&ObservationRow>> = BTreeMap::new();
    for r in rows {
        let entry = groups.entry(&r.bidder_id).or_default();
        if r.centered.abs() <= spec.bandwidth {
            entry.push(r);
        }
    }
    let mut groups: Vec<(&BidderId, Vec<&ObservationRow>)> = groups.into_iter().collect();
    for (_, g) in &mut groups {
        g.sort_by(|a, b| (&a.unit_id, a.hour).cmp(&(&b.unit_id, b.hour)));
    }

    let results = exec.map(&groups, |(b, g)| {
        let outcome = match check(g, rule) {
            Some(reason) => Err(reason),
            None => fit_sorted(g, &bidder_spec).map_err(ExclusionReason::FitFailed),
        };
        ((*b).clone(), outcome)
    });

    let mut fits = BTreeMap::new();
    let mut excluded = Vec::new();
    for (b, outcome) in results {
        match outcome {
            Ok(fit) => {
                fits.insert(b, fit);
            }
            Err(reason) => excluded.push(BidderExclusion { bidder_id: b, reason }),
        }
    }

    let all: Vec<f64> = fits.values().map(|f| f.treatment().estimate).collect();
    let sig: Vec<f64> = fits
        .values()
        .map(|f| f.treatment())
        .filter(|t| t.p_value <= spec.alpha)
        .map(|t| t.estimate)
        .collect();
    let (median_all, iqr_all) = quartiles(&all);
    let (median_significant, iqr_significant) = quartiles(&sig);
    let summary = PerBidderSummary {
        analyzed: all.len(),
        significant: sig.len(),
        significant_share: (!all.is_empty()).then(|| sig.len() as f64 / all.len() as f64),
        median_all,
        iqr_all,
        median_significant,
        iqr_significant,
    };
    Ok(PerBidderReport {
        fits,
        excluded,
        summary,
    })
}

/// Writes the summary as `statistic,value` pairs; absent statistics are empty.
pub fn write_summary_csv<W: Write>(w: W, s: &PerBidderSummary) -> Result<(), csv::Error> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["statistic", "value"])?;
    let rows = [
        ("bidders_analyzed", s.analyzed.to_string()),
        ("bidders_significant", s.significant.to_string()),
        ("significant_share", opt(s.significant_share)),
        ("median_tau", opt(s.median_all)),
        ("q25_tau", opt(s.iqr_all.map(|q| q.0))),
        ("q75_tau", opt(s.iqr_all.map(|q| q.1))),
        ("median_tau_significant", opt(s.median_significant)),
        ("q25_tau_significant", opt(s.iqr_significant.map(|q| q.0))),
        ("q75_tau_significant", opt(s.iqr_significant.map(|q| q.1))),
    ];
    for (k, v) in rows {
        wtr.write_record([k.to_string(), v])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Hour, UnitId};

    fn panel(bidders: &[(&str, f64, usize)]) -> Vec<ObservationRow> {
        let mut rows = Vec::new();
        for (b, tau, n) in bidders {
            for i in 0..*n {
                let s = (i as f64 / *n as f64) - 0.5;
                let t = s >= 0.0;
                let noise = (((i * 7919) % 101) as f64 - 50.0) / 50.0;
                let reference = 30.0 + (i % 17) as f64;
                let gas = 2.0 + (i % 7) as f64 * 0.3;
                rows.push(ObservationRow {
                    hour: Hour::from_epoch_hours(i as i64),
                    bidder_id: BidderId::new(*b),
                    unit_id: UnitId::new(format!("{b}-1")),
                    p_max: 20.0 + if t { *tau } else { 0.0 } + 2.0 * s + 0.8 * reference + gas + noise,
                    score: 1.0 - s,
                    centered: s,
                    treated: t,
                    reference,
                    gas,
                });
            }
        }
        rows
    }

    #[test]
    fn fits_and_excludes() {
        let mut rows = panel(&[("a", -6.0, 400), ("b", -3.0, 400), ("c", 0.0, 400), ("d", -5.0, 50)]);
        // e has no variation at all
        for mut r in panel(&[("e", 0.0, 200)]) {
            r.p_max = 42.0;
            rows.push(r);
        }
        let report = fit_per_bidder(
            &rows,
            &RddSpec::with_bandwidth(1.0),
            &ExclusionRule::default(),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(report.fits.len(), 3);
        assert_eq!(report.excluded.len(), 2);
        assert_eq!(report.excluded[0].reason, ExclusionReason::TooFewRows(50));
        assert!(matches!(report.excluded[1].reason, ExclusionReason::NoVariation(_)));
        let a = report.fits[&BidderId::new("a")].treatment();
        assert!((a.estimate + 6.0).abs() < 0.5, "{a:?}");
        assert_eq!(report.summary.analyzed, 3);
        assert!(report.summary.significant >= 2);
        assert!(report.summary.median_all.is_some());
    }

    #[test]
    fn all_treated_bidder_is_excluded() {
        let rows: Vec<_> = panel(&[("a", -6.0, 400)]).into_iter().filter(|r| r.treated).collect();
        let report = fit_per_bidder(
            &rows,
            &RddSpec::with_bandwidth(1.0),
            &ExclusionRule::default(),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(report.excluded[0].reason, ExclusionReason::NoUntreatedRows);
        assert_eq!(report.summary.significant_share, None);
    }

    #[test]
    fn parallel_matches_sequential() {
        let rows = panel(&[("a", -6.0, 300), ("b", -3.0, 300), ("c", 1.0, 300)]);
        let spec = RddSpec::with_bandwidth(0.3);
        let seq = fit_per_bidder(&rows, &spec, &ExclusionRule::default(), Execution::Sequential).unwrap();
        let par = fit_per_bidder(&rows, &spec, &ExclusionRule::default(), Execution::Parallel).unwrap();
        assert_eq!(seq.summary, par.summary);
    }
}
