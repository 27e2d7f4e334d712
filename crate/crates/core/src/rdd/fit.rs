use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{fuzzy_probability, Covariance, ObservationRow, PolyOrder, RddError, RddSpec};

/// Relative tolerance on the diagonal of R, after column scaling, below which
/// a column is taken to be linearly dependent on the ones before it.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientEstimate {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_stat: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct RddFit {
    pub spec: RddSpec,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub n_obs: usize,
    pub n_clusters: usize,
    /// Rows outside the bandwidth.
    pub n_dropped: usize,
    pub dof: f64,
    pub r2: f64,
    pub within_r2: Option<f64>,
}

impl RddFit {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn coefficient(&self, name: &str) -> Option<CoefficientEstimate> {
        let i = self.index_of(name)?;
        Some(CoefficientEstimate {
            name: self.names[i].clone(),
            estimate: self.coefficients[i],
            std_error: self.std_errors[i],
            t_stat: self.t_stats[i],
            p_value: self.p_values[i],
        })
    }

    /// The discontinuity estimate `τ`.
    pub fn treatment(&self) -> CoefficientEstimate {
        self.coefficient("treat").expect("treatment is always in the design")
    }

    /// Two-sided `1 - alpha` interval from the same t distribution as the
    /// p-values.
    pub fn confidence_interval(&self, name: &str, alpha: f64) -> Option<(f64, f64)> {
        let c = self.coefficient(name)?;
        let q = t_quantile(1.0 - alpha / 2.0, self.dof);
        Some((c.estimate - q * c.std_error, c.estimate + q * c.std_error))
    }

    pub fn estimates(&self) -> Vec<CoefficientEstimate> {
        self.names.iter().filter_map(|n| self.coefficient(n)).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["coefficient", "estimate", "std_error", "t_stat", "p_value"])?;
        for c in self.estimates() {
            w.write_record([
                c.name,
                c.estimate.to_string(),
                c.std_error.to_string(),
                c.t_stat.to_string(),
                c.p_value.to_string(),
            ])?;
        }
        w.write_record(["n_obs".to_string(), self.n_obs.to_string(), String::new(), String::new(), String::new()])?;
        w.write_record([
            "n_clusters".to_string(),
            self.n_clusters.to_string(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
        w.write_record(["r2".to_string(), self.r2.to_string(), String::new(), String::new(), String::new()])?;
        if let Some(wr2) = self.within_r2 {
            w.write_record(["within_r2".to_string(), wr2.to_string(), String::new(), String::new(), String::new()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn t_quantile(p: f64, dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof).map(|t| t.inverse_cdf(p)).unwrap_or(f64::NAN)
}

fn two_sided_p(t: f64, dof: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    match StudentsT::new(0.0, 1.0, dof) {
        Ok(dist) => (2.0 * dist.sf(t.abs())).min(1.0),
        Err(_) => f64::NAN,
    }
}

pub(super) fn design_names(spec: &RddSpec) -> Vec<String> {
    let mut names = Vec::new();
    if !spec.fixed_effects {
        names.push("intercept");
    }
    names.extend(["treat", "score", "score_x_treat"]);
    if spec.order == PolyOrder::Quadratic {
        names.extend(["score2", "score2_x_treat"]);
    }
    names.extend(["ref", "gas"]);
    names.into_iter().map(String::from).collect()
}

fn design_row(row: &ObservationRow, spec: &RddSpec, out: &mut Vec<f64>) {
    let s = row.centered;
    let sharp = if row.treated { 1.0 } else { 0.0 };
    let (t, t_int) = match spec.fuzzy {
        Some(sigma) => {
            let p = fuzzy_probability(s, sigma);
            (p, if spec.fuzzy_interaction { p } else { sharp })
        }
        None => (sharp, sharp),
    };
    out.clear();
    if !spec.fixed_effects {
        out.push(1.0);
    }
    out.extend([t, s, s * t_int]);
    if spec.order == PolyOrder::Quadratic {
        out.extend([s * s, s * s * t_int]);
    }
    out.extend([row.reference, row.gas]);
}

/// Pooled fit on rows with `|S̃| <= bandwidth`.
pub fn fit_pooled(rows: &[ObservationRow], spec: &RddSpec) -> Result<RddFit, RddError> {
    spec.validate()?;
    let mut sample: Vec<&ObservationRow> = rows.iter().filter(|r| r.centered.abs() <= spec.bandwidth).collect();
    let n_dropped = rows.len() - sample.len();
    if sample.is_empty() {
        return Err(RddError::EmptySample);
    }
    sample.sort_by(|a, b| {
        (&a.bidder_id, &a.unit_id, a.hour)
            .cmp(&(&b.bidder_id, &b.unit_id, b.hour))
            .then(a.centered.total_cmp(&b.centered))
    });
    let mut fit = fit_sorted(&sample, spec)?;
    fit.n_dropped = n_dropped;
    Ok(fit)
}

/// Core estimator; rows must be grouped by bidder.
pub(super) fn fit_sorted(sample: &[&ObservationRow], spec: &RddSpec) -> Result<RddFit, RddError> {
    let names = design_names(spec);
    let k = names.len();
    let n = sample.len();

    // rows are contiguous per bidder
    let mut bounds: Vec<(usize, usize)> = Vec::new();
    for (i, r) in sample.iter().enumerate() {
        if i == 0 || sample[i - 1].bidder_id != r.bidder_id {
            bounds.push((i, i));
        }
        bounds.last_mut().expect("pushed above").1 = i + 1;
    }
    let g = bounds.len();
    if spec.covariance == Covariance::ClusterBidder && g < 2 {
        return Err(RddError::TooFewClusters(g));
    }
    if n <= k {
        return Err(RddError::TooFewObservations { n, k });
    }

    let mut x = DMatrix::<f64>::zeros(n, k);
    let mut y = DVector::<f64>::zeros(n);
    let mut buf = Vec::with_capacity(k);
    for (i, r) in sample.iter().enumerate() {
        design_row(r, spec, &mut buf);
        for (j, v) in buf.iter().enumerate() {
            x[(i, j)] = *v;
        }
        y[i] = r.p_max;
    }

    let y_mean = y.mean();
    let sst = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>();
    let mut sst_within = sst;
    if spec.fixed_effects {
        for &(lo, hi) in &bounds {
            let m = (hi - lo) as f64;
            let ym = y.rows(lo, hi - lo).sum() / m;
            for i in lo..hi {
                y[i] -= ym;
            }
            for j in 0..k {
                let xm = x.view((lo, j), (hi - lo, 1)).sum() / m;
                for i in lo..hi {
                    x[(i, j)] -= xm;
                }
            }
        }
        sst_within = y.iter().map(|v| v * v).sum::<f64>();
    }

    // scale columns to unit norm for a scale-free rank check
    let mut scale = vec![0.0; k];
    let mut zero_cols = Vec::new();
    for j in 0..k {
        let norm = x.column(j).norm();
        if norm == 0.0 || !norm.is_finite() {
            zero_cols.push(names[j].clone());
        }
        scale[j] = norm;
    }
    if !zero_cols.is_empty() {
        return Err(RddError::RankDeficient(zero_cols));
    }
    let mut xs = x.clone();
    for (j, s) in scale.iter().enumerate() {
        xs.column_mut(j).scale_mut(1.0 / s);
    }

    let qr = xs.clone().qr();
    let r = qr.r();
    let max_diag = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let dependent: Vec<String> = (0..k)
        .filter(|&j| r[(j, j)].abs() <= RANK_TOL * max_diag)
        .map(|j| names[j].clone())
        .collect();
    if !dependent.is_empty() {
        return Err(RddError::RankDeficient(dependent));
    }

    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let qty = qty.rows(0, k).into_owned();
    let beta_s = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| RddError::RankDeficient(names.clone()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| RddError::RankDeficient(names.clone()))?;
    let bread = &r_inv * r_inv.transpose();

    let resid = &y - &xs * &beta_s;
    let ssr = resid.iter().map(|e| e * e).sum::<f64>();

    let mut meat = DMatrix::<f64>::zeros(k, k);
    let (scale_factor, dof) = match spec.covariance {
        Covariance::ClusterBidder => {
            for &(lo, hi) in &bounds {
                let mut score = DVector::<f64>::zeros(k);
                for i in lo..hi {
                    score.axpy(resid[i], &xs.row(i).transpose(), 1.0);
                }
                meat += &score * score.transpose();
            }
            let gf = g as f64;
            let nf = n as f64;
            (gf / (gf - 1.0) * (nf - 1.0) / (nf - k as f64), gf - 1.0)
        }
        Covariance::Hc1 => {
            for i in 0..n {
                let xi = xs.row(i).transpose();
                meat += (&xi * xi.transpose()) * (resid[i] * resid[i]);
            }
            let nf = n as f64;
            (nf / (nf - k as f64), nf - k as f64)
        }
    };
    let v_s = &bread * meat * &bread * scale_factor;

    let mut covariance = v_s;
    for a in 0..k {
        for b in 0..k {
            covariance[(a, b)] /= scale[a] * scale[b];
        }
    }
    let coefficients: Vec<f64> = (0..k).map(|j| beta_s[j] / scale[j]).collect();
    let std_errors: Vec<f64> = (0..k).map(|j| covariance[(j, j)].max(0.0).sqrt()).collect();
    let t_stats: Vec<f64> = coefficients.iter().zip(&std_errors).map(|(b, s)| b / s).collect();
    let p_values: Vec<f64> = t_stats.iter().map(|t| two_sided_p(*t, dof)).collect();

    let r2 = if sst > 0.0 { 1.0 - ssr / sst } else { f64::NAN };
    let within_r2 = spec
        .fixed_effects
        .then(|| if sst_within > 0.0 { 1.0 - ssr / sst_within } else { f64::NAN });

    Ok(RddFit {
        spec: *spec,
        names,
        coefficients,
        covariance,
        std_errors,
        t_stats,
        p_values,
        n_obs: n,
        n_clusters: g,
        n_dropped: 0,
        dof,
        r2,
        within_r2,
    })
}
