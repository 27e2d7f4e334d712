#![allow(dead_code)]

use amp_core::data::{BidderId, Hour, IncrementalOffer, OfferStatus, UnitId};
use amp_core::rdd::ObservationRow;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn block(hour: i64, unit: &str, bidder: &str, seg: u8, price: f64, qty: f64) -> IncrementalOffer {
    IncrementalOffer {
        hour: Hour::from_epoch_hours(hour),
        unit_id: UnitId::from(unit),
        bidder_id: BidderId::from(bidder),
        segment: seg,
        price,
        quantity: qty,
        status: OfferStatus::Economic,
        max_output: qty,
    }
}

/// One unit per `(price, qty)` pair, each a single segment.
pub fn stack(blocks: &[(f64, f64)]) -> Vec<IncrementalOffer> {
    blocks
        .iter()
        .enumerate()
        .map(|(i, &(p, q))| block(0, &format!("U{i:02}"), &format!("B{i:02}"), 1, p, q))
        .collect()
}

/// Random panel with bidder intercepts, a jump of `tau` and a kink.
pub fn random_panel(seed: u64, n_bidders: usize, per_bidder: usize, tau: f64, noise: f64) -> Vec<ObservationRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, noise.max(1e-300)).unwrap();
    let mut rows = Vec::new();
    for b in 0..n_bidders {
        let alpha = rng.random_range(-5.0..5.0);
        for i in 0..per_bidder {
            let s: f64 = rng.random_range(-1.0..1.0);
            let t = s >= 0.0;
            let reference = rng.random_range(20.0..60.0);
            let gas = rng.random_range(1.0..5.0);
            let ti = if t { 1.0 } else { 0.0 };
            let e = if noise > 0.0 { eps.sample(&mut rng) } else { 0.0 };
            rows.push(ObservationRow {
                hour: Hour::from_epoch_hours(i as i64),
                bidder_id: BidderId::new(format!("B{b:02}")),
                unit_id: UnitId::new(format!("B{b:02}-U1")),
                p_max: 4.0 + alpha + tau * ti + 3.0 * s - 2.0 * s * ti + 0.8 * reference + 1.5 * gas + e,
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

/// OLS by normal equations and Cholesky, with CR1 or HC1 sandwich.
pub struct Ols {
    pub beta: DVector<f64>,
    pub se: DVector<f64>,
    pub resid: DVector<f64>,
    pub x: DMatrix<f64>,
}

pub fn ols(x: DMatrix<f64>, y: DVector<f64>, clusters: Option<&[usize]>) -> Ols {
    let (n, k) = x.shape();
    let xtx = x.transpose() * &x;
    let chol = xtx.clone().cholesky().expect("full rank");
    let beta = chol.solve(&(x.transpose() * &y));
    let inv = chol.inverse();
    let resid = &y - &x * &beta;
    let mut meat = DMatrix::zeros(k, k);
    let factor = match clusters {
        Some(ids) => {
            let g = ids.iter().max().unwrap() + 1;
            let mut scores = vec![DVector::<f64>::zeros(k); g];
            for i in 0..n {
                scores[ids[i]] += x.row(i).transpose() * resid[i];
            }
            for s in &scores {
                meat += s * s.transpose();
            }
            let (g, n, k) = (g as f64, n as f64, k as f64);
            g / (g - 1.0) * (n - 1.0) / (n - k)
        }
        None => {
            for i in 0..n {
                let xi = x.row(i).transpose();
                meat += &xi * xi.transpose() * (resid[i] * resid[i]);
            }
            n as f64 / (n as f64 - k as f64)
        }
    };
    let v = &inv * meat * &inv * factor;
    let se = DVector::from_iterator(k, (0..k).map(|j| v[(j, j)].sqrt()));
    Ols { beta, se, resid, x }
}

/// Linear sharp design in the estimator's column order, demeaned by bidder
/// when `fe`.
pub fn design(rows: &[ObservationRow], fe: bool) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
    let k = if fe { 5 } else { 6 };
    let n = rows.len();
    let mut x = DMatrix::zeros(n, k);
    let mut y = DVector::zeros(n);
    let mut ids = Vec::with_capacity(n);
    let mut names: Vec<&BidderId> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let t = if r.treated { 1.0 } else { 0.0 };
        let vals = [1.0, t, r.centered, r.centered * t, r.reference, r.gas];
        let vals = if fe { &vals[1..] } else { &vals[..] };
        for (j, v) in vals.iter().enumerate() {
            x[(i, j)] = *v;
        }
        y[i] = r.p_max;
        let id = match names.iter().position(|b| *b == &r.bidder_id) {
            Some(p) => p,
            None => {
                names.push(&r.bidder_id);
                names.len() - 1
            }
        };
        ids.push(id);
    }
    if fe {
        for g in 0..names.len() {
            let members: Vec<usize> = (0..n).filter(|&i| ids[i] == g).collect();
            let m = members.len() as f64;
            let ym: f64 = members.iter().map(|&i| y[i]).sum::<f64>() / m;
            for &i in &members {
                y[i] -= ym;
            }
            for j in 0..k {
                let xm: f64 = members.iter().map(|&i| x[(i, j)]).sum::<f64>() / m;
                for &i in &members {
                    x[(i, j)] -= xm;
                }
            }
        }
    }
    (x, y, ids)
}
