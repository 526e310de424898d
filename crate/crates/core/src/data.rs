//! Observation records, gridding, centering, CSV I/O and the Black–Scholes
//! implied-volatility utility used to ingest option chains.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::smoothing::EvalGrid2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseObservation {
    pub surface_id: usize,
    pub t: f64,
    pub s: f64,
    pub y: f64,
}

/// Observations of `n_surfaces` independent surfaces, each seen at its own
/// irregular locations.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDataset {
    observations: Vec<SparseObservation>,
    n_surfaces: usize,
}

impl SparseDataset {
    pub fn new(observations: Vec<SparseObservation>, n_surfaces: usize) -> Result<Self> {
        let mut counts = vec![0usize; n_surfaces];
        for o in &observations {
            if o.surface_id >= n_surfaces {
                return Err(Error::InvalidArgument(format!("surface_id {} out of range for {n_surfaces} surfaces", o.surface_id)));
            }
            if !(0.0..=1.0).contains(&o.t) || !(0.0..=1.0).contains(&o.s) {
                return Err(Error::InvalidArgument(format!("observation location ({}, {}) outside [0,1]^2", o.t, o.s)));
            }
            if !o.y.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite value for surface {}", o.surface_id)));
            }
            counts[o.surface_id] += 1;
        }
        if !counts.iter().any(|&c| c >= 2) {
            return Err(Error::InsufficientPairs);
        }
        Ok(Self { observations, n_surfaces })
    }

    pub fn observations(&self) -> &[SparseObservation] {
        &self.observations
    }

    pub fn n_surfaces(&self) -> usize {
        self.n_surfaces
    }

    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    /// Observations grouped by surface id.
    pub fn by_surface(&self) -> Vec<Vec<SparseObservation>> {
        let mut out = vec![Vec::new(); self.n_surfaces];
        for o in &self.observations {
            out[o.surface_id].push(*o);
        }
        out
    }

    /// Dataset restricted to `ids`, renumbered `0..ids.len()` in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let groups = self.by_surface();
        let mut obs = Vec::new();
        for (new_id, &id) in ids.iter().enumerate() {
            let group = groups.get(id).ok_or_else(|| Error::InvalidArgument(format!("surface {id} not in dataset")))?;
            obs.extend(group.iter().map(|o| SparseObservation { surface_id: new_id, ..*o }));
        }
        Self::new(obs, ids.len())
    }

    pub fn from_surfaces(surfaces: &[Vec<(f64, f64, f64)>]) -> Result<Self> {
        let obs = surfaces
            .iter()
            .enumerate()
            .flat_map(|(id, pts)| pts.iter().map(move |&(t, s, y)| SparseObservation { surface_id: id, t, s, y }))
            .collect();
        Self::new(obs, surfaces.len())
    }
}

/// Regular `d1 x d2` grid on the unit square with cell midpoints `(i - 1/2)/d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid2 {
    pub d1: usize,
    pub d2: usize,
}

impl Grid2 {
    pub fn new(d1: usize, d2: usize) -> Result<Self> {
        if d1 < 2 || d2 < 2 {
            return Err(Error::InvalidArgument(format!("grid must be at least 2x2, got {d1}x{d2}")));
        }
        Ok(Self { d1, d2 })
    }

    pub fn square(d: usize) -> Result<Self> {
        Self::new(d, d)
    }

    pub fn t_mid(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.d1 as f64
    }

    pub fn s_mid(&self, j: usize) -> f64 {
        (j as f64 + 0.5) / self.d2 as f64
    }

    pub fn t_axis(&self) -> Vec<f64> {
        (0..self.d1).map(|i| self.t_mid(i)).collect()
    }

    pub fn s_axis(&self) -> Vec<f64> {
        (0..self.d2).map(|j| self.s_mid(j)).collect()
    }

    pub fn eval_grid(&self) -> EvalGrid2 {
        EvalGrid2::new(self.t_axis(), self.s_axis()).expect("grid midpoints are valid")
    }

    /// Nearest cell `(i, j)` (zero-based) for a location in the unit square.
    pub fn cell_of(&self, t: f64, s: f64) -> (usize, usize) {
        let snap = |x: f64, d: usize| ((x * d as f64).floor() as usize).min(d - 1);
        (snap(t, self.d1), snap(s, self.d2))
    }

    pub fn n_cells(&self) -> usize {
        self.d1 * self.d2
    }
}

/// One surface on the grid: averaged values and a 0/1 observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedGridSample {
    pub values: DMatrix<f64>,
    pub mask: DMatrix<f64>,
}

impl MaskedGridSample {
    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }
}

/// Assigns every observation to its nearest cell; duplicates within a cell are
/// averaged. Unobserved cells hold 0.
pub fn grid_dataset(ds: &SparseDataset, grid: &Grid2) -> Vec<MaskedGridSample> {
    let mut sums = vec![DMatrix::<f64>::zeros(grid.d1, grid.d2); ds.n_surfaces()];
    let mut counts = vec![DMatrix::<f64>::zeros(grid.d1, grid.d2); ds.n_surfaces()];
    for o in ds.observations() {
        let (i, j) = grid.cell_of(o.t, o.s);
        sums[o.surface_id][(i, j)] += o.y;
        counts[o.surface_id][(i, j)] += 1.0;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(sum, count)| {
            let values = sum.zip_map(&count, |v, c| if c > 0.0 { v / c } else { 0.0 });
            let mask = count.map(|c| if c > 0.0 { 1.0 } else { 0.0 });
            MaskedGridSample { values, mask }
        })
        .collect()
}

fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::DimensionMismatch { expected: format!("{rows}x{cols}"), got: format!("{}x{}", m.nrows(), m.ncols()) });
    }
    Ok(())
}

fn shift(samples: &[MaskedGridSample], mean: &DMatrix<f64>, sign: f64) -> Result<Vec<MaskedGridSample>> {
    samples
        .iter()
        .map(|smp| {
            check_shape(mean, smp.values.nrows(), smp.values.ncols())?;
            let mut values = smp.values.clone();
            for ((v, m), mu) in values.iter_mut().zip(smp.mask.iter()).zip(mean.iter()) {
                if *m > 0.0 {
                    *v += sign * mu;
                }
            }
            Ok(MaskedGridSample { values, mask: smp.mask.clone() })
        })
        .collect()
}

/// Subtracts the mean grid on observed cells.
pub fn center(samples: &[MaskedGridSample], mean: &DMatrix<f64>) -> Result<Vec<MaskedGridSample>> {
    shift(samples, mean, -1.0)
}

/// Inverse of [`center`].
pub fn restore(samples: &[MaskedGridSample], mean: &DMatrix<f64>) -> Result<Vec<MaskedGridSample>> {
    shift(samples, mean, 1.0)
}

#[derive(Debug, Deserialize, Serialize)]
struct ObservationRow {
    surface_id: usize,
    t: f64,
    s: f64,
    y: f64,
}

/// Reads `surface_id,t,s,y` CSV. The surface count is one past the largest id.
pub fn read_dataset_csv<R: Read>(reader: R) -> Result<SparseDataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut obs = Vec::new();
    for (line, row) in rdr.deserialize::<ObservationRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))?;
        obs.push(SparseObservation { surface_id: row.surface_id, t: row.t, s: row.s, y: row.y });
    }
    let n = obs.iter().map(|o| o.surface_id + 1).max().unwrap_or(0);
    SparseDataset::new(obs, n)
}

pub fn write_dataset_csv<W: Write>(ds: &SparseDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for o in ds.observations() {
        w.serialize(ObservationRow { surface_id: o.surface_id, t: o.t, s: o.s, y: o.y }).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn check_bs_domain(spot: f64, strike: f64, tau: f64, rate: f64) -> Result<()> {
    if !(spot > 0.0 && strike > 0.0 && tau > 0.0 && spot.is_finite() && strike.is_finite() && tau.is_finite()) || !rate.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Black–Scholes needs spot, strike, tau > 0 (got {spot}, {strike}, {tau}, rate {rate})"
        )));
    }
    Ok(())
}

fn call_price_unchecked(n: &Normal, spot: f64, strike: f64, tau: f64, rate: f64, sigma: f64) -> f64 {
    let discounted = strike * (-rate * tau).exp();
    if sigma <= 0.0 {
        return (spot - discounted).max(0.0);
    }
    let vol = sigma * tau.sqrt();
    let d1 = ((spot / strike).ln() + (rate + 0.5 * sigma * sigma) * tau) / vol;
    let d2 = d1 - vol;
    spot * n.cdf(d1) - discounted * n.cdf(d2)
}

/// European call value under Black–Scholes; `tau` in years.
pub fn bs_call_price(spot: f64, strike: f64, tau: f64, rate: f64, sigma: f64) -> Result<f64> {
    check_bs_domain(spot, strike, tau, rate)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("volatility must be positive, got {sigma}")));
    }
    Ok(call_price_unchecked(&std_normal(), spot, strike, tau, rate, sigma))
}

/// Volatility reproducing `price`, by bisection to `|dσ| < 1e-10`.
pub fn implied_vol(price: f64, spot: f64, strike: f64, tau: f64, rate: f64) -> Result<f64> {
    check_bs_domain(spot, strike, tau, rate)?;
    let lower = (spot - strike * (-rate * tau).exp()).max(0.0);
    let upper = spot;
    if !(price > lower && price < upper) {
        return Err(Error::PriceOutOfBracket { price, lower, upper });
    }
    let n = std_normal();
    let f = |sigma: f64| call_price_unchecked(&n, spot, strike, tau, rate, sigma);
    let (mut lo, mut hi) = (0.0, 1.0);
    while f(hi) < price {
        lo = hi;
        hi *= 2.0;
        if hi > 1e4 {
            return Err(Error::PriceOutOfBracket { price, lower, upper });
        }
    }
    while hi - lo >= 1e-10 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < price {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One quoted European call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionQuote {
    pub surface_id: usize,
    pub spot: f64,
    pub strike: f64,
    pub tau_days: f64,
    pub rate: f64,
    pub price: f64,
}

/// Domain scaling of option chains onto the unit square:
/// `t = (tau_days - tau_min) / (tau_max - tau_min)` and
/// `s = (ln(K/S) - lm_min) / (lm_max - lm_min)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionScaling {
    pub tau_min_days: f64,
    pub tau_max_days: f64,
    pub log_moneyness_min: f64,
    pub log_moneyness_max: f64,
    pub days_per_year: f64,
    pub log_iv: bool,
}

impl Default for OptionScaling {
    fn default() -> Self {
        Self {
            tau_min_days: 14.0,
            tau_max_days: 365.0,
            log_moneyness_min: -0.5,
            log_moneyness_max: 0.5,
            days_per_year: 365.0,
            log_iv: true,
        }
    }
}

impl OptionScaling {
    pub fn to_unit(&self, tau_days: f64, log_moneyness: f64) -> (f64, f64) {
        (
            (tau_days - self.tau_min_days) / (self.tau_max_days - self.tau_min_days),
            (log_moneyness - self.log_moneyness_min) / (self.log_moneyness_max - self.log_moneyness_min),
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub outside_domain: usize,
    pub outside_bracket: usize,
}

/// Converts quotes to `(t, s, y)` observations, `y` being the implied
/// volatility or its logarithm. Quotes outside the domain or the arbitrage
/// bracket are skipped and counted.
pub fn ingest_options(quotes: &[OptionQuote], scaling: &OptionScaling) -> Result<(SparseDataset, IngestReport)> {
    let mut report = IngestReport::default();
    let mut obs = Vec::new();
    for q in quotes {
        let lm = (q.strike / q.spot).ln();
        let (t, s) = scaling.to_unit(q.tau_days, lm);
        if !((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&s)) {
            report.outside_domain += 1;
            continue;
        }
        let tau = q.tau_days / scaling.days_per_year;
        match implied_vol(q.price, q.spot, q.strike, tau, q.rate) {
            Ok(iv) => {
                let y = if scaling.log_iv { iv.ln() } else { iv };
                obs.push(SparseObservation { surface_id: q.surface_id, t, s, y });
                report.accepted += 1;
            }
            Err(Error::PriceOutOfBracket { .. }) => report.outside_bracket += 1,
            Err(e) => return Err(e),
        }
    }
    let n = quotes.iter().map(|q| q.surface_id + 1).max().unwrap_or(0);
    Ok((SparseDataset::new(obs, n)?, report))
}

pub fn read_options_csv<R: Read>(reader: R) -> Result<Vec<OptionQuote>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<OptionQuote>().enumerate().map(|(line, r)| r.map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))).collect()
}
