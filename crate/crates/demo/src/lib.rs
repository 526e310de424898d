//! Browser demo. Each export takes plain numbers and returns a JSON string
//! with row-major grids, so the page can draw heatmaps without a framework.
//! The `*_json` functions hold the logic and run natively as well.

use nalgebra::DMatrix;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use sepsurf::data::{bs_call_price, implied_vol, Grid2, OptionScaling};
use sepsurf::prediction::{predict, NewObservations, PredictOptions, PredictiveModel};
use sepsurf::separable::{fit_separable, BandwidthSet, FitOptions, SeparableModel};
use sepsurf::simstudy::{relative_error, sample_surfaces, scenario_covariance, Covariance, SampledData, Scenario, ScenarioKind};
use sepsurf::{Error, Result};

// Keeps a click in the page from freezing the tab.
const MAX_GRID: usize = 30;
const MAX_SURFACES: usize = 500;
const MAX_DRAWS: usize = 20_000;

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg.into()))
    }
}

struct Fitted {
    grid: Grid2,
    truth: Covariance,
    data: SampledData,
    model: SeparableModel,
}

fn simulate_fit(scenario: &str, d: usize, n: usize, p: f64, h: f64, seed: u64) -> Result<Fitted> {
    check((2..=MAX_GRID).contains(&d), "grid size must be between 2 and 30")?;
    check((2..=MAX_SURFACES).contains(&n), "number of surfaces must be between 2 and 500")?;
    let kind: ScenarioKind = scenario.parse()?;
    let grid = Grid2::square(d)?;
    let truth = scenario_covariance(&Scenario { kind, grid });
    let data = sample_surfaces(&truth, &grid, n, None, p, seed)?;
    let model = fit_separable(&data.dataset, &grid, &FitOptions { seed, psd_project: true, ..FitOptions::fixed(BandwidthSet::uniform(h)?) })?;
    Ok(Fitted { grid, truth, data, model })
}

fn variance_surface(c: &Covariance) -> Vec<f64> {
    c.to_full().matrix.diagonal().iter().copied().collect()
}

/// Simulates surfaces, fits the separable model and compares it with the
/// scenario covariance.
pub fn simulate_and_fit_json(scenario: &str, grid: usize, n: usize, p: f64, h: f64, seed: u64) -> Result<Value> {
    let f = simulate_fit(scenario, grid, n, p, h, seed)?;
    let est = Covariance::Separable { a: f.model.a.clone(), b: f.model.b.clone() };
    let (true_a, true_b) = match &f.truth {
        Covariance::Separable { a, b } => (Some(row_major(a)), Some(row_major(b))),
        Covariance::Full(_) => (None, None),
    };
    Ok(json!({
        "grid": [f.grid.d1, f.grid.d2],
        "n_obs": f.data.dataset.n_obs(),
        "true_variance": variance_surface(&f.truth),
        "est_variance": variance_surface(&est),
        "true_a": true_a,
        "true_b": true_b,
        "est_a": row_major(&f.model.a),
        "est_b": row_major(&f.model.b),
        "est_mean": row_major(&f.model.mean),
        "sigma2_true": f.data.sigma2,
        "sigma2_est": f.model.sigma2,
        "rel_error": relative_error(&est, &f.truth)?,
    }))
}

/// Predicts one of the simulated surfaces from its own sparse observations
/// and returns pointwise and simultaneous bands next to the latent truth.
#[allow(clippy::too_many_arguments)]
pub fn predict_surface_json(
    scenario: &str,
    grid: usize,
    n: usize,
    p: f64,
    h: f64,
    seed: u64,
    surface: usize,
    alpha: f64,
    draws: usize,
) -> Result<Value> {
    check(draws <= MAX_DRAWS, "at most 20000 draws")?;
    let f = simulate_fit(scenario, grid, n, p, h, seed)?;
    check(surface < n, "surface index out of range")?;
    let obs = &f.data.dataset.by_surface()[surface];
    let new = NewObservations::new(obs.iter().map(|o| (o.t, o.s)).collect(), obs.iter().map(|o| o.y).collect())?;
    let opts = PredictOptions { alpha, n_draws: draws, seed, ..PredictOptions::default() };
    let r = predict(&PredictiveModel::from(&f.model), &new, &opts)?;

    let latent = &f.data.latent[surface];
    let sim = r.simultaneous_halfwidth.as_ref().expect("bands requested");
    let point = r.pointwise_halfwidth.as_ref().expect("bands requested");
    let diff = &r.predicted - latent;
    let covered = diff.iter().zip(sim.iter()).all(|(e, w)| e.abs() <= *w);
    let cells: Vec<[usize; 2]> = obs
        .iter()
        .map(|o| {
            let (i, j) = f.grid.cell_of(o.t, o.s);
            [i, j]
        })
        .collect();
    Ok(json!({
        "grid": [f.grid.d1, f.grid.d2],
        "latent": row_major(latent),
        "predicted": row_major(&r.predicted),
        "pointwise_halfwidth": row_major(point),
        "simultaneous_halfwidth": row_major(sim),
        "observed_cells": cells,
        "observed_values": obs.iter().map(|o| o.y).collect::<Vec<_>>(),
        "z_quantile": r.z_quantile,
        "u_quantile": r.u_quantile,
        "rmse": (diff.norm_squared() / diff.len() as f64).sqrt(),
        "band_covers_truth": covered,
    }))
}

/// Implied volatility of a call quote and where it lands on the unit square
/// under the default scaling.
pub fn implied_volatility_json(price: f64, spot: f64, strike: f64, tau_days: f64, rate: f64) -> Result<Value> {
    let scaling = OptionScaling::default();
    check(tau_days > 0.0, "maturity must be positive")?;
    let iv = implied_vol(price, spot, strike, tau_days / scaling.days_per_year, rate)?;
    let lm = (strike / spot).ln();
    let (t, s) = scaling.to_unit(tau_days, lm);
    Ok(json!({
        "iv": iv,
        "log_iv": iv.ln(),
        "log_moneyness": lm,
        "t": t,
        "s": s,
        "in_domain": (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&s),
    }))
}

pub fn call_price_value(spot: f64, strike: f64, tau_days: f64, rate: f64, sigma: f64) -> Result<f64> {
    bs_call_price(spot, strike, tau_days / OptionScaling::default().days_per_year, rate, sigma)
}

fn to_js(r: Result<Value>) -> std::result::Result<String, String> {
    r.map(|v| v.to_string()).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn simulate_and_fit(scenario: &str, grid: usize, n: usize, p: f64, h: f64, seed: u32) -> std::result::Result<String, String> {
    to_js(simulate_and_fit_json(scenario, grid, n, p, h, seed.into()))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn predict_surface(
    scenario: &str,
    grid: usize,
    n: usize,
    p: f64,
    h: f64,
    seed: u32,
    surface: usize,
    alpha: f64,
    draws: usize,
) -> std::result::Result<String, String> {
    to_js(predict_surface_json(scenario, grid, n, p, h, seed.into(), surface, alpha, draws))
}

#[wasm_bindgen]
pub fn implied_volatility(price: f64, spot: f64, strike: f64, tau_days: f64, rate: f64) -> std::result::Result<String, String> {
    to_js(implied_volatility_json(price, spot, strike, tau_days, rate))
}

#[wasm_bindgen]
pub fn call_price(spot: f64, strike: f64, tau_days: f64, rate: f64, sigma: f64) -> std::result::Result<f64, String> {
    call_price_value(spot, strike, tau_days, rate, sigma).map_err(|e| e.to_string())
}
