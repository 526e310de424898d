//! Best linear unbiased prediction of a latent surface from its own sparse,
//! noisy observations, with pointwise and simultaneous confidence bands.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::baselines::{FourDModel, FullCovariance};
use crate::data::Grid2;
use crate::error::{Error, Result};
use crate::linalg::{from_row_major, row_major, symmetrize};
use crate::par;
use crate::rng::stream_rng;
use crate::separable::SeparableModel;

/// Largest condition number accepted for the observation covariance.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub enum CovarianceModel {
    Separable { a: DMatrix<f64>, b: DMatrix<f64> },
    Full(FullCovariance),
}

/// Mean, covariance and noise level used for prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveModel {
    pub grid: Grid2,
    pub mean: DMatrix<f64>,
    pub covariance: CovarianceModel,
    pub sigma2: f64,
}

impl From<&SeparableModel> for PredictiveModel {
    fn from(m: &SeparableModel) -> Self {
        Self {
            grid: m.grid,
            mean: m.mean.clone(),
            covariance: CovarianceModel::Separable { a: m.a.clone(), b: m.b.clone() },
            sigma2: m.sigma2,
        }
    }
}

impl From<&FourDModel> for PredictiveModel {
    fn from(m: &FourDModel) -> Self {
        Self { grid: m.grid, mean: m.mean.clone(), covariance: CovarianceModel::Full(m.covariance.clone()), sigma2: m.sigma2 }
    }
}

impl PredictiveModel {
    pub fn separable(grid: Grid2, mean: DMatrix<f64>, a: DMatrix<f64>, b: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        let m = Self { grid, mean, covariance: CovarianceModel::Separable { a, b }, sigma2 };
        m.validate()?;
        Ok(m)
    }

    pub fn full(grid: Grid2, mean: DMatrix<f64>, cov: FullCovariance, sigma2: f64) -> Result<Self> {
        let m = Self { grid, mean, covariance: CovarianceModel::Full(cov), sigma2 };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let (d1, d2) = (self.grid.d1, self.grid.d2);
        let bad = |what: &str, m: &DMatrix<f64>, r: usize, c: usize| -> Result<()> {
            if m.shape() != (r, c) {
                return Err(Error::DimensionMismatch { expected: format!("{what} {r}x{c}"), got: format!("{}x{}", m.nrows(), m.ncols()) });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{what} has non-finite entries")));
            }
            Ok(())
        };
        bad("mean", &self.mean, d1, d2)?;
        match &self.covariance {
            CovarianceModel::Separable { a, b } => {
                bad("A", a, d1, d1)?;
                bad("B", b, d2, d2)?;
            }
            CovarianceModel::Full(c) => bad("covariance", &c.matrix, d1 * d2, d1 * d2)?,
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise variance must be nonnegative, got {}", self.sigma2)));
        }
        Ok(())
    }

    /// Covariance between flat cell indices `p = i * d2 + j`.
    pub fn cov(&self, p: usize, q: usize) -> f64 {
        match &self.covariance {
            CovarianceModel::Separable { a, b } => {
                let d2 = self.grid.d2;
                a[(p / d2, q / d2)] * b[(p % d2, q % d2)]
            }
            CovarianceModel::Full(c) => c.matrix[(p, q)],
        }
    }

    fn grid_covariance(&self) -> DMatrix<f64> {
        match &self.covariance {
            CovarianceModel::Separable { a, b } => a.kronecker(b),
            CovarianceModel::Full(c) => c.matrix.clone(),
        }
    }
}

/// Locations and values of a new surface's observations.
#[derive(Clone, Debug, PartialEq)]
pub struct NewObservations {
    pub locations: Vec<(f64, f64)>,
    pub values: Vec<f64>,
}

impl NewObservations {
    pub fn new(locations: Vec<(f64, f64)>, values: Vec<f64>) -> Result<Self> {
        if locations.len() != values.len() {
            return Err(Error::DimensionMismatch { expected: format!("{} values", locations.len()), got: format!("{}", values.len()) });
        }
        if locations.is_empty() {
            return Err(Error::EmptySurface);
        }
        for &(t, s) in &locations {
            if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidArgument(format!("location ({t}, {s}) outside [0,1]^2")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite observation".into()));
        }
        Ok(Self { locations, values })
    }
}

/// Prediction on the grid. Band fields are filled by [`pointwise_band`] and
/// [`simultaneous_band`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlupResult {
    pub grid: Grid2,
    pub predicted: DMatrix<f64>,
    pub cond_var: DMatrix<f64>,
    /// Conditional covariance between flat cell indices.
    pub cond_cov: DMatrix<f64>,
    pub pointwise_halfwidth: Option<DMatrix<f64>>,
    pub simultaneous_halfwidth: Option<DMatrix<f64>>,
    pub alpha: Option<f64>,
    pub u_quantile: Option<f64>,
    pub z_quantile: Option<f64>,
    pub seed: Option<u64>,
    pub n_draws: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct BlupDoc {
    grid: Grid2,
    predicted: Vec<f64>,
    cond_var: Vec<f64>,
    pointwise_halfwidth: Option<Vec<f64>>,
    simultaneous_halfwidth: Option<Vec<f64>>,
    alpha: Option<f64>,
    z_quantile: Option<f64>,
    u_quantile: Option<f64>,
    seed: Option<u64>,
    n_draws: Option<usize>,
}

impl BlupResult {
    /// JSON with row-major grids; the conditional covariance is not stored.
    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(BlupDoc {
            grid: self.grid,
            predicted: row_major(&self.predicted),
            cond_var: row_major(&self.cond_var),
            pointwise_halfwidth: self.pointwise_halfwidth.as_ref().map(row_major),
            simultaneous_halfwidth: self.simultaneous_halfwidth.as_ref().map(row_major),
            alpha: self.alpha,
            z_quantile: self.z_quantile,
            u_quantile: self.u_quantile,
            seed: self.seed,
            n_draws: self.n_draws,
        })?)
    }

    /// Reads back the stored fields; the conditional covariance is rebuilt as
    /// diagonal from `cond_var`.
    pub fn from_json_value(v: serde_json::Value) -> Result<Self> {
        let d: BlupDoc = serde_json::from_value(v)?;
        let (r, c) = (d.grid.d1, d.grid.d2);
        let cond_var = from_row_major(r, c, &d.cond_var)?;
        let opt = |v: Option<Vec<f64>>| v.map(|v| from_row_major(r, c, &v)).transpose();
        Ok(Self {
            grid: d.grid,
            predicted: from_row_major(r, c, &d.predicted)?,
            cond_cov: DMatrix::from_diagonal(&DVector::from_vec(row_major(&cond_var))),
            cond_var,
            pointwise_halfwidth: opt(d.pointwise_halfwidth)?,
            simultaneous_halfwidth: opt(d.simultaneous_halfwidth)?,
            alpha: d.alpha,
            z_quantile: d.z_quantile,
            u_quantile: d.u_quantile,
            seed: d.seed,
            n_draws: d.n_draws,
        })
    }
}

/// BLUP and conditional covariance on the grid.
///
/// Observations are assigned to their nearest cells; several observations in
/// one cell are averaged and carry noise variance `sigma2 / count`. `ridge`
/// is relative to the mean diagonal of the observation covariance.
pub fn blup(model: &PredictiveModel, obs: &NewObservations, ridge: f64) -> Result<BlupResult> {
    model.validate()?;
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge must be nonnegative, got {ridge}")));
    }
    let grid = model.grid;
    let g = grid.n_cells();
    let mut cells: Vec<usize> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for (&(t, s), &y) in obs.locations.iter().zip(&obs.values) {
        let (i, j) = grid.cell_of(t, s);
        let p = i * grid.d2 + j;
        match cells.iter().position(|&c| c == p) {
            Some(k) => {
                sums[k] += y;
                counts[k] += 1.0;
            }
            None => {
                cells.push(p);
                sums.push(y);
                counts.push(1.0);
            }
        }
    }
    let m = cells.len();
    let mean_at = |p: usize| model.mean[(p / grid.d2, p % grid.d2)];
    let resid = DVector::from_fn(m, |k, _| sums[k] / counts[k] - mean_at(cells[k]));
    let mut v = DMatrix::from_fn(m, m, |k, l| model.cov(cells[k], cells[l]));
    for k in 0..m {
        v[(k, k)] += model.sigma2 / counts[k];
    }
    let v = symmetrize(&v);
    let jitter = ridge * v.diagonal().mean();
    let eig = v.symmetric_eigen();
    let lam = eig.eigenvalues.map(|l| l + jitter);
    let (lo, hi) = (lam.min(), lam.max());
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        return Err(Error::SingularSystem(cond));
    }
    let q = &eig.eigenvectors;
    let solve = |rhs: &DMatrix<f64>| -> DMatrix<f64> {
        let mut tmp = q.transpose() * rhs;
        for (r, l) in lam.iter().enumerate() {
            tmp.row_mut(r).unscale_mut(*l);
        }
        q * tmp
    };
    // cross covariance, grid x observed cells
    let k = DMatrix::from_fn(g, m, |p, l| model.cov(p, cells[l]));
    let weights = solve(&k.transpose());
    let fitted = weights.transpose() * &resid;
    let predicted = DMatrix::from_fn(grid.d1, grid.d2, |i, j| {
        let p = i * grid.d2 + j;
        model.mean[(i, j)] + fitted[p]
    });
    let cond_cov = symmetrize(&(model.grid_covariance() - &k * &weights));
    let cond_var = DMatrix::from_fn(grid.d1, grid.d2, |i, j| {
        let p = i * grid.d2 + j;
        cond_cov[(p, p)].max(0.0)
    });
    Ok(BlupResult {
        grid,
        predicted,
        cond_var,
        cond_cov,
        pointwise_halfwidth: None,
        simultaneous_halfwidth: None,
        alpha: None,
        u_quantile: None,
        z_quantile: None,
        seed: None,
        n_draws: None,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0,1), got {alpha}")));
    }
    Ok(())
}

/// `u_{1-alpha/2}`, the two-sided standard normal quantile.
pub fn normal_quantile_two_sided(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - alpha / 2.0))
}

/// Adds half-widths `u_{1-alpha/2} * sqrt(cond_var)`.
pub fn pointwise_band(mut result: BlupResult, alpha: f64) -> Result<BlupResult> {
    let u = normal_quantile_two_sided(alpha)?;
    result.pointwise_halfwidth = Some(result.cond_var.map(|v| u * v.max(0.0).sqrt()));
    result.u_quantile = Some(u);
    result.alpha = Some(alpha);
    Ok(result)
}

/// Adds simultaneous half-widths `z * sqrt(cond_var)`, with `z` the Monte
/// Carlo `(1 - alpha)`-quantile of the maximum absolute value of a Gaussian
/// field with the conditional correlation.
pub fn simultaneous_band(mut result: BlupResult, alpha: f64, n_draws: usize, seed: u64) -> Result<BlupResult> {
    let corr = correlation(&result.cond_cov);
    let z = sup_quantile(&corr, alpha, n_draws, seed)?;
    result.simultaneous_halfwidth = Some(result.cond_var.map(|v| z * v.max(0.0).sqrt()));
    result.z_quantile = Some(z);
    result.alpha = Some(alpha);
    result.seed = Some(seed);
    result.n_draws = Some(n_draws);
    Ok(result)
}

/// Correlation matrix of a covariance; rows and columns with nonpositive
/// variance are zero.
pub fn correlation(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let sd: Vec<f64> = cov.diagonal().iter().map(|&v| if v > 0.0 { v.sqrt() } else { 0.0 }).collect();
    DMatrix::from_fn(cov.nrows(), cov.ncols(), |p, q| {
        if sd[p] > 0.0 && sd[q] > 0.0 {
            if p == q {
                1.0
            } else {
                (cov[(p, q)] / (sd[p] * sd[q])).clamp(-1.0, 1.0)
            }
        } else {
            0.0
        }
    })
}

/// Factor `L` whose rows have unit norm and `L L^T` is the correlation of the
/// PSD part of `corr`, keeping only the eigen-directions that carry variance.
fn field_factor(corr: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut jitter = 0.0;
    loop {
        let mut m = symmetrize(corr);
        if jitter > 0.0 {
            for p in 0..m.nrows() {
                m[(p, p)] += jitter;
            }
        }
        let n = m.nrows();
        let eig = m.symmetric_eigen();
        let finite = eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).all(|v| v.is_finite());
        if finite {
            let top = eig.eigenvalues.max().max(0.0);
            let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&k| eig.eigenvalues[k] > 1e-12 * top).collect();
            let mut l = DMatrix::from_fn(n, keep.len(), |p, c| {
                let k = keep[c];
                eig.eigenvectors[(p, k)] * eig.eigenvalues[k].sqrt()
            });
            // dropping negative directions of an indefinite input inflates the
            // diagonal; rescale so every component is standard normal again
            for mut row in l.row_iter_mut() {
                let norm = row.norm();
                if norm > 0.0 {
                    row /= norm;
                }
            }
            return Ok(l);
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > 1e-6 {
            return Err(Error::FactorizationFailure);
        }
    }
}

const DRAW_CHUNK: usize = 256;

/// Monte Carlo `(1 - alpha)`-quantile of `max_p |Z_p|` for a centered
/// Gaussian vector with correlation `corr`. Draw `k` uses its own random
/// stream, so the value does not depend on scheduling.
pub fn sup_quantile(corr: &DMatrix<f64>, alpha: f64, n_draws: usize, seed: u64) -> Result<f64> {
    check_alpha(alpha)?;
    if n_draws == 0 {
        return Err(Error::InvalidArgument("n_draws must be positive".into()));
    }
    if corr.nrows() != corr.ncols() {
        return Err(Error::DimensionMismatch { expected: "square correlation".into(), got: format!("{}x{}", corr.nrows(), corr.ncols()) });
    }
    let factor = field_factor(corr)?;
    let rank = factor.ncols();
    if rank == 0 {
        return Ok(0.0);
    }
    let chunks = n_draws.div_ceil(DRAW_CHUNK);
    let mut maxima: Vec<f64> = par::map_indexed(chunks, |c| {
        let draws = (c * DRAW_CHUNK)..((c + 1) * DRAW_CHUNK).min(n_draws);
        let mut z = DVector::zeros(rank);
        let mut field = DVector::zeros(factor.nrows());
        draws
            .map(|d| {
                let mut rng = stream_rng(seed, d as u64);
                for v in z.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                field.gemv(1.0, &factor, &z, 0.0);
                field.amax()
            })
            .collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect();
    maxima.sort_by(f64::total_cmp);
    let rank_index = ((1.0 - alpha) * n_draws as f64).ceil() as usize;
    Ok(maxima[rank_index.clamp(1, n_draws) - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub alpha: f64,
    pub ridge: f64,
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { alpha: 0.05, ridge: 1e-8, n_draws: 10_000, seed: 0 }
    }
}

/// BLUP with both bands.
pub fn predict(model: &PredictiveModel, obs: &NewObservations, opts: &PredictOptions) -> Result<BlupResult> {
    let r = blup(model, obs, opts.ridge)?;
    let r = pointwise_band(r, opts.alpha)?;
    simultaneous_band(r, opts.alpha, opts.n_draws, opts.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn constant_model(sigma2: f64) -> PredictiveModel {
        let grid = Grid2::new(3, 2).unwrap();
        PredictiveModel::separable(grid, DMatrix::zeros(3, 2), DMatrix::from_element(3, 3, 1.0), DMatrix::from_element(2, 2, 1.0), sigma2)
            .unwrap()
    }

    #[test]
    fn single_observation_interpolates_without_noise() {
        let obs = NewObservations::new(vec![(0.5, 0.2)], vec![1.7]).unwrap();
        let r = blup(&constant_model(0.0), &obs, 0.0).unwrap();
        assert!(r.predicted.iter().all(|v| (v - 1.7).abs() < 1e-10));
        assert!(r.cond_var.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn single_observation_shrinks_with_noise() {
        let s2 = 0.25;
        let obs = NewObservations::new(vec![(0.5, 0.2)], vec![1.7]).unwrap();
        let r = blup(&constant_model(s2), &obs, 0.0).unwrap();
        assert!(r.predicted.iter().all(|v| (v - 1.7 / (1.0 + s2)).abs() < 1e-10));
        assert!(r.cond_var.iter().all(|v| (v - (1.0 - 1.0 / (1.0 + s2))).abs() < 1e-10));
    }

    #[test]
    fn zero_residuals_predict_the_mean() {
        let obs = NewObservations::new(vec![(0.1, 0.1), (0.9, 0.9)], vec![0.0, 0.0]).unwrap();
        let r = blup(&constant_model(0.1), &obs, 1e-8).unwrap();
        assert!(r.predicted.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicates_are_averaged_with_reduced_noise() {
        let m = constant_model(0.5);
        let two = NewObservations::new(vec![(0.5, 0.2), (0.52, 0.22)], vec![1.0, 3.0]).unwrap();
        let one = blup(&m, &two, 0.0).unwrap();
        // one averaged observation of 2.0 with noise 0.25
        assert_abs_diff_eq!(one.predicted[(0, 0)], 2.0 / 1.25, epsilon = 1e-12);
    }

    #[test]
    fn singular_system_is_reported() {
        let obs = NewObservations::new(vec![(0.1, 0.1), (0.9, 0.9)], vec![1.0, 2.0]).unwrap();
        assert!(matches!(blup(&constant_model(0.0), &obs, 0.0), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn interpolates_at_observed_cell() {
        let grid = Grid2::square(4).unwrap();
        let a = DMatrix::from_fn(4, 4, |i, k| (-(i as f64 - k as f64).abs() / 2.0).exp());
        let b = DMatrix::from_fn(4, 4, |j, l| (-(j as f64 - l as f64).abs()).exp());
        let mean = DMatrix::from_fn(4, 4, |i, j| (i + j) as f64 * 0.1);
        let m = PredictiveModel::separable(grid, mean, a.clone(), b.clone(), 0.0).unwrap();
        let obs = NewObservations::new(vec![(0.3, 0.6), (0.9, 0.1)], vec![1.5, -0.5]).unwrap();
        let r = blup(&m, &obs, 0.0).unwrap();
        assert_abs_diff_eq!(r.predicted[(1, 2)], 1.5, epsilon = 1e-8);
        assert_abs_diff_eq!(r.predicted[(3, 0)], -0.5, epsilon = 1e-8);
        for i in 0..4 {
            for j in 0..4 {
                assert!(r.cond_var[(i, j)] <= a[(i, i)] * b[(j, j)] + 1e-10);
            }
        }
    }

    #[test]
    fn quantiles() {
        assert_abs_diff_eq!(normal_quantile_two_sided(0.05).unwrap(), 1.959964, epsilon = 1e-5);
        // inverse of the normal CDF at 0.84, from a high-precision table
        assert_abs_diff_eq!(normal_quantile_two_sided(0.32).unwrap(), 0.994457883209753, epsilon = 1e-9);
        assert!(normal_quantile_two_sided(0.0).is_err());
    }

    #[test]
    fn zero_variance_gives_zero_bands() {
        let obs = NewObservations::new(vec![(0.5, 0.2)], vec![1.7]).unwrap();
        let r = blup(&constant_model(0.0), &obs, 0.0).unwrap();
        let r = pointwise_band(r, 0.05).unwrap();
        let r = simultaneous_band(r, 0.05, 500, 1).unwrap();
        assert!(r.pointwise_halfwidth.unwrap().iter().all(|&v| v == 0.0));
        assert!(r.simultaneous_halfwidth.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perfectly_correlated_field_reduces_to_one_gaussian() {
        let corr = DMatrix::from_element(6, 6, 1.0);
        let z = sup_quantile(&corr, 0.05, 100_000, 3).unwrap();
        assert!((z - 1.959964).abs() < 0.03, "{z}");
    }

    #[test]
    fn sup_quantile_is_at_least_pointwise() {
        let corr = DMatrix::from_fn(5, 5, |p, q| 0.6f64.powi((p as i32 - q as i32).abs()));
        let z = sup_quantile(&corr, 0.05, 20_000, 9).unwrap();
        assert!(z >= 1.959964 - 0.03, "{z}");
    }

    #[test]
    fn sup_quantile_is_deterministic() {
        let corr = DMatrix::from_fn(4, 4, |p, q| if p == q { 1.0 } else { 0.3 });
        let a = sup_quantile(&corr, 0.1, 3000, 5).unwrap();
        let b = sup_quantile(&corr, 0.1, 3000, 5).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn json_round_trip() {
        let obs = NewObservations::new(vec![(0.5, 0.2)], vec![1.7]).unwrap();
        let r = predict(&constant_model(0.3), &obs, &PredictOptions { n_draws: 200, ..Default::default() }).unwrap();
        let back = BlupResult::from_json_value(r.to_json_value().unwrap()).unwrap();
        assert_eq!(back.predicted, r.predicted);
        assert_eq!(back.simultaneous_halfwidth, r.simultaneous_halfwidth);
        assert_eq!(back.z_quantile, r.z_quantile);
    }

    #[test]
    fn indefinite_correlation_stays_below_bonferroni() {
        let c = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, -0.9, 0.9, 1.0, 0.9, -0.9, 0.9, 1.0]);
        assert!(c.clone().symmetric_eigen().eigenvalues.min() < 0.0);
        let z = sup_quantile(&c, 0.05, 20_000, 4).unwrap();
        let bonferroni = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - 0.05 / 6.0);
        assert!(z <= bonferroni + 0.02, "{z} vs {bonferroni}");
        assert!(z >= 1.95);
    }
}
