//! The separable estimator: mean surface, temporal and spatial covariance
//! kernels by alternating weighted smoothing of marginalized raw covariances,
//! and the noise level.
//!
//! With `B` fixed, every pair of observed cells `(i, j)`, `(i', j')` of a
//! surface with `j != j'` contributes the point `(t_i, t_i')` with value
//! `Y[i,j] Y[i',j'] / B[j,j']` and weight `B[j,j']^2`. All such points that land
//! on the same grid cell are pooled into one point carrying the summed weight
//! and the weighted mean value, which leaves the local-linear fit unchanged.
//! The spatial step is the transpose.

use log::{debug, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{self, CvReport, CvSpec};
use crate::data::{center, grid_dataset, Grid2, MaskedGridSample, SparseDataset};
use crate::error::{Error, Result};
use crate::linalg::{from_row_major, psd_project, row_major, symmetrize, trace};
use crate::par;
use crate::smoothing::{Bandwidths2, EvalGrid2, LocalLinear2, ScatterCloud, ScatterPoint, SmootherSettings};

/// Bandwidths of the four smoothers in the pipeline. `a` and `b` smooth over
/// `(t, t')` and `(s, s')` respectively, `diag` is the variance smoother.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSet {
    pub mean: Bandwidths2,
    pub a: Bandwidths2,
    pub b: Bandwidths2,
    pub diag: Bandwidths2,
}

impl BandwidthSet {
    pub fn uniform(h: f64) -> Result<Self> {
        let bw = Bandwidths2::uniform(h)?;
        Ok(Self { mean: bw, a: bw, b: bw, diag: bw })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BandwidthPlan {
    Fixed(BandwidthSet),
    Auto(CvSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    /// Number of updates of each kernel; 1 gives the initial pair, 2 the
    /// refined one.
    pub steps: usize,
    pub bandwidths: BandwidthPlan,
    /// Clip negative eigenvalues of both kernels after smoothing.
    pub psd_project: bool,
    pub seed: u64,
    /// Constant value of the initial spatial weighting kernel.
    pub init_scale: f64,
    pub smoother: SmootherSettings,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            steps: 2,
            bandwidths: BandwidthPlan::Auto(CvSpec::default()),
            psd_project: false,
            seed: 0,
            init_scale: 1.0,
            smoother: SmootherSettings::default(),
        }
    }
}

impl FitOptions {
    pub fn fixed(bw: BandwidthSet) -> Self {
        Self { bandwidths: BandwidthPlan::Fixed(bw), ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub convention: String,
    /// Trace of the temporal kernel before rescaling.
    pub trace_a: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub n_surfaces: usize,
    pub n_obs: usize,
    pub seed: u64,
    pub steps: usize,
}

/// Fitted mean, kernels and noise level on a grid. Only the product
/// `A[i,i'] * B[j,j']` is identified; the split follows `normalization`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableModel {
    pub grid: Grid2,
    pub mean: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma2: f64,
    pub normalization: Normalization,
    pub bandwidths: BandwidthSet,
    pub meta: ModelMeta,
}

/// A model together with intermediate iterates and diagnostics.
#[derive(Clone, Debug)]
pub struct SeparableFit {
    pub model: SeparableModel,
    /// Unnormalized `(A, B)` after each step.
    pub sweeps: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    pub diagonal: DMatrix<f64>,
    pub cv: Option<CvReport>,
    /// Evaluation points that needed a widened smoothing window.
    pub widened: usize,
}

fn offdiag(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    out.fill_diagonal(0.0);
    out
}

fn check_square(m: &DMatrix<f64>, d: usize) -> Result<()> {
    if m.shape() != (d, d) {
        return Err(Error::DimensionMismatch { expected: format!("{d}x{d}"), got: format!("{}x{}", m.nrows(), m.ncols()) });
    }
    Ok(())
}

fn ratio(num: &DMatrix<f64>, den: &DMatrix<f64>) -> DMatrix<f64> {
    num.zip_map(den, |n, d| if d != 0.0 { n / d } else { 0.0 })
}

/// Per-surface `(Z_n, W_n)` for the temporal kernel given the spatial one.
pub fn marginalize_temporal(samples: &[MaskedGridSample], b: &DMatrix<f64>) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let parts = temporal_parts(samples, b)?;
    Ok(parts.into_iter().map(|(num, w)| (ratio(&num, &w), w)).unzip())
}

/// Per-surface `(Z_n, W_n)` for the spatial kernel given the temporal one.
pub fn marginalize_spatial(samples: &[MaskedGridSample], a: &DMatrix<f64>) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
    let parts = spatial_parts(samples, a)?;
    Ok(parts.into_iter().map(|(num, w)| (ratio(&num, &w), w)).unzip())
}

/// `(Y B~ Y^T, Q B~2 Q^T)` per surface.
fn temporal_parts(samples: &[MaskedGridSample], b: &DMatrix<f64>) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let Some(first) = samples.first() else { return Ok(Vec::new()) };
    check_square(b, first.values.ncols())?;
    let bt = offdiag(b);
    let bt2 = bt.component_mul(&bt);
    Ok(par::map_indexed(samples.len(), |n| {
        let s = &samples[n];
        (&s.values * &bt * s.values.transpose(), &s.mask * &bt2 * s.mask.transpose())
    }))
}

fn spatial_parts(samples: &[MaskedGridSample], a: &DMatrix<f64>) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let Some(first) = samples.first() else { return Ok(Vec::new()) };
    check_square(a, first.values.nrows())?;
    let at = offdiag(a);
    let at2 = at.component_mul(&at);
    Ok(par::map_indexed(samples.len(), |n| {
        let s = &samples[n];
        (s.values.transpose() * &at * &s.values, s.mask.transpose() * &at2 * &s.mask)
    }))
}

/// Pools per-surface clouds into one point per cell: summed weight and
/// weighted mean value.
pub fn pool(z: &[DMatrix<f64>], w: &[DMatrix<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let (r, c) = z.first().map_or((0, 0), |m| m.shape());
    let mut num = DMatrix::zeros(r, c);
    let mut den = DMatrix::zeros(r, c);
    for (zn, wn) in z.iter().zip(w) {
        num += zn.component_mul(wn);
        den += wn;
    }
    (ratio(&num, &den), den)
}

fn pool_parts(parts: Vec<(DMatrix<f64>, DMatrix<f64>)>, d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut num = DMatrix::zeros(d, d);
    let mut den = DMatrix::zeros(d, d);
    for (n, w) in parts {
        num += n;
        den += w;
    }
    (ratio(&num, &den), den)
}

fn cloud_from_pooled(axis: &[f64], z: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<ScatterCloud> {
    let mut pts = Vec::new();
    for (i, &x) in axis.iter().enumerate() {
        for (k, &y) in axis.iter().enumerate() {
            if w[(i, k)] > 0.0 {
                pts.push(ScatterPoint { x, y, z: z[(i, k)], w: w[(i, k)] });
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::InsufficientPairs);
    }
    ScatterCloud::new(pts)
}

/// Pooled scatter cloud for the temporal kernel.
pub fn temporal_cloud(samples: &[MaskedGridSample], grid: &Grid2, b: &DMatrix<f64>) -> Result<ScatterCloud> {
    let (z, w) = pool_parts(temporal_parts(samples, b)?, grid.d1);
    cloud_from_pooled(&grid.t_axis(), &z, &w)
}

/// Pooled scatter cloud for the spatial kernel.
pub fn spatial_cloud(samples: &[MaskedGridSample], grid: &Grid2, a: &DMatrix<f64>) -> Result<ScatterCloud> {
    let (z, w) = pool_parts(spatial_parts(samples, a)?, grid.d2);
    cloud_from_pooled(&grid.s_axis(), &z, &w)
}

/// Unpooled temporal cloud with one point per raw covariance pair. Only used
/// as a reference and for timing comparisons.
pub fn temporal_cloud_unpooled(samples: &[MaskedGridSample], grid: &Grid2, b: &DMatrix<f64>) -> Result<ScatterCloud> {
    raw_pair_cloud(samples, b, &grid.t_axis(), false)
}

pub fn spatial_cloud_unpooled(samples: &[MaskedGridSample], grid: &Grid2, a: &DMatrix<f64>) -> Result<ScatterCloud> {
    raw_pair_cloud(samples, a, &grid.s_axis(), true)
}

fn raw_pair_cloud(samples: &[MaskedGridSample], other: &DMatrix<f64>, axis: &[f64], spatial: bool) -> Result<ScatterCloud> {
    let mut pts = Vec::new();
    for s in samples {
        let cells: Vec<(usize, usize, f64)> = (0..s.mask.nrows())
            .flat_map(|i| (0..s.mask.ncols()).map(move |j| (i, j)))
            .filter(|&(i, j)| s.mask[(i, j)] > 0.0)
            .map(|(i, j)| (i, j, s.values[(i, j)]))
            .collect();
        for &(i, j, y) in &cells {
            for &(i2, j2, y2) in &cells {
                let (own, own2, fixed, fixed2) = if spatial { (j, j2, i, i2) } else { (i, i2, j, j2) };
                let weight = other[(fixed, fixed2)];
                if fixed == fixed2 || weight == 0.0 {
                    continue;
                }
                pts.push(ScatterPoint { x: axis[own], y: axis[own2], z: y * y2 / weight, w: weight * weight });
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::InsufficientPairs);
    }
    ScatterCloud::new(pts)
}

fn smooth_kernel(cloud: &ScatterCloud, axis: &[f64], bw: Bandwidths2, settings: &SmootherSettings) -> Result<(DMatrix<f64>, usize)> {
    let eval = EvalGrid2::new(axis.to_vec(), axis.to_vec())?;
    let out = LocalLinear2::new(cloud).grid_fallback(bw, &eval, settings);
    let widened = out.widened;
    Ok((symmetrize(&out.into_complete(&eval)?), widened))
}

/// Mean surface by smoothing all observations with unit weights.
pub fn estimate_mean(ds: &SparseDataset, grid: &Grid2, bw: Bandwidths2) -> Result<DMatrix<f64>> {
    estimate_mean_with(ds, grid, bw, &SmootherSettings::default()).map(|(m, _)| m)
}

fn estimate_mean_with(ds: &SparseDataset, grid: &Grid2, bw: Bandwidths2, settings: &SmootherSettings) -> Result<(DMatrix<f64>, usize)> {
    let cloud = ScatterCloud::new(ds.observations().iter().map(|o| ScatterPoint { x: o.t, y: o.s, z: o.y, w: 1.0 }).collect())?;
    let eval = grid.eval_grid();
    let out = LocalLinear2::new(&cloud).grid_fallback(bw, &eval, settings);
    let widened = out.widened;
    Ok((out.into_complete(&eval)?, widened))
}

/// Smoothed variance surface from the squared centered gridded values.
pub fn diagonal_surface(centered: &[MaskedGridSample], grid: &Grid2, bw: Bandwidths2) -> Result<DMatrix<f64>> {
    diagonal_surface_with(centered, grid, bw, &SmootherSettings::default()).map(|(m, _)| m)
}

fn diagonal_surface_with(
    centered: &[MaskedGridSample],
    grid: &Grid2,
    bw: Bandwidths2,
    settings: &SmootherSettings,
) -> Result<(DMatrix<f64>, usize)> {
    let mut sum = DMatrix::<f64>::zeros(grid.d1, grid.d2);
    let mut count = DMatrix::<f64>::zeros(grid.d1, grid.d2);
    for s in centered {
        sum += s.values.component_mul(&s.values);
        count += &s.mask;
    }
    let mut pts = Vec::new();
    for i in 0..grid.d1 {
        for j in 0..grid.d2 {
            if count[(i, j)] > 0.0 {
                pts.push(ScatterPoint { x: grid.t_mid(i), y: grid.s_mid(j), z: sum[(i, j)] / count[(i, j)], w: count[(i, j)] });
            }
        }
    }
    let eval = grid.eval_grid();
    let out = LocalLinear2::new(&ScatterCloud::new(pts)?).grid_fallback(bw, &eval, settings);
    let widened = out.widened;
    Ok((out.into_complete(&eval)?, widened))
}

/// Noise variance from the variance surface `v` and the kernels: the average
/// of `v - A[i,i] B[j,j]` over cells whose midpoints lie strictly inside
/// `[1/4, 3/4]^2`, clamped at zero. Grids with no such cell use all cells.
pub fn noise_from_diagonal(v: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, grid: &Grid2) -> f64 {
    let inside = |x: f64| x > 0.25 && x < 0.75;
    let cells: Vec<(usize, usize)> = (0..grid.d1).flat_map(|i| (0..grid.d2).map(move |j| (i, j))).collect();
    let middle: Vec<_> = cells.iter().copied().filter(|&(i, j)| inside(grid.t_mid(i)) && inside(grid.s_mid(j))).collect();
    let used = if middle.is_empty() { cells } else { middle };
    let total: f64 = used.iter().map(|&(i, j)| v[(i, j)] - a[(i, i)] * b[(j, j)]).sum();
    (total / used.len() as f64).max(0.0)
}

/// Noise variance estimate from centered samples and fitted kernels.
pub fn estimate_noise(centered: &[MaskedGridSample], grid: &Grid2, a: &DMatrix<f64>, b: &DMatrix<f64>, bw: Bandwidths2) -> Result<f64> {
    Ok(noise_from_diagonal(&diagonal_surface(centered, grid, bw)?, a, b, grid))
}

/// Rescales to `trace(A) = 1`, moving the scale into `B`.
pub fn normalize_pair(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let tr = trace(a);
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::NonPositiveTrace(tr));
    }
    if tr < 1e-8 {
        warn!("trace of the temporal kernel is tiny ({tr:e}); the scale split is poorly determined");
    }
    Ok((a / tr, b * tr, tr))
}

impl SeparableModel {
    /// Applies the trace-one convention to `A`.
    pub fn normalize(mut self) -> Result<Self> {
        let (a, b, tr) = normalize_pair(&self.a, &self.b)?;
        self.a = a;
        self.b = b;
        self.normalization = Normalization { convention: "trace_a_one".into(), trace_a: tr };
        Ok(self)
    }

    /// `A[i,i'] * B[j,j']` for cells `p = (i, j)` and `q = (i', j')`.
    pub fn covariance(&self, p: (usize, usize), q: (usize, usize)) -> f64 {
        self.a[(p.0, q.0)] * self.b[(p.1, q.1)]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<ModelDoc>(text)?.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    grid: Grid2,
    mean: Vec<f64>,
    #[serde(rename = "A")]
    a: Vec<f64>,
    #[serde(rename = "B")]
    b: Vec<f64>,
    sigma2: f64,
    normalization: Normalization,
    bandwidths: BandwidthSet,
    meta: ModelMeta,
}

impl From<&SeparableModel> for ModelDoc {
    fn from(m: &SeparableModel) -> Self {
        Self {
            grid: m.grid,
            mean: row_major(&m.mean),
            a: row_major(&m.a),
            b: row_major(&m.b),
            sigma2: m.sigma2,
            normalization: m.normalization.clone(),
            bandwidths: m.bandwidths,
            meta: m.meta.clone(),
        }
    }
}

impl TryFrom<ModelDoc> for SeparableModel {
    type Error = Error;

    fn try_from(d: ModelDoc) -> Result<Self> {
        let grid = Grid2::new(d.grid.d1, d.grid.d2)?;
        Ok(Self {
            grid,
            mean: from_row_major(grid.d1, grid.d2, &d.mean)?,
            a: from_row_major(grid.d1, grid.d1, &d.a)?,
            b: from_row_major(grid.d2, grid.d2, &d.b)?,
            sigma2: d.sigma2,
            normalization: d.normalization,
            bandwidths: d.bandwidths,
            meta: d.meta,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CloudKind {
    Pooled,
    Unpooled,
}

/// Fits the separable model.
pub fn fit_separable(ds: &SparseDataset, grid: &Grid2, opts: &FitOptions) -> Result<SeparableModel> {
    fit_separable_detailed(ds, grid, opts).map(|f| f.model)
}

/// Like [`fit_separable`], also returning the per-step iterates and the
/// cross-validation report.
pub fn fit_separable_detailed(ds: &SparseDataset, grid: &Grid2, opts: &FitOptions) -> Result<SeparableFit> {
    fit_impl(ds, grid, opts, CloudKind::Pooled)
}

/// Reference path that smooths every raw covariance pair as its own scatter
/// point instead of pooling by cell. Same result, more work.
pub fn fit_separable_unpooled(ds: &SparseDataset, grid: &Grid2, opts: &FitOptions) -> Result<SeparableFit> {
    fit_impl(ds, grid, opts, CloudKind::Unpooled)
}

fn fit_impl(ds: &SparseDataset, grid: &Grid2, opts: &FitOptions, kind: CloudKind) -> Result<SeparableFit> {
    if opts.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if !(opts.init_scale != 0.0 && opts.init_scale.is_finite()) {
        return Err(Error::InvalidArgument("initial weighting scale must be nonzero".into()));
    }
    let (bws, cv) = match &opts.bandwidths {
        BandwidthPlan::Fixed(b) => (*b, None),
        BandwidthPlan::Auto(spec) => {
            let (b, report) = bandwidth::select_bandwidths(ds, grid, spec)?;
            (b, Some(report))
        }
    };
    let settings = &opts.smoother;
    let (mean, mut widened) = estimate_mean_with(ds, grid, bws.mean, settings)?;
    let centered = center(&grid_dataset(ds, grid), &mean)?;
    let (t_axis, s_axis) = (grid.t_axis(), grid.s_axis());

    let mut b = DMatrix::from_element(grid.d2, grid.d2, opts.init_scale);
    let mut a = DMatrix::zeros(grid.d1, grid.d1);
    let mut sweeps = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let cloud = match kind {
            CloudKind::Pooled => temporal_cloud(&centered, grid, &b)?,
            CloudKind::Unpooled => temporal_cloud_unpooled(&centered, grid, &b)?,
        };
        let (next_a, w) = smooth_kernel(&cloud, &t_axis, bws.a, settings)?;
        a = if opts.psd_project { psd_project(&next_a) } else { next_a };
        widened += w;
        let cloud = match kind {
            CloudKind::Pooled => spatial_cloud(&centered, grid, &a)?,
            CloudKind::Unpooled => spatial_cloud_unpooled(&centered, grid, &a)?,
        };
        let (next_b, w) = smooth_kernel(&cloud, &s_axis, bws.b, settings)?;
        b = if opts.psd_project { psd_project(&next_b) } else { next_b };
        widened += w;
        debug!("step {}: trace A {:.4e}, trace B {:.4e}", step + 1, trace(&a), trace(&b));
        sweeps.push((a.clone(), b.clone()));
    }

    let (diagonal, w) = diagonal_surface_with(&centered, grid, bws.diag, settings)?;
    widened += w;
    let sigma2 = noise_from_diagonal(&diagonal, &a, &b, grid);
    if widened > 0 {
        debug!("{widened} evaluation points needed widened windows");
    }
    let model = SeparableModel {
        grid: *grid,
        mean,
        a,
        b,
        sigma2,
        normalization: Normalization { convention: "none".into(), trace_a: f64::NAN },
        bandwidths: bws,
        meta: ModelMeta { n_surfaces: ds.n_surfaces(), n_obs: ds.n_obs(), seed: opts.seed, steps: opts.steps },
    }
    .normalize()?;
    Ok(SeparableFit { model, sweeps, diagonal, cv, widened })
}
