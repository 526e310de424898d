//! Simulation scenarios, sparse sampling, error metrics, the runtime
//! benchmark and the hold-out prediction harness.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bandwidth::{fold_assignment, transfer_to_4d};
use crate::baselines::{bsa_default, fit_4d, presmooth_predict, separable_residual, smooth4d_covariance, FullCovariance};
use crate::data::{center, grid_dataset, Grid2, SparseDataset, SparseObservation};
use crate::error::{Error, Result};
use crate::linalg::{symmetrize, trace};
use crate::par;
use crate::prediction::{blup, NewObservations, PredictiveModel};
use crate::rng::{derive_seed, stream_rng};
use crate::separable::{estimate_mean, fit_separable_detailed, fit_separable_unpooled, BandwidthSet, FitOptions};
use crate::smoothing::{Bandwidths2, SmootherSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Fourier,
    Brownian,
    Gneiting,
    FourierLegendre,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [Self::Fourier, Self::Brownian, Self::Gneiting, Self::FourierLegendre];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fourier => "fourier",
            Self::Brownian => "brownian",
            Self::Gneiting => "gneiting",
            Self::FourierLegendre => "fourier_legendre",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fourier" => Ok(Self::Fourier),
            "brownian" => Ok(Self::Brownian),
            "gneiting" => Ok(Self::Gneiting),
            "fourier_legendre" => Ok(Self::FourierLegendre),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario '{other}' (expected fourier, brownian, gneiting or fourier_legendre)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub grid: Grid2,
}

/// A covariance on the grid, separable or not.
#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Separable { a: DMatrix<f64>, b: DMatrix<f64> },
    Full(FullCovariance),
}

impl Covariance {
    pub fn to_full(&self) -> FullCovariance {
        match self {
            Self::Separable { a, b } => FullCovariance::from_separable(a, b),
            Self::Full(c) => c.clone(),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            Self::Separable { a, b } => trace(a) * trace(b),
            Self::Full(c) => trace(&c.matrix),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Self::Separable { a, b } => (a.nrows(), b.nrows()),
            Self::Full(c) => (c.d1, c.d2),
        }
    }

    /// Zero-mean predictive model with this covariance.
    pub fn predictive(&self, grid: Grid2, sigma2: f64) -> Result<PredictiveModel> {
        let mean = DMatrix::zeros(grid.d1, grid.d2);
        match self {
            Self::Separable { a, b } => PredictiveModel::separable(grid, mean, a.clone(), b.clone(), sigma2),
            Self::Full(c) => PredictiveModel::full(grid, mean, c.clone(), sigma2),
        }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        use crate::linalg::row_major;
        match self {
            Self::Separable { a, b } => serde_json::json!({
                "kind": "separable",
                "d1": a.nrows(),
                "d2": b.nrows(),
                "A": row_major(a),
                "B": row_major(b),
            }),
            Self::Full(c) => serde_json::json!({
                "kind": "full",
                "d1": c.d1,
                "d2": c.d2,
                "C": row_major(&c.matrix),
            }),
        }
    }

    pub fn from_json_value(v: &serde_json::Value) -> Result<Self> {
        use crate::linalg::from_row_major;
        let dim = |k: &str| v.get(k).and_then(|x| x.as_u64()).map(|x| x as usize).ok_or_else(|| Error::Parse(format!("missing '{k}'")));
        let arr = |k: &str| -> Result<Vec<f64>> {
            serde_json::from_value(v.get(k).cloned().ok_or_else(|| Error::Parse(format!("missing '{k}'")))?).map_err(Error::from)
        };
        let (d1, d2) = (dim("d1")?, dim("d2")?);
        match v.get("kind").and_then(|k| k.as_str()) {
            Some("separable") => Ok(Self::Separable { a: from_row_major(d1, d1, &arr("A")?)?, b: from_row_major(d2, d2, &arr("B")?)? }),
            Some("full") => Ok(Self::Full(FullCovariance::new(d1, d2, from_row_major(d1 * d2, d1 * d2, &arr("C")?)?)?)),
            _ => Err(Error::Parse("covariance kind must be 'separable' or 'full'".into())),
        }
    }
}

const FOURIER_TERMS: usize = 10;
const LEGENDRE_RANK: usize = 4;
const LEGENDRE_WEIGHT: f64 = 0.5;

/// `k`-th trigonometric basis function (`k >= 1`): 1, sqrt2 sin(2 pi t),
/// sqrt2 cos(2 pi t), sqrt2 sin(4 pi t), ...
fn trig(k: usize, t: f64) -> f64 {
    use std::f64::consts::{PI, SQRT_2};
    if k == 1 {
        return 1.0;
    }
    let freq = (k / 2) as f64;
    if k.is_multiple_of(2) {
        SQRT_2 * (2.0 * PI * freq * t).sin()
    } else {
        SQRT_2 * (2.0 * PI * freq * t).cos()
    }
}

/// Orthonormal shifted Legendre polynomial of degree `n` on `[0,1]`.
fn shifted_legendre(n: usize, t: f64) -> f64 {
    let x = 2.0 * t - 1.0;
    let (mut p0, mut p1) = (1.0, x);
    let p = match n {
        0 => 1.0,
        1 => x,
        _ => {
            for k in 1..n {
                let kf = k as f64;
                let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    };
    (2.0 * n as f64 + 1.0).sqrt() * p
}

fn spectral_kernel(axis: &[f64], rank: usize, basis: impl Fn(usize, f64) -> f64) -> DMatrix<f64> {
    let d = axis.len();
    DMatrix::from_fn(d, d, |i, k| (1..=rank).map(|r| basis(r, axis[i]) * basis(r, axis[k]) / (r * r) as f64).sum())
}

/// Fourier kernel on the axis before normalization.
pub fn fourier_kernel(axis: &[f64]) -> DMatrix<f64> {
    spectral_kernel(axis, FOURIER_TERMS, trig)
}

/// Rank-4 shifted-Legendre kernel with eigenvalues `1, 1/4, 1/9, 1/16`.
pub fn legendre_kernel(axis: &[f64]) -> DMatrix<f64> {
    spectral_kernel(axis, LEGENDRE_RANK, |r, t| shifted_legendre(r - 1, t))
}

pub fn brownian_kernel(axis: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(axis.len(), axis.len(), |i, k| axis[i].min(axis[k]))
}

/// Gneiting space-time covariance with `a = b = tau = alpha = gamma = sigma2 = 1`
/// and `beta = 0.7`, with a decaying exponential in the spatial lag.
pub fn gneiting(dt: f64, ds: f64) -> f64 {
    let (a, b, tau, alpha, gamma, sigma2, beta) = (1.0f64, 1.0f64, 1.0, 1.0, 1.0, 1.0, 0.7);
    let psi = a * a * dt.abs().powf(2.0 * alpha) + 1.0;
    sigma2 / psi.powf(tau) * (-(b * b) * ds.abs().powf(2.0 * gamma) / psi.powf(beta * gamma)).exp()
}

fn unit_trace(m: DMatrix<f64>) -> DMatrix<f64> {
    let tr = trace(&m);
    m / tr
}

/// Covariance of a scenario on its grid, scaled to trace one.
pub fn scenario_covariance(sc: &Scenario) -> Covariance {
    let (t, s) = (sc.grid.t_axis(), sc.grid.s_axis());
    match sc.kind {
        ScenarioKind::Fourier => Covariance::Separable { a: unit_trace(fourier_kernel(&t)), b: unit_trace(fourier_kernel(&s)) },
        ScenarioKind::Brownian => Covariance::Separable { a: unit_trace(brownian_kernel(&t)), b: unit_trace(brownian_kernel(&s)) },
        ScenarioKind::Gneiting => {
            let c = FullCovariance::from_fn(sc.grid.d1, sc.grid.d2, |i, j, i2, j2| gneiting(t[i] - t[i2], s[j] - s[j2]));
            let tr = trace(&c.matrix);
            Covariance::Full(FullCovariance { matrix: c.matrix / tr, ..c })
        }
        ScenarioKind::FourierLegendre => {
            let first = unit_trace(fourier_kernel(&t)).kronecker(&unit_trace(fourier_kernel(&s)));
            let second = unit_trace(legendre_kernel(&t)).kronecker(&unit_trace(legendre_kernel(&s)));
            let m = first + second * LEGENDRE_WEIGHT;
            let tr = trace(&m);
            Covariance::Full(FullCovariance { d1: sc.grid.d1, d2: sc.grid.d2, matrix: m / tr })
        }
    }
}

/// Relative tolerance on negative eigenvalues that are silently clipped.
const PSD_TOLERANCE: f64 = 1e-8;

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if lo < -PSD_TOLERANCE * hi.max(0.0) || hi < 0.0 {
        return Err(Error::NonPsdCovariance(lo));
    }
    if lo < 0.0 {
        warn!("clipping negative eigenvalue {lo:e} of a sampling covariance");
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

/// Number of cells kept per surface for sampling fraction `p`.
pub fn cells_per_surface(p: f64, grid: &Grid2) -> usize {
    let raw = p * grid.n_cells() as f64;
    ((raw - 1e-9 * raw.max(1.0)).ceil() as usize).clamp(1, grid.n_cells())
}

/// Simulated sparse data and the latent surfaces behind it.
#[derive(Clone, Debug)]
pub struct SampledData {
    pub dataset: SparseDataset,
    pub latent: Vec<DMatrix<f64>>,
    pub sigma2: f64,
}

/// Draws `n` zero-mean Gaussian surfaces on the grid, adds white noise of
/// variance `noise_sigma2` (default `1 / (d1 d2)`) and keeps a uniformly
/// chosen `ceil(p d1 d2)` cells of each, located at the cell midpoints.
pub fn sample_surfaces(cov: &Covariance, grid: &Grid2, n: usize, noise_sigma2: Option<f64>, p: f64, seed: u64) -> Result<SampledData> {
    if cov.dims() != (grid.d1, grid.d2) {
        return Err(Error::DimensionMismatch { expected: format!("{}x{}", grid.d1, grid.d2), got: format!("{:?}", cov.dims()) });
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling fraction must lie in (0,1], got {p}")));
    }
    let sigma2 = noise_sigma2.unwrap_or(1.0 / grid.n_cells() as f64);
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise variance must be nonnegative, got {sigma2}")));
    }
    let m = cells_per_surface(p, grid);
    let (d1, d2) = (grid.d1, grid.d2);
    enum Root {
        Sep(DMatrix<f64>, DMatrix<f64>),
        Full(DMatrix<f64>),
    }
    let root = match cov {
        Covariance::Separable { a, b } => Root::Sep(psd_sqrt(a)?, psd_sqrt(b)?),
        Covariance::Full(c) => Root::Full(psd_sqrt(&c.matrix)?),
    };
    let noise_sd = sigma2.sqrt();
    let surfaces = par::map_indexed(n, |id| {
        let mut rng = stream_rng(seed, id as u64);
        let z = DMatrix::<f64>::from_fn(d1, d2, |_, _| StandardNormal.sample(&mut rng));
        let latent = match &root {
            Root::Sep(la, lb) => la * z * lb.transpose(),
            Root::Full(l) => {
                let flat = nalgebra::DVector::from_iterator(d1 * d2, z.transpose().iter().copied());
                let x = l * flat;
                DMatrix::from_fn(d1, d2, |i, j| x[i * d2 + j])
            }
        };
        let mut cells = sample_indices(&mut rng, d1 * d2, m).into_vec();
        cells.sort_unstable();
        let obs: Vec<SparseObservation> = cells
            .into_iter()
            .map(|c| {
                let (i, j) = (c / d2, c % d2);
                let e: f64 = StandardNormal.sample(&mut rng);
                SparseObservation { surface_id: id, t: grid.t_mid(i), s: grid.s_mid(j), y: latent[(i, j)] + noise_sd * e }
            })
            .collect();
        (latent, obs)
    });
    let (latent, obs): (Vec<_>, Vec<_>) = surfaces.into_iter().unzip();
    let dataset = SparseDataset::new(obs.into_iter().flatten().collect(), n)?;
    Ok(SampledData { dataset, latent, sigma2 })
}

fn frob_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

fn diff_norm(x: &Covariance, y: &Covariance) -> f64 {
    match (x, y) {
        (Covariance::Separable { a, b }, Covariance::Separable { a: c, b: d }) => {
            let sq = a.norm_squared() * b.norm_squared() + c.norm_squared() * d.norm_squared() - 2.0 * frob_inner(a, c) * frob_inner(b, d);
            sq.max(0.0).sqrt()
        }
        (Covariance::Separable { a, b }, Covariance::Full(f)) | (Covariance::Full(f), Covariance::Separable { a, b }) => {
            separable_residual(f, a, b)
        }
        (Covariance::Full(f), Covariance::Full(g)) => (&f.matrix - &g.matrix).norm(),
    }
}

fn norm(x: &Covariance) -> f64 {
    match x {
        Covariance::Separable { a, b } => a.norm() * b.norm(),
        Covariance::Full(f) => f.matrix.norm(),
    }
}

/// `||estimate - truth||_F / ||truth||_F`, separable operands expanded lazily.
pub fn relative_error(estimate: &Covariance, truth: &Covariance) -> Result<f64> {
    if estimate.dims() != truth.dims() {
        return Err(Error::DimensionMismatch { expected: format!("{:?}", truth.dims()), got: format!("{:?}", estimate.dims()) });
    }
    let t = norm(truth);
    if !(t > 0.0) {
        return Err(Error::InvalidArgument("truth has zero norm".into()));
    }
    Ok(diff_norm(estimate, truth) / t)
}

/// Sample covariance (around the sample mean) of fully observed surfaces.
pub fn empirical_covariance(latent: &[DMatrix<f64>]) -> Result<FullCovariance> {
    let first = latent.first().ok_or(Error::EmptySurface)?;
    let (d1, d2) = first.shape();
    let g = d1 * d2;
    let flat: Vec<nalgebra::DVector<f64>> =
        latent.iter().map(|x| nalgebra::DVector::from_iterator(g, x.transpose().iter().copied())).collect();
    let mean = flat.iter().fold(nalgebra::DVector::zeros(g), |acc, v| acc + v) / flat.len() as f64;
    let mut c = DMatrix::zeros(g, g);
    for v in &flat {
        let r = v - &mean;
        c.ger(1.0, &r, &r, 1.0);
    }
    FullCovariance::new(d1, d2, c / flat.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutKind {
    Chain,
    Itm,
    Otm,
    Short,
    Long,
}

impl HoldoutKind {
    pub const ALL: [HoldoutKind; 5] = [Self::Chain, Self::Itm, Self::Otm, Self::Short, Self::Long];

    pub fn name(self) -> &'static str {
        match self {
            Self::Chain => "chain",
            Self::Itm => "itm",
            Self::Otm => "otm",
            Self::Short => "short",
            Self::Long => "long",
        }
    }
}

impl FromStr for HoldoutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown hold-out pattern '{s}' (expected chain, itm, otm, short or long)")))
    }
}

/// Which observations of a surface are predicted and which are kept. The
/// moneyness threshold `s0` and maturity threshold `t0` are in unit
/// coordinates; by default they map moneyness 1 and 183 days.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutPattern {
    pub kind: HoldoutKind,
    pub s0: f64,
    pub t0: f64,
}

impl HoldoutPattern {
    pub fn new(kind: HoldoutKind) -> Self {
        Self { kind, s0: 0.5, t0: (183.0 - 14.0) / (365.0 - 14.0) }
    }

    /// Prediction tasks `(discarded, kept)` for one surface; tasks with an
    /// empty side are dropped. Chains are observations sharing a grid row.
    pub fn tasks(&self, obs: &[SparseObservation], grid: &Grid2) -> Vec<(Vec<SparseObservation>, Vec<SparseObservation>)> {
        let split = |pred: &dyn Fn(&SparseObservation) -> bool| {
            let (d, k): (Vec<_>, Vec<_>) = obs.iter().partition(|o| pred(o));
            vec![(d, k)]
        };
        let tasks = match self.kind {
            HoldoutKind::Itm => split(&|o| o.s <= self.s0),
            HoldoutKind::Otm => split(&|o| o.s >= self.s0),
            HoldoutKind::Short => split(&|o| o.t < self.t0),
            HoldoutKind::Long => split(&|o| o.t > self.t0),
            HoldoutKind::Chain => {
                let mut rows: Vec<usize> = obs.iter().map(|o| grid.cell_of(o.t, o.s).0).collect();
                rows.sort_unstable();
                rows.dedup();
                if rows.len() < 2 {
                    return Vec::new();
                }
                rows.into_iter().map(|r| obs.iter().partition(|o| grid.cell_of(o.t, o.s).0 == r)).collect()
            }
        };
        tasks.into_iter().filter(|(d, k)| !d.is_empty() && !k.is_empty()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Presmooth,
    Separable,
    FourD,
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Presmooth => "presmooth",
            Self::Separable => "separable",
            Self::FourD => "4d",
            Self::Oracle => "oracle",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "presmooth" | "pre-smooth" | "pre_smooth" => Ok(Self::Presmooth),
            "separable" => Ok(Self::Separable),
            "4d" | "fourd" => Ok(Self::FourD),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HoldoutConfig {
    pub pattern: HoldoutPattern,
    pub folds: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Bandwidths of the fitted methods.
    pub bandwidths: BandwidthSet,
    /// Bandwidth of the per-surface benchmark smoother.
    pub presmooth_bw: Bandwidths2,
    pub ridge: f64,
    /// Model with the true components, required by [`Method::Oracle`].
    pub oracle: Option<PredictiveModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRow {
    pub pattern: String,
    pub fold: usize,
    pub surface_id: usize,
    pub method: String,
    pub rmse_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub rows: Vec<HoldoutRow>,
    /// Surfaces without a task whose kept and discarded parts are both nonempty.
    pub skipped_surfaces: usize,
    /// `(method, failures)`: surfaces where the method could not predict.
    pub failures: Vec<(String, usize)>,
    /// `(method, median ratio)`.
    pub medians: Vec<(String, f64)>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn fit_models(train: &SparseDataset, grid: &Grid2, cfg: &HoldoutConfig) -> Result<Vec<(Method, PredictiveModel)>> {
    let mut out = Vec::new();
    let needs_fit = cfg.methods.iter().any(|m| matches!(m, Method::Separable | Method::FourD));
    if !needs_fit {
        if cfg.methods.contains(&Method::Oracle) {
            out.push((
                Method::Oracle,
                cfg.oracle.clone().ok_or_else(|| Error::InvalidArgument("oracle method needs true model components".into()))?,
            ));
        }
        return Ok(out);
    }
    let opts = FitOptions { psd_project: true, ..FitOptions::fixed(cfg.bandwidths) };
    let fit = fit_separable_detailed(train, grid, &opts)?;
    for &m in &cfg.methods {
        match m {
            Method::Separable => out.push((m, PredictiveModel::from(&fit.model))),
            Method::FourD => out.push((m, PredictiveModel::from(&fit_4d(train, grid, cfg.bandwidths, true)?))),
            Method::Oracle => {
                out.push((m, cfg.oracle.clone().ok_or_else(|| Error::InvalidArgument("oracle method needs true model components".into()))?))
            }
            Method::Presmooth => {}
        }
    }
    Ok(out)
}

fn predict_at(model: &PredictiveModel, kept: &[SparseObservation], targets: &[SparseObservation], ridge: f64) -> Result<Vec<f64>> {
    let obs = NewObservations::new(kept.iter().map(|o| (o.t, o.s)).collect(), kept.iter().map(|o| o.y).collect())?;
    let r = blup(model, &obs, ridge)?;
    Ok(targets.iter().map(|o| r.predicted[model.grid.cell_of(o.t, o.s)]).collect())
}

/// K-fold hold-out comparison: models are fitted on the training folds, then
/// on every test surface the discarded observations are predicted from the
/// kept ones. Each row is one surface's RMSE relative to pre-smoothing, with
/// the chain pattern pooling all its tasks on a surface.
pub fn holdout_evaluate(ds: &SparseDataset, grid: &Grid2, cfg: &HoldoutConfig) -> Result<HoldoutReport> {
    if cfg.folds < 2 || cfg.folds > ds.n_surfaces() {
        return Err(Error::InvalidArgument(format!("need 2 <= folds <= {} surfaces, got {}", ds.n_surfaces(), cfg.folds)));
    }
    let assign = fold_assignment(ds.n_surfaces(), cfg.folds, cfg.seed);
    let groups = ds.by_surface();
    let settings = SmootherSettings::default();
    let mut rows = Vec::new();
    let mut skipped = 0;
    let mut failures: Vec<(Method, usize)> = cfg.methods.iter().map(|&m| (m, 0)).collect();
    for fold in 0..cfg.folds {
        let train_ids: Vec<usize> = (0..ds.n_surfaces()).filter(|&i| assign[i] != fold).collect();
        let test_ids: Vec<usize> = (0..ds.n_surfaces()).filter(|&i| assign[i] == fold).collect();
        let started = Instant::now();
        let models = fit_models(&ds.subset(&train_ids)?, grid, cfg)?;
        info!("fold {fold}: fitted {} model(s) in {:.2?}", models.len(), started.elapsed());
        let per_surface = par::map_indexed(test_ids.len(), |k| {
            let id = test_ids[k];
            let tasks = cfg.pattern.tasks(&groups[id], grid);
            if tasks.is_empty() {
                return None;
            }
            let mut base_sse = 0.0;
            let mut sse: Vec<Option<f64>> = models.iter().map(|_| Some(0.0)).collect();
            for (discarded, kept) in &tasks {
                let pre = presmooth_predict(kept, grid, cfg.presmooth_bw, &settings).ok()?;
                base_sse += discarded.iter().map(|o| (pre[grid.cell_of(o.t, o.s)] - o.y).powi(2)).sum::<f64>();
                for (slot, (_, model)) in sse.iter_mut().zip(&models) {
                    *slot = match (*slot, predict_at(model, kept, discarded, cfg.ridge)) {
                        (Some(acc), Ok(pred)) => Some(acc + pred.iter().zip(discarded).map(|(p, o)| (p - o.y).powi(2)).sum::<f64>()),
                        _ => None,
                    };
                }
            }
            Some((id, base_sse, sse))
        });
        for entry in per_surface {
            let Some((id, base, sse)) = entry else {
                skipped += 1;
                continue;
            };
            if !(base > 0.0) {
                skipped += 1;
                continue;
            }
            for &m in &cfg.methods {
                let ratio = match m {
                    Method::Presmooth => Some(1.0),
                    _ => {
                        let idx = models.iter().position(|(mm, _)| *mm == m).expect("fitted method");
                        sse[idx].map(|s| (s / base).sqrt())
                    }
                };
                match ratio {
                    Some(r) => rows.push(HoldoutRow {
                        pattern: cfg.pattern.kind.name().into(),
                        fold,
                        surface_id: id,
                        method: m.name().into(),
                        rmse_ratio: r,
                    }),
                    None => {
                        if let Some(f) = failures.iter_mut().find(|(mm, _)| *mm == m) {
                            f.1 += 1;
                        }
                    }
                }
            }
        }
    }
    let medians = cfg
        .methods
        .iter()
        .filter_map(|m| {
            median(rows.iter().filter(|r| r.method == m.name()).map(|r| r.rmse_ratio).collect()).map(|v| (m.name().to_string(), v))
        })
        .collect();
    Ok(HoldoutReport {
        rows,
        skipped_surfaces: skipped,
        failures: failures.into_iter().map(|(m, c)| (m.name().to_string(), c)).collect(),
        medians,
    })
}

#[derive(Clone, Debug)]
pub struct BenchmarkConfig {
    pub scenarios: Vec<ScenarioKind>,
    pub grid: Grid2,
    pub n: usize,
    pub ps: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub bandwidths: BandwidthSet,
    /// Also run the 4D smoother (costly).
    pub include_4d: bool,
    /// Also run the unpooled separable reference path.
    pub include_unpooled: bool,
    /// Also compute the best separable approximation of the noiseless surfaces.
    pub include_bsa: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub scenario: String,
    pub p: f64,
    pub n: usize,
    pub method: String,
    pub replicate: usize,
    pub rel_error: f64,
    /// Wall time of the estimator; not reproducible across runs.
    #[serde(skip)]
    pub seconds: f64,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64()))
}

/// Relative errors and wall times of the estimators over scenarios, sampling
/// fractions and replicates. Replicate `r` of a cell uses a seed derived from
/// the master seed, the scenario, the fraction index and `r`.
pub fn runtime_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    let grid = cfg.grid;
    let mut rows = Vec::new();
    for (si, &kind) in cfg.scenarios.iter().enumerate() {
        let truth = scenario_covariance(&Scenario { kind, grid });
        for (pi, &p) in cfg.ps.iter().enumerate() {
            for r in 0..cfg.replicates {
                let seed = derive_seed(cfg.seed, ((si * 1000 + pi) * 100_000 + r) as u64);
                let data = sample_surfaces(&truth, &grid, cfg.n, None, p, seed)?;
                // a numerically failed estimator becomes a NaN row rather than aborting the table
                let mut push = |method: &str, est: Result<(Covariance, f64)>| -> Result<()> {
                    let (rel_error, seconds) = match tolerate(est, method)? {
                        Some((c, secs)) => (relative_error(&c, &truth)?, secs),
                        None => (f64::NAN, f64::NAN),
                    };
                    rows.push(BenchmarkRow {
                        scenario: kind.name().into(),
                        p,
                        n: cfg.n,
                        method: method.into(),
                        replicate: r,
                        rel_error,
                        seconds,
                    });
                    Ok(())
                };
                let opts = FitOptions { seed, ..FitOptions::fixed(cfg.bandwidths) };
                let fit = tolerate(timed(|| fit_separable_detailed(&data.dataset, &grid, &opts)), "separable")?;
                let sep = |f: &(crate::separable::SeparableFit, f64), first: bool| -> (Covariance, f64) {
                    let (a, b) = if first { f.0.sweeps[0].clone() } else { (f.0.model.a.clone(), f.0.model.b.clone()) };
                    (Covariance::Separable { a, b }, if first { f64::NAN } else { f.1 })
                };
                match &fit {
                    Some(f) => {
                        push("one_step", Ok(sep(f, true)))?;
                        push("separable", Ok(sep(f, false)))?;
                    }
                    None => {
                        push("one_step", Err(Error::ZeroDenominator))?;
                        push("separable", Err(Error::ZeroDenominator))?;
                    }
                }
                if cfg.include_unpooled {
                    let est = timed(|| fit_separable_unpooled(&data.dataset, &grid, &opts))
                        .map(|(f, s)| (Covariance::Separable { a: f.model.a, b: f.model.b }, s));
                    push("separable_unpooled", est)?;
                }
                if cfg.include_4d {
                    let bw4 = transfer_to_4d(cfg.bandwidths.a, cfg.bandwidths.b);
                    let est = estimate_mean(&data.dataset, &grid, cfg.bandwidths.mean).and_then(|mean| {
                        let centered = center(&grid_dataset(&data.dataset, &grid), &mean)?;
                        timed(|| smooth4d_covariance(&centered, &grid, bw4, &SmootherSettings::default()))
                    });
                    push("4d", est.map(|(c, s)| (Covariance::Full(c), s)))?;
                }
                if cfg.include_bsa {
                    let est = timed(|| bsa_default(&empirical_covariance(&data.latent)?));
                    push("bsa", est.map(|(res, s)| (Covariance::Separable { a: res.a, b: res.b }, s)))?;
                }
                info!("{} p={} replicate {} done", kind.name(), p, r);
            }
        }
    }
    Ok(rows)
}

fn tolerate<T>(res: Result<T>, what: &str) -> Result<Option<T>> {
    match res {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_numerical() => {
            warn!("{what} failed: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Wall times of the pooled separable fit, the unpooled separable fit and
/// the 4D covariance smoother on one dataset at matched bandwidths.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Timings {
    pub separable: f64,
    pub separable_unpooled: f64,
    pub four_d: f64,
}

pub fn time_estimators(ds: &SparseDataset, grid: &Grid2, bw: BandwidthSet) -> Result<Timings> {
    let opts = FitOptions::fixed(bw);
    let (fit, separable) = timed(|| fit_separable_detailed(ds, grid, &opts))?;
    let (_, separable_unpooled) = timed(|| fit_separable_unpooled(ds, grid, &opts))?;
    let centered = center(&grid_dataset(ds, grid), &fit.model.mean)?;
    let bw4 = transfer_to_4d(bw.a, bw.b);
    let (_, four_d) = timed(|| smooth4d_covariance(&centered, grid, bw4, &SmootherSettings::default()))?;
    Ok(Timings { separable, separable_unpooled, four_d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sc(kind: ScenarioKind, d: usize) -> Scenario {
        Scenario { kind, grid: Grid2::square(d).unwrap() }
    }

    #[test]
    fn raw_kernel_values() {
        assert_eq!(brownian_kernel(&[0.3, 0.7])[(0, 1)], 0.3);
        assert_eq!(gneiting(0.0, 0.0), 1.0);
        assert_abs_diff_eq!(gneiting(0.0, 1.0), (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(gneiting(0.0, 1.0), 0.36788, epsilon = 1e-5);
        // psi = 2 at unit temporal lag: 1/2 * exp(-1 / 2^0.7)
        assert_abs_diff_eq!(gneiting(1.0, 1.0), 0.5 * (-(2f64.powf(-0.7))).exp(), epsilon = 1e-15);
    }

    #[test]
    fn legendre_basis_is_orthonormal() {
        // Gauss-Legendre would be exact; a fine midpoint rule is plenty here
        let n = 20_000;
        for a in 0..4 {
            for b in 0..4 {
                let ip: f64 = (0..n)
                    .map(|k| {
                        let t = (k as f64 + 0.5) / n as f64;
                        shifted_legendre(a, t) * shifted_legendre(b, t)
                    })
                    .sum::<f64>()
                    / n as f64;
                assert_abs_diff_eq!(ip, if a == b { 1.0 } else { 0.0 }, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn scenarios_have_unit_trace() {
        for kind in ScenarioKind::ALL {
            let c = scenario_covariance(&sc(kind, 8));
            assert_abs_diff_eq!(c.trace(), 1.0, epsilon = 1e-10);
            let full = c.to_full();
            assert!(full.max_asymmetry() < 1e-12);
        }
    }

    #[test]
    fn separable_scenarios_reconstruct_entries() {
        use rand::Rng;
        let mut rng = stream_rng(1, 0);
        for kind in [ScenarioKind::Fourier, ScenarioKind::Brownian] {
            let c = scenario_covariance(&sc(kind, 9));
            let Covariance::Separable { a, b } = &c else { panic!("separable expected") };
            let full = c.to_full();
            for _ in 0..8 {
                let (i, j, k, l) = (rng.random_range(0..9), rng.random_range(0..9), rng.random_range(0..9), rng.random_range(0..9));
                assert!((full.get(i, j, k, l) - a[(i, k)] * b[(j, l)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gneiting_is_not_separable() {
        let c = scenario_covariance(&sc(ScenarioKind::Gneiting, 8)).to_full();
        let r = bsa_default(&c).unwrap();
        assert!(separable_residual(&c, &r.a, &r.b) / c.matrix.norm() > 0.01);
    }

    #[test]
    fn relative_error_identities() {
        let truth = scenario_covariance(&sc(ScenarioKind::Brownian, 5));
        let Covariance::Separable { a, b } = truth.clone() else { unreachable!() };
        assert!(relative_error(&truth, &truth).unwrap() < 1e-7);
        let zero = Covariance::Separable { a: DMatrix::zeros(5, 5), b: b.clone() };
        assert_abs_diff_eq!(relative_error(&zero, &truth).unwrap(), 1.0, epsilon = 1e-12);
        let double = Covariance::Separable { a: a * 2.0, b };
        assert_abs_diff_eq!(relative_error(&double, &truth).unwrap(), 1.0, epsilon = 1e-12);
        let full = Covariance::Full(truth.to_full());
        assert!(relative_error(&full, &truth).unwrap() < 1e-12);
        assert_abs_diff_eq!(relative_error(&double, &full).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn observation_counts_follow_fraction() {
        let grid = Grid2::square(20).unwrap();
        assert_eq!(cells_per_surface(0.02, &grid), 8);
        assert_eq!(cells_per_surface(0.1, &grid), 40);
        assert_eq!(cells_per_surface(0.1, &Grid2::square(10).unwrap()), 10);
        let truth = scenario_covariance(&Scenario { kind: ScenarioKind::Brownian, grid });
        let data = sample_surfaces(&truth, &grid, 5, None, 0.02, 1).unwrap();
        for g in data.dataset.by_surface() {
            assert_eq!(g.len(), 8);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let grid = Grid2::square(6).unwrap();
        let truth = scenario_covariance(&Scenario { kind: ScenarioKind::Gneiting, grid });
        let a = sample_surfaces(&truth, &grid, 7, None, 0.3, 11).unwrap();
        let b = sample_surfaces(&truth, &grid, 7, None, 0.3, 11).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = sample_surfaces(&truth, &grid, 7, None, 0.3, 12).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn dense_samples_recover_covariance() {
        let grid = Grid2::square(6).unwrap();
        let truth = scenario_covariance(&Scenario { kind: ScenarioKind::Brownian, grid });
        let data = sample_surfaces(&truth, &grid, 10_000, Some(0.0), 1.0, 3).unwrap();
        let emp = empirical_covariance(&data.latent).unwrap();
        assert!(relative_error(&Covariance::Full(emp), &truth).unwrap() < 0.1);
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let grid = Grid2::square(2).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let cov = Covariance::Separable { a, b: DMatrix::identity(2, 2) };
        assert!(matches!(sample_surfaces(&cov, &grid, 2, None, 1.0, 0), Err(Error::NonPsdCovariance(_))));
    }

    #[test]
    fn chain_tasks_split_by_row() {
        let grid = Grid2::square(4).unwrap();
        let mk = |t: f64, s: f64| SparseObservation { surface_id: 0, t, s, y: 0.0 };
        let obs = vec![mk(0.1, 0.1), mk(0.1, 0.6), mk(0.6, 0.4), mk(0.9, 0.9)];
        let tasks = HoldoutPattern::new(HoldoutKind::Chain).tasks(&obs, &grid);
        assert_eq!(tasks.len(), 3);
        assert_eq!(tasks[0].0.len(), 2);
        let single_row = vec![mk(0.1, 0.1), mk(0.1, 0.6)];
        assert!(HoldoutPattern::new(HoldoutKind::Chain).tasks(&single_row, &grid).is_empty());
        let all_low = vec![mk(0.1, 0.1), mk(0.6, 0.2)];
        assert!(HoldoutPattern::new(HoldoutKind::Itm).tasks(&all_low, &grid).is_empty());
        assert_eq!(HoldoutPattern::new(HoldoutKind::Otm).tasks(&all_low, &grid).len(), 0);
        assert_eq!(HoldoutPattern::new(HoldoutKind::Short).tasks(&all_low, &grid).len(), 1);
    }

    #[test]
    fn presmoothing_self_ratio_and_skips() {
        let grid = Grid2::square(6).unwrap();
        let truth = scenario_covariance(&Scenario { kind: ScenarioKind::Brownian, grid });
        let data = sample_surfaces(&truth, &grid, 12, None, 0.3, 5).unwrap();
        let cfg = HoldoutConfig {
            pattern: HoldoutPattern::new(HoldoutKind::Itm),
            folds: 3,
            methods: vec![Method::Presmooth, Method::Oracle],
            seed: 1,
            bandwidths: BandwidthSet::uniform(0.3).unwrap(),
            presmooth_bw: Bandwidths2::uniform(0.3).unwrap(),
            ridge: 1e-8,
            oracle: Some(truth.predictive(grid, data.sigma2).unwrap()),
        };
        let rep = holdout_evaluate(&data.dataset, &grid, &cfg).unwrap();
        assert!(rep.rows.iter().filter(|r| r.method == "presmooth").all(|r| r.rmse_ratio == 1.0));
        assert_eq!(rep.rows.iter().filter(|r| r.method == "presmooth").count() + rep.skipped_surfaces, 12);
    }

    #[test]
    fn benchmark_shape() {
        let cfg = BenchmarkConfig {
            scenarios: vec![ScenarioKind::Fourier],
            grid: Grid2::square(4).unwrap(),
            n: 5,
            ps: vec![0.5, 1.0],
            replicates: 2,
            seed: 3,
            bandwidths: BandwidthSet::uniform(0.4).unwrap(),
            include_4d: true,
            include_unpooled: true,
            include_bsa: true,
        };
        let rows = runtime_benchmark(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 5);
        let again = runtime_benchmark(&cfg).unwrap();
        let errs = |r: &[BenchmarkRow]| r.iter().map(|x| x.rel_error.to_bits()).collect::<Vec<_>>();
        assert_eq!(errs(&rows), errs(&again));
    }
}
