//! Weighted local-linear regression with a product Epanechnikov kernel.
//!
//! The two-dimensional smoother evaluates the intercept of the local fit from
//! kernel moments `S_pq` and weighted responses `Q_pq` in closed form, without
//! assembling a design matrix. The four-dimensional smoother accumulates the
//! 5x5 moment matrix and solves it directly.
//!
//! A window whose points all share the evaluation coordinate along some axis
//! still identifies the intercept; that axis is dropped from the local model.
//! Windows that do not identify the intercept are reported as degenerate, and
//! the `*_fallback` entry points widen the bandwidth for that evaluation point
//! only.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Squared relative offset below which an axis is considered to have no spread
/// inside the window.
const ZERO_SPREAD: f64 = 1e-20;

pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Bandwidths of a two-dimensional smoother, in domain units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths2 {
    pub h1: f64,
    pub h2: f64,
}

impl Bandwidths2 {
    pub fn new(h1: f64, h2: f64) -> Result<Self> {
        if !(h1 > 0.0 && h1.is_finite() && h2 > 0.0 && h2.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidths must be positive and finite, got ({h1}, {h2})")));
        }
        Ok(Self { h1, h2 })
    }

    pub fn uniform(h: f64) -> Result<Self> {
        Self::new(h, h)
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self { h1: self.h1 * factor, h2: self.h2 * factor }
    }
}

/// Bandwidths of the four-dimensional smoother, one per covariate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths4(pub [f64; 4]);

impl Bandwidths4 {
    pub fn new(h: [f64; 4]) -> Result<Self> {
        if h.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("bandwidths must be positive and finite, got {h:?}")));
        }
        Ok(Self(h))
    }

    fn scaled(self, factor: f64) -> Self {
        Self(self.0.map(|h| h * factor))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

/// Weighted scatter points `(x, y, z, w)` fed to the surface smoother.
#[derive(Clone, Debug, Default)]
pub struct ScatterCloud {
    points: Vec<ScatterPoint>,
}

impl ScatterCloud {
    pub fn new(points: Vec<ScatterPoint>) -> Result<Self> {
        for p in &points {
            check_point([p.x, p.y], p.z, p.w)?;
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[ScatterPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.points.iter().map(|p| p.w).sum()
    }
}

fn check_point<const D: usize>(coords: [f64; D], z: f64, w: f64) -> Result<()> {
    if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::InvalidArgument(format!("scatter coordinates must lie in [0,1], got {coords:?}")));
    }
    if !z.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite response {z}")));
    }
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::InvalidArgument(format!("weights must be nonnegative and finite, got {w}")));
    }
    Ok(())
}

/// Evaluation points along each axis; the smoother is evaluated on their product.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGrid2 {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl EvalGrid2 {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        for axis in [&xs, &ys] {
            if axis.is_empty() {
                return Err(Error::InvalidArgument("evaluation grid axis is empty".into()));
            }
            if axis.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidArgument("evaluation grid axis must be strictly increasing".into()));
            }
            if axis.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument("evaluation grid must lie in [0,1]".into()));
            }
        }
        Ok(Self { xs, ys })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmootherSettings {
    /// Relative threshold on the determinant of the local normal equations,
    /// measured against the product of its diagonal.
    pub singular_tol: f64,
    /// Number of bandwidth doublings tried by the fallback entry points.
    pub max_doublings: u32,
}

impl Default for SmootherSettings {
    fn default() -> Self {
        Self { singular_tol: 1e-12, max_doublings: 5 }
    }
}

/// Output of a fallback smoothing pass. Cells that stayed degenerate after the
/// last doubling hold `NaN`.
#[derive(Clone, Debug)]
pub struct SmoothedSurface {
    pub values: DMatrix<f64>,
    /// Number of evaluation points that needed a widened window.
    pub widened: usize,
    /// Number of evaluation points left missing.
    pub missing: usize,
}

impl SmoothedSurface {
    /// Converts to a complete matrix, failing on the first missing cell.
    pub fn into_complete(self, grid: &EvalGrid2) -> Result<DMatrix<f64>> {
        if self.missing > 0 {
            for i in 0..self.values.nrows() {
                for j in 0..self.values.ncols() {
                    if self.values[(i, j)].is_nan() {
                        return Err(Error::DegenerateWindow { x: grid.xs[i], y: grid.ys[j] });
                    }
                }
            }
        }
        Ok(self.values)
    }
}

/// Local-linear surface smoother over a fixed cloud. Points are kept sorted by
/// `x` so each evaluation only visits the band `|x - x_k| < h1`.
#[derive(Clone, Debug)]
pub struct LocalLinear2 {
    sorted: Vec<ScatterPoint>,
}

impl LocalLinear2 {
    pub fn new(cloud: &ScatterCloud) -> Self {
        let mut sorted: Vec<ScatterPoint> = cloud.points.iter().copied().filter(|p| p.w > 0.0).collect();
        sorted.sort_by(|a, b| a.x.total_cmp(&b.x));
        Self { sorted }
    }

    fn band(&self, x: f64, h: f64) -> &[ScatterPoint] {
        let lo = self.sorted.partition_point(|p| p.x <= x - h);
        let hi = self.sorted.partition_point(|p| p.x < x + h);
        &self.sorted[lo..hi.max(lo)]
    }

    /// Intercept of the local fit at `(x, y)`, or `None` if the window does not
    /// identify it.
    pub fn eval(&self, x: f64, y: f64, bw: Bandwidths2, singular_tol: f64) -> Option<f64> {
        let (mut s00, mut s10, mut s01, mut s20, mut s11, mut s02) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut q00, mut q10, mut q01) = (0.0, 0.0, 0.0);
        for p in self.band(x, bw.h1) {
            let u = (x - p.x) / bw.h1;
            let v = (y - p.y) / bw.h2;
            if u.abs() >= 1.0 || v.abs() >= 1.0 {
                continue;
            }
            let k = epanechnikov(u) * epanechnikov(v) * p.w;
            s00 += k;
            s10 += k * u;
            s01 += k * v;
            s20 += k * u * u;
            s11 += k * u * v;
            s02 += k * v * v;
            q00 += k * p.z;
            q10 += k * u * p.z;
            q01 += k * v * p.z;
        }
        if !(s00 > 0.0) {
            return None;
        }
        let flat_x = s20 <= ZERO_SPREAD * s00;
        let flat_y = s02 <= ZERO_SPREAD * s00;
        match (flat_x, flat_y) {
            (true, true) => Some(q00 / s00),
            (true, false) => intercept_1d(s00, s01, s02, q00, q01, singular_tol),
            (false, true) => intercept_1d(s00, s10, s20, q00, q10, singular_tol),
            (false, false) => {
                let phi1 = s20 * s02 - s11 * s11;
                let phi2 = s10 * s02 - s01 * s11;
                let phi3 = s01 * s20 - s10 * s11;
                let psi1 = phi1 * q00 - phi2 * q10 - phi3 * q01;
                let psi2 = phi1 * s00 - phi2 * s10 - phi3 * s01;
                // Hadamard: 0 <= det <= s00 * s20 * s02 for the PSD moment matrix.
                if psi2 > singular_tol * s00 * s20 * s02 {
                    Some(psi1 / psi2)
                } else {
                    None
                }
            }
        }
    }

    pub fn grid(&self, bw: Bandwidths2, grid: &EvalGrid2, settings: &SmootherSettings) -> Result<DMatrix<f64>> {
        let (nx, ny) = (grid.xs.len(), grid.ys.len());
        let rows = par::map_indexed(nx, |i| {
            let x = grid.xs[i];
            grid.ys
                .iter()
                .map(|&y| self.eval(x, y, bw, settings.singular_tol).ok_or(Error::DegenerateWindow { x, y }))
                .collect::<Result<Vec<f64>>>()
        });
        let mut out = DMatrix::zeros(nx, ny);
        for (i, row) in rows.into_iter().enumerate() {
            for (j, v) in row?.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }

    pub fn grid_fallback(&self, bw: Bandwidths2, grid: &EvalGrid2, settings: &SmootherSettings) -> SmoothedSurface {
        let (nx, ny) = (grid.xs.len(), grid.ys.len());
        let rows = par::map_indexed(nx, |i| {
            let x = grid.xs[i];
            grid.ys
                .iter()
                .map(|&y| {
                    (0..=settings.max_doublings).find_map(|k| {
                        let factor = f64::from(1u32 << k);
                        self.eval(x, y, bw.scaled(factor), settings.singular_tol).map(|v| (v, k > 0))
                    })
                })
                .collect::<Vec<_>>()
        });
        let mut values = DMatrix::from_element(nx, ny, f64::NAN);
        let (mut widened, mut missing) = (0, 0);
        for (i, row) in rows.into_iter().enumerate() {
            for (j, cell) in row.into_iter().enumerate() {
                match cell {
                    Some((v, w)) => {
                        values[(i, j)] = v;
                        widened += usize::from(w);
                    }
                    None => missing += 1,
                }
            }
        }
        SmoothedSurface { values, widened, missing }
    }
}

fn intercept_1d(s00: f64, s1: f64, s2: f64, q0: f64, q1: f64, singular_tol: f64) -> Option<f64> {
    let det = s00 * s2 - s1 * s1;
    if det > singular_tol * s00 * s2 {
        Some((s2 * q0 - s1 * q1) / det)
    } else {
        None
    }
}

/// Local-linear estimate of the cloud on every grid point. Fails on the first
/// degenerate window.
pub fn smooth2d(cloud: &ScatterCloud, bw: Bandwidths2, grid: &EvalGrid2) -> Result<DMatrix<f64>> {
    LocalLinear2::new(cloud).grid(bw, grid, &SmootherSettings::default())
}

/// Like [`smooth2d`], but degenerate windows are widened by doubling both
/// bandwidths (per evaluation point) before giving up.
pub fn smooth2d_fallback(cloud: &ScatterCloud, bw: Bandwidths2, grid: &EvalGrid2, settings: &SmootherSettings) -> SmoothedSurface {
    LocalLinear2::new(cloud).grid_fallback(bw, grid, settings)
}

/// A scatter point in four covariates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point4 {
    pub x: [f64; 4],
    pub z: f64,
    pub w: f64,
}

impl Point4 {
    pub fn new(x: [f64; 4], z: f64, w: f64) -> Result<Self> {
        check_point(x, z, w)?;
        Ok(Self { x, z, w })
    }
}

/// Rank-4 tensor stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn index(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        let [_, n1, n2, n3] = self.shape;
        ((i * n1 + j) * n2 + k) * n3 + l
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[self.index(i, j, k, l)]
    }
}

/// Local-linear smoother in four covariates.
#[derive(Clone, Debug)]
pub struct LocalLinear4 {
    sorted: Vec<Point4>,
}

impl LocalLinear4 {
    pub fn new(points: &[Point4]) -> Self {
        let mut sorted: Vec<Point4> = points.iter().copied().filter(|p| p.w > 0.0).collect();
        sorted.sort_by(|a, b| a.x[0].total_cmp(&b.x[0]));
        Self { sorted }
    }

    pub fn eval(&self, at: [f64; 4], bw: Bandwidths4, singular_tol: f64) -> Option<f64> {
        let h = bw.0;
        let lo = self.sorted.partition_point(|p| p.x[0] <= at[0] - h[0]);
        let hi = self.sorted.partition_point(|p| p.x[0] < at[0] + h[0]).max(lo);
        let mut m = [[0.0f64; 5]; 5];
        let mut r = [0.0f64; 5];
        'points: for p in &self.sorted[lo..hi] {
            let mut row = [1.0, 0.0, 0.0, 0.0, 0.0];
            let mut k = p.w;
            for d in 0..4 {
                let u = (at[d] - p.x[d]) / h[d];
                if u.abs() >= 1.0 {
                    continue 'points;
                }
                row[d + 1] = u;
                k *= epanechnikov(u);
            }
            for a in 0..5 {
                r[a] += k * row[a] * p.z;
                for b in a..5 {
                    m[a][b] += k * row[a] * row[b];
                }
            }
        }
        if !(m[0][0] > 0.0) {
            return None;
        }
        let active: Vec<usize> = std::iter::once(0).chain((1..5).filter(|&d| m[d][d] > ZERO_SPREAD * m[0][0])).collect();
        let n = active.len();
        let sys = DMatrix::from_fn(n, n, |a, b| {
            let (p, q) = (active[a].min(active[b]), active[a].max(active[b]));
            m[p][q]
        });
        let rhs = nalgebra::DVector::from_fn(n, |a, _| r[active[a]]);
        let diag_prod: f64 = (0..n).map(|a| sys[(a, a)]).product();
        let chol = sys.cholesky()?;
        let det: f64 = chol.l_dirty().diagonal().iter().map(|d| d * d).product();
        if !(det > singular_tol * diag_prod) {
            return None;
        }
        Some(chol.solve(&rhs)[0])
    }
}

fn smooth4d_impl(
    points: &[Point4],
    bw: Bandwidths4,
    first: &EvalGrid2,
    second: &EvalGrid2,
    settings: &SmootherSettings,
    doublings: u32,
) -> (Tensor4, usize, usize) {
    let smoother = LocalLinear4::new(points);
    let shape = [first.xs.len(), first.ys.len(), second.xs.len(), second.ys.len()];
    let slabs = par::map_indexed(shape[0], |i| {
        let mut slab = Vec::with_capacity(shape[1] * shape[2] * shape[3]);
        let (mut widened, mut missing) = (0, 0);
        for &y in &first.ys {
            for &xp in &second.xs {
                for &yp in &second.ys {
                    let at = [first.xs[i], y, xp, yp];
                    let v = (0..=doublings).find_map(|k| {
                        let factor = f64::from(1u32 << k);
                        smoother.eval(at, bw.scaled(factor), settings.singular_tol).map(|v| (v, k > 0))
                    });
                    match v {
                        Some((v, w)) => {
                            widened += usize::from(w);
                            slab.push(v);
                        }
                        None => {
                            missing += 1;
                            slab.push(f64::NAN);
                        }
                    }
                }
            }
        }
        (slab, widened, missing)
    });
    let mut out = Tensor4::zeros(shape);
    let (mut widened, mut missing) = (0, 0);
    let stride = shape[1] * shape[2] * shape[3];
    for (i, (slab, w, m)) in slabs.into_iter().enumerate() {
        out.data[i * stride..(i + 1) * stride].copy_from_slice(&slab);
        widened += w;
        missing += m;
    }
    (out, widened, missing)
}

/// Local-linear estimate on the product grid `first x second`; output index
/// `[i, j, k, l]` corresponds to `(first.xs[i], first.ys[j], second.xs[k], second.ys[l])`.
pub fn smooth4d(points: &[Point4], bw: Bandwidths4, first: &EvalGrid2, second: &EvalGrid2) -> Result<Tensor4> {
    let (out, _, missing) = smooth4d_impl(points, bw, first, second, &SmootherSettings::default(), 0);
    if missing > 0 {
        let pos = out.data.iter().position(|v| v.is_nan()).unwrap_or(0);
        let [_, n1, n2, n3] = out.shape;
        let (i, j) = (pos / (n1 * n2 * n3), (pos / (n2 * n3)) % n1);
        return Err(Error::DegenerateWindow { x: first.xs[i], y: first.ys[j] });
    }
    Ok(out)
}

/// Four-dimensional smoother with per-point bandwidth doubling. Returns the
/// tensor (with `NaN` where still degenerate), the widened count and the
/// missing count.
pub fn smooth4d_fallback(
    points: &[Point4],
    bw: Bandwidths4,
    first: &EvalGrid2,
    second: &EvalGrid2,
    settings: &SmootherSettings,
) -> (Tensor4, usize, usize) {
    smooth4d_impl(points, bw, first, second, settings, settings.max_doublings)
}
