//! Comparators: the 4D-smoothed covariance, the best separable approximation
//! of a fully known covariance, and per-surface pre-smoothing.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bandwidth::transfer_to_4d;
use crate::data::{center, grid_dataset, Grid2, MaskedGridSample, SparseDataset, SparseObservation};
use crate::error::{Error, Result};
use crate::linalg::{from_row_major, psd_project, row_major, symmetrize, trace};
use crate::separable::{diagonal_surface, estimate_mean, noise_from_diagonal, normalize_pair, BandwidthSet};
use crate::smoothing::{
    epanechnikov, smooth4d_fallback, Bandwidths2, Bandwidths4, EvalGrid2, LocalLinear2, Point4, ScatterCloud, ScatterPoint,
    SmootherSettings,
};

/// Covariance on a `d1 x d2` grid stored as a `(d1 d2) x (d1 d2)` matrix with
/// cell `(i, j)` at index `i * d2 + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullCovariance {
    pub d1: usize,
    pub d2: usize,
    pub matrix: DMatrix<f64>,
}

impl FullCovariance {
    pub fn new(d1: usize, d2: usize, matrix: DMatrix<f64>) -> Result<Self> {
        let g = d1 * d2;
        if matrix.shape() != (g, g) {
            return Err(Error::DimensionMismatch { expected: format!("{g}x{g}"), got: format!("{}x{}", matrix.nrows(), matrix.ncols()) });
        }
        Ok(Self { d1, d2, matrix })
    }

    pub fn zeros(d1: usize, d2: usize) -> Self {
        Self { d1, d2, matrix: DMatrix::zeros(d1 * d2, d1 * d2) }
    }

    pub fn from_separable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Self {
        Self { d1: a.nrows(), d2: b.nrows(), matrix: a.kronecker(b) }
    }

    pub fn from_fn(d1: usize, d2: usize, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let matrix = DMatrix::from_fn(d1 * d2, d1 * d2, |p, q| f(p / d2, p % d2, q / d2, q % d2));
        Self { d1, d2, matrix }
    }

    pub fn get(&self, i: usize, j: usize, i2: usize, j2: usize) -> f64 {
        self.matrix[(i * self.d2 + j, i2 * self.d2 + j2)]
    }

    pub fn max_asymmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).amax()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CovDoc { shape: [self.d1, self.d2, self.d1, self.d2], data: row_major(&self.matrix) })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CovDoc = serde_json::from_str(text)?;
        let [d1, d2, e1, e2] = doc.shape;
        if (d1, d2) != (e1, e2) {
            return Err(Error::Parse(format!("covariance shape {:?} is not square", doc.shape)));
        }
        Self::new(d1, d2, from_row_major(d1 * d2, d1 * d2, &doc.data)?)
    }

    /// Little-endian binary: `d1`, `d2` as u64 followed by the row-major entries.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.d1 as u64).to_le_bytes())?;
        w.write_all(&(self.d2 as u64).to_le_bytes())?;
        for v in row_major(&self.matrix) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let d1 = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let d2 = u64::from_le_bytes(word) as usize;
        let g = d1.checked_mul(d2).ok_or_else(|| Error::Parse("covariance shape overflows".into()))?;
        let mut data = Vec::with_capacity(g * g);
        for _ in 0..g * g {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Self::new(d1, d2, from_row_major(g, g, &data)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CovDoc {
    shape: [usize; 4],
    data: Vec<f64>,
}

/// Every ordered pair of distinct observed cells of a surface, as a 4D
/// scatter point carrying the product of the centered values.
pub fn raw_covariance_points(centered: &[MaskedGridSample], grid: &Grid2) -> Vec<Point4> {
    let mut pts = Vec::new();
    for s in centered {
        let cells: Vec<(usize, usize)> =
            (0..grid.d1).flat_map(|i| (0..grid.d2).map(move |j| (i, j))).filter(|&c| s.mask[c] > 0.0).collect();
        for &p in &cells {
            for &q in &cells {
                if p != q {
                    pts.push(Point4 {
                        x: [grid.t_mid(p.0), grid.s_mid(p.1), grid.t_mid(q.0), grid.s_mid(q.1)],
                        z: s.values[p] * s.values[q],
                        w: 1.0,
                    });
                }
            }
        }
    }
    pts
}

/// Local-linear smoothing of the off-diagonal raw covariances in four
/// dimensions with unit weights, symmetrized.
pub fn smooth4d_covariance(
    centered: &[MaskedGridSample],
    grid: &Grid2,
    bw: Bandwidths4,
    settings: &SmootherSettings,
) -> Result<FullCovariance> {
    let pts = raw_covariance_points(centered, grid);
    if pts.is_empty() {
        return Err(Error::InsufficientPairs);
    }
    let eval = grid.eval_grid();
    let (tensor, _, missing) = smooth4d_fallback(&pts, bw, &eval, &eval, settings);
    if missing > 0 {
        let pos = tensor.data.iter().position(|v| v.is_nan()).unwrap_or(0);
        let g = grid.n_cells();
        let cell = pos / g;
        return Err(Error::DegenerateWindow { x: grid.t_mid(cell / grid.d2), y: grid.s_mid(cell % grid.d2) });
    }
    let g = grid.n_cells();
    let matrix = DMatrix::from_row_slice(g, g, &tensor.data);
    Ok(FullCovariance { d1: grid.d1, d2: grid.d2, matrix: symmetrize(&matrix) })
}

/// Mean, 4D-smoothed covariance and noise level: the non-separable
/// comparator model.
#[derive(Clone, Debug, PartialEq)]
pub struct FourDModel {
    pub grid: Grid2,
    pub mean: DMatrix<f64>,
    pub covariance: FullCovariance,
    pub sigma2: f64,
    pub bandwidths: BandwidthSet,
}

#[derive(Serialize, Deserialize)]
struct FourDDoc {
    grid: Grid2,
    mean: Vec<f64>,
    covariance: CovDoc,
    sigma2: f64,
    bandwidths: BandwidthSet,
}

impl FourDModel {
    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        let c = &self.covariance;
        Ok(serde_json::to_value(FourDDoc {
            grid: self.grid,
            mean: row_major(&self.mean),
            covariance: CovDoc { shape: [c.d1, c.d2, c.d1, c.d2], data: row_major(&c.matrix) },
            sigma2: self.sigma2,
            bandwidths: self.bandwidths,
        })?)
    }

    pub fn from_json_value(v: serde_json::Value) -> Result<Self> {
        let doc: FourDDoc = serde_json::from_value(v)?;
        let grid = Grid2::new(doc.grid.d1, doc.grid.d2)?;
        if doc.covariance.shape != [grid.d1, grid.d2, grid.d1, grid.d2] {
            return Err(Error::Parse(format!("covariance shape {:?} does not match the grid", doc.covariance.shape)));
        }
        let g = grid.n_cells();
        Ok(Self {
            grid,
            mean: from_row_major(grid.d1, grid.d2, &doc.mean)?,
            covariance: FullCovariance::new(grid.d1, grid.d2, from_row_major(g, g, &doc.covariance.data)?)?,
            sigma2: doc.sigma2,
            bandwidths: doc.bandwidths,
        })
    }
}

/// Fits the 4D comparator. The covariance smoother uses the averaged
/// temporal and spatial bandwidths of `bw.a` and `bw.b`; the noise level is
/// the middle-region average of the smoothed variance surface minus the 4D
/// diagonal.
pub fn fit_4d(ds: &SparseDataset, grid: &Grid2, bw: BandwidthSet, psd: bool) -> Result<FourDModel> {
    let mean = estimate_mean(ds, grid, bw.mean)?;
    let centered = center(&grid_dataset(ds, grid), &mean)?;
    let c = smooth4d_covariance(&centered, grid, transfer_to_4d(bw.a, bw.b), &SmootherSettings::default())?;
    let covariance = if psd { FullCovariance { matrix: psd_project(&c.matrix), ..c } } else { c };
    let diag = DMatrix::from_fn(grid.d1, grid.d2, |i, j| covariance.get(i, j, i, j));
    let v = diagonal_surface(&centered, grid, bw.diag)?;
    let zeros = (DMatrix::zeros(grid.d1, grid.d1), DMatrix::zeros(grid.d2, grid.d2));
    let sigma2 = noise_from_diagonal(&(v - diag), &zeros.0, &zeros.1, grid);
    Ok(FourDModel { grid: *grid, mean, covariance, sigma2, bandwidths: bw })
}

/// Partial inner product over the spatial indices:
/// `A[i,i'] = sum B[j,j'] C[i,j,i',j'] / sum B[j,j']^2`.
pub fn bsa_step(c: &FullCovariance, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim(b, c.d2)?;
    let denom: f64 = b.iter().map(|v| v * v).sum();
    if !(denom > 0.0) {
        return Err(Error::ZeroDenominator);
    }
    let (d1, d2) = (c.d1, c.d2);
    Ok(DMatrix::from_fn(d1, d1, |i, i2| {
        let block = c.matrix.view((i * d2, i2 * d2), (d2, d2));
        block.component_mul(b).sum() / denom
    }))
}

/// Partial inner product over the temporal indices.
pub fn bsa_step_dual(c: &FullCovariance, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim(a, c.d1)?;
    let denom: f64 = a.iter().map(|v| v * v).sum();
    if !(denom > 0.0) {
        return Err(Error::ZeroDenominator);
    }
    let (d1, d2) = (c.d1, c.d2);
    let mut out = DMatrix::zeros(d2, d2);
    for i in 0..d1 {
        for i2 in 0..d1 {
            let w = a[(i, i2)];
            if w != 0.0 {
                out += c.matrix.view((i * d2, i2 * d2), (d2, d2)) * w;
            }
        }
    }
    Ok(out / denom)
}

fn check_dim(m: &DMatrix<f64>, d: usize) -> Result<()> {
    if m.shape() != (d, d) {
        return Err(Error::DimensionMismatch { expected: format!("{d}x{d}"), got: format!("{}x{}", m.nrows(), m.ncols()) });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BsaResult {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Best separable approximation by alternating partial inner products from
/// `B = 1`, stopped when the relative change of the trace-normalized factors
/// drops below `tol`.
pub fn bsa(c: &FullCovariance, tol: f64, max_iter: usize) -> Result<BsaResult> {
    let mut b = DMatrix::from_element(c.d2, c.d2, 1.0);
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    for it in 1..=max_iter.max(1) {
        let a = bsa_step(c, &b)?;
        b = bsa_step_dual(c, &a)?;
        let (an, bn, _) = normalize_pair(&a, &b)?;
        if let Some((pa, pb)) = &prev {
            let change = ((&an - pa).norm() / an.norm()).max((&bn - pb).norm() / bn.norm());
            if change < tol {
                return Ok(BsaResult { a: an, b: bn, iterations: it, converged: true });
            }
        }
        prev = Some((an, bn));
    }
    let (a, b) = prev.expect("at least one iteration");
    Ok(BsaResult { a, b, iterations: max_iter, converged: false })
}

/// Convenience with the default tolerance and iteration cap.
pub fn bsa_default(c: &FullCovariance) -> Result<BsaResult> {
    bsa(c, 1e-8, 100)
}

/// Reconstruction of one surface from its own observations only. Cells the
/// local-linear fit cannot reach even after widening get a local-constant fit
/// at the widest window, and failing that the surface average.
pub fn presmooth_predict(obs: &[SparseObservation], grid: &Grid2, bw: Bandwidths2, settings: &SmootherSettings) -> Result<DMatrix<f64>> {
    if obs.is_empty() {
        return Err(Error::EmptySurface);
    }
    let cloud = ScatterCloud::new(obs.iter().map(|o| ScatterPoint { x: o.t, y: o.s, z: o.y, w: 1.0 }).collect())?;
    let eval: EvalGrid2 = grid.eval_grid();
    let mut out = LocalLinear2::new(&cloud).grid_fallback(bw, &eval, settings).values;
    if out.iter().any(|v| v.is_nan()) {
        let widest = bw.scaled(f64::from(1u32 << settings.max_doublings));
        let avg = obs.iter().map(|o| o.y).sum::<f64>() / obs.len() as f64;
        for i in 0..grid.d1 {
            for j in 0..grid.d2 {
                if out[(i, j)].is_nan() {
                    out[(i, j)] = local_constant(obs, grid.t_mid(i), grid.s_mid(j), widest).unwrap_or(avg);
                }
            }
        }
    }
    Ok(out)
}

fn local_constant(obs: &[SparseObservation], x: f64, y: f64, bw: Bandwidths2) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for o in obs {
        let k = epanechnikov((x - o.t) / bw.h1) * epanechnikov((y - o.s) / bw.h2);
        num += k * o.y;
        den += k;
    }
    (den > 0.0).then(|| num / den)
}

/// `||C - A (x) B||_F` without forming the Kronecker product.
pub fn separable_residual(c: &FullCovariance, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let d2 = c.d2;
    let mut acc = 0.0;
    for i in 0..c.d1 {
        for i2 in 0..c.d1 {
            let block = c.matrix.view((i * d2, i2 * d2), (d2, d2));
            acc += (block - b * a[(i, i2)]).norm_squared();
        }
    }
    acc.sqrt()
}

/// Trace of the covariance operator.
pub fn total_variance(c: &FullCovariance) -> f64 {
    trace(&c.matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn bsa_step_matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = FullCovariance::from_fn(3, 2, |_, _, _, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let got = bsa_step(&c, &b).unwrap();
        let denom: f64 = b.iter().map(|v| v * v).sum();
        for i in 0..3 {
            for i2 in 0..3 {
                let mut s = 0.0;
                for j in 0..2 {
                    for j2 in 0..2 {
                        s += b[(j, j2)] * c.get(i, j, i2, j2);
                    }
                }
                assert_abs_diff_eq!(got[(i, i2)], s / denom, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bsa_step_fixed_point_and_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a0, b0) = (random_spd(&mut rng, 3), random_spd(&mut rng, 4));
        let c = FullCovariance::from_separable(&a0, &b0);
        assert!((bsa_step(&c, &b0).unwrap() - &a0).amax() < 1e-12);
        let ones = DMatrix::from_element(4, 4, 1.0);
        let avg = bsa_step(&c, &ones).unwrap();
        assert_abs_diff_eq!(avg[(1, 2)], a0[(1, 2)] * b0.sum() / 16.0, epsilon = 1e-12);
    }

    #[test]
    fn bsa_recovers_separable_and_rejects_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a0, b0) = (random_spd(&mut rng, 4), random_spd(&mut rng, 3));
        let c = FullCovariance::from_separable(&a0, &b0);
        let r = bsa(&c, 1e-8, 100).unwrap();
        assert!(r.converged && r.iterations <= 2);
        assert!((r.a.kronecker(&r.b) - &c.matrix).amax() < 1e-8);
        assert!(matches!(bsa(&FullCovariance::zeros(2, 2), 1e-8, 100), Err(Error::ZeroDenominator)));
    }

    #[test]
    fn binary_and_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = FullCovariance::from_fn(2, 3, |_, _, _, _| rng.random::<f64>());
        let mut buf = Vec::new();
        c.write_binary(&mut buf).unwrap();
        assert_eq!(FullCovariance::read_binary(buf.as_slice()).unwrap(), c);
        assert_eq!(FullCovariance::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    fn sample(grid: &Grid2, cells: &[((usize, usize), f64)]) -> MaskedGridSample {
        let mut s = MaskedGridSample { values: DMatrix::zeros(grid.d1, grid.d2), mask: DMatrix::zeros(grid.d1, grid.d2) };
        for &(c, v) in cells {
            s.values[c] = v;
            s.mask[c] = 1.0;
        }
        s
    }

    #[test]
    fn four_dim_covariance_single_pair_window() {
        let grid = Grid2::square(5).unwrap();
        let s = sample(&grid, &[((0, 0), 1.5), ((1, 3), -2.0), ((4, 4), 0.5), ((3, 0), 1.0)]);
        let bw = Bandwidths4([0.1; 4]);
        let c = smooth4d_covariance(&[s], &grid, bw, &SmootherSettings::default()).unwrap();
        assert_abs_diff_eq!(c.get(0, 0, 1, 3), -3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.get(4, 4, 3, 0), 0.5, epsilon = 1e-12);
        assert!(c.max_asymmetry() < 1e-12);
    }

    #[test]
    fn four_dim_covariance_of_constant_products() {
        let grid = Grid2::square(3).unwrap();
        let cells: Vec<_> = (0..3).flat_map(|i| (0..3).map(move |j| ((i, j), 1.0))).collect();
        let s = sample(&grid, &cells);
        let c = smooth4d_covariance(&[s.clone(), s], &grid, Bandwidths4([0.6; 4]), &SmootherSettings::default()).unwrap();
        assert!(c.matrix.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn presmoothing_single_observation_is_constant() {
        let grid = Grid2::square(6).unwrap();
        let obs = [SparseObservation { surface_id: 0, t: 0.3, s: 0.6, y: 2.5 }];
        let out = presmooth_predict(&obs, &grid, Bandwidths2::uniform(0.1).unwrap(), &SmootherSettings::default()).unwrap();
        assert!(out.iter().all(|&v| v == 2.5));
        assert!(matches!(
            presmooth_predict(&[], &grid, Bandwidths2::uniform(0.1).unwrap(), &SmootherSettings::default()),
            Err(Error::EmptySurface)
        ));
    }

    #[test]
    fn presmoothing_line_design_is_defined_everywhere() {
        let grid = Grid2::square(6).unwrap();
        let obs: Vec<_> = (0..6).map(|j| SparseObservation { surface_id: 0, t: 0.5, s: grid.s_mid(j), y: j as f64 }).collect();
        let out = presmooth_predict(&obs, &grid, Bandwidths2::uniform(0.2).unwrap(), &SmootherSettings::default()).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn presmoothing_dense_product_surface() {
        let grid = Grid2::square(20).unwrap();
        let mut obs = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                let (t, s) = (grid.t_mid(i), grid.s_mid(j));
                obs.push(SparseObservation { surface_id: 0, t, s, y: t * s });
            }
        }
        let out = presmooth_predict(&obs, &grid, Bandwidths2::uniform(0.1).unwrap(), &SmootherSettings::default()).unwrap();
        for i in 2..18 {
            for j in 2..18 {
                assert_abs_diff_eq!(out[(i, j)], grid.t_mid(i) * grid.s_mid(j), epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn residual_matches_explicit_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = FullCovariance::from_fn(3, 2, |_, _, _, _| rng.random::<f64>());
        let (a, b) = (random_spd(&mut rng, 3), random_spd(&mut rng, 2));
        assert_abs_diff_eq!(separable_residual(&c, &a, &b), (&c.matrix - a.kronecker(&b)).norm(), epsilon = 1e-12);
    }

    /// Rearranges `C` so a Kronecker product becomes a rank-one matrix
    /// `vec(A) vec(B)^T` and takes the leading singular pair.
    fn rank_one_kronecker(c: &FullCovariance) -> DMatrix<f64> {
        let (d1, d2) = (c.d1, c.d2);
        let r = DMatrix::from_fn(d1 * d1, d2 * d2, |p, q| c.get(p / d1, q / d2, p % d1, q % d2));
        let svd = r.svd(true, true);
        let k = svd.singular_values.imax();
        let u = svd.u.unwrap().column(k).into_owned();
        let v = svd.v_t.unwrap().row(k).transpose();
        let s = svd.singular_values[k];
        let a = DMatrix::from_fn(d1, d1, |i, i2| u[i * d1 + i2]);
        let b = DMatrix::from_fn(d2, d2, |j, j2| v[j * d2 + j2] * s);
        a.kronecker(&b)
    }

    #[test]
    fn bsa_matches_rearranged_svd_on_mixture() {
        let (d1, d2) = (4, 3);
        let unit = |d: usize, k: usize| DMatrix::from_fn(d, 1, |i, _| if i == k { 1.0 } else { 0.5 / d as f64 });
        let a1 = {
            let v = unit(d1, 0);
            &v * v.transpose() * 3.0
        };
        let b1 = {
            let v = unit(d2, 1);
            &v * v.transpose() * 2.0
        };
        let a2 = {
            let v = unit(d1, 2);
            &v * v.transpose()
        };
        let b2 = {
            let v = unit(d2, 2);
            &v * v.transpose()
        };
        let c = FullCovariance::new(d1, d2, a1.kronecker(&b1) + a2.kronecker(&b2) * 0.5).unwrap();
        let r = bsa(&c, 1e-12, 500).unwrap();
        let oracle = rank_one_kronecker(&c);
        let ours = r.a.kronecker(&r.b);
        assert!((&ours - &oracle).amax() < 1e-6, "{}", (&ours - &oracle).amax());
        assert_abs_diff_eq!((&c.matrix - &ours).norm(), (&c.matrix - &oracle).norm(), epsilon = 1e-8);
    }

    #[test]
    fn fitted_4d_model_round_trips() {
        let grid = Grid2::square(4).unwrap();
        let surfaces: Vec<Vec<(f64, f64, f64)>> = (0..12)
            .map(|n| {
                let a = (n as f64 * 0.7).sin();
                (0..16)
                    .filter(|c| (c + n) % 3 != 0)
                    .map(|c| {
                        let (t, s) = (grid.t_mid(c / 4), grid.s_mid(c % 4));
                        (t, s, a * (1.0 + t) * (2.0 - s) + 0.01 * (c as f64).cos())
                    })
                    .collect()
            })
            .collect();
        let ds = SparseDataset::from_surfaces(&surfaces).unwrap();
        let m = fit_4d(&ds, &grid, BandwidthSet::uniform(0.5).unwrap(), true).unwrap();
        assert!(m.covariance.max_asymmetry() < 1e-12);
        assert!(m.sigma2 >= 0.0);
        let back = FourDModel::from_json_value(m.to_json_value().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn bsa_step_is_homogeneous(seed in 0u64..500, lambda in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0]) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c = FullCovariance::from_fn(3, 3, |_, _, _, _| rng.random_range(-1.0..1.0));
                let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
                let base = bsa_step(&c, &b).unwrap();
                let scaled = bsa_step(&c, &(&b * lambda)).unwrap();
                prop_assert!((scaled - base / lambda).amax() < 1e-12);
            }

            #[test]
            fn bsa_is_locally_optimal(seed in 0u64..500) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (a1, b1) = (random_spd(&mut rng, 3), random_spd(&mut rng, 3));
                let (a2, b2) = (random_spd(&mut rng, 3), random_spd(&mut rng, 3));
                let c = FullCovariance::new(3, 3, a1.kronecker(&b1) + a2.kronecker(&b2) * 0.3).unwrap();
                let r = bsa(&c, 1e-12, 1000).unwrap();
                let best = separable_residual(&c, &r.a, &r.b);
                for _ in 0..100 {
                    let da = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1e-3..1e-3));
                    let db = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1e-3..1e-3));
                    let other = separable_residual(&c, &(&r.a + da), &(&r.b + db));
                    prop_assert!(best <= other + 1e-12);
                }
            }
        }
    }
}
