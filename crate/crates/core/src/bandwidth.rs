//! K-fold cross-validation over surfaces for the smoother bandwidths, and the
//! bandwidth transfer to the 4D baseline.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{center, grid_dataset, Grid2, MaskedGridSample, SparseDataset, SparseObservation};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::stream_rng;
use crate::separable::{estimate_mean, spatial_cloud, temporal_cloud, BandwidthSet};
use crate::smoothing::{Bandwidths2, Bandwidths4, EvalGrid2, LocalLinear2, ScatterCloud, ScatterPoint, SmootherSettings};

use nalgebra::DMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSpec {
    pub folds: usize,
    /// Ladder length when `candidates` is not given.
    pub n_candidates: usize,
    /// Smallest ladder bandwidth, in grid cells.
    pub min_cells: f64,
    /// Largest ladder bandwidth, in domain units.
    pub max_bandwidth: f64,
    /// Explicit bandwidths (domain units) replacing the ladder.
    pub candidates: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for CvSpec {
    fn default() -> Self {
        Self { folds: 10, n_candidates: 8, min_cells: 1.5, max_bandwidth: 0.5, candidates: None, seed: 0 }
    }
}

impl CvSpec {
    /// Candidate bandwidths for an axis with `d` cells, increasing.
    pub fn ladder(&self, d: usize) -> Result<Vec<f64>> {
        let mut out = match &self.candidates {
            Some(c) => c.clone(),
            None => {
                let lo = self.min_cells / d as f64;
                let hi = self.max_bandwidth.max(lo);
                let n = self.n_candidates.max(1);
                if n == 1 {
                    vec![hi]
                } else {
                    (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect()
                }
            }
        };
        if out.is_empty() || out.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidArgument("bandwidth candidates must be positive".into()));
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
        Ok(out)
    }

    fn pairs(&self, grid: &Grid2) -> Result<Vec<Bandwidths2>> {
        let (l1, l2) = (self.ladder(grid.d1)?, self.ladder(grid.d2)?);
        l1.iter().zip(&l2).map(|(&a, &b)| Bandwidths2::new(a, b)).collect()
    }
}

/// Scores of one cross-validated smoother; `None` marks a candidate whose
/// fit was degenerate on some fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub candidates: Vec<Bandwidths2>,
    pub scores: Vec<Option<f64>>,
    pub chosen: Bandwidths2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: usize,
    pub fold_seed: u64,
    pub mean: CvTable,
    pub a: CvTable,
    pub b: CvTable,
    pub diag: CvTable,
}

/// Fold index of each surface, from a seeded shuffle.
pub fn fold_assignment(n_surfaces: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n_surfaces).collect();
    ids.shuffle(&mut stream_rng(seed, 0));
    let mut out = vec![0; n_surfaces];
    for (pos, id) in ids.into_iter().enumerate() {
        out[id] = pos % folds;
    }
    out
}

fn check_folds(n_surfaces: usize, folds: usize) -> Result<()> {
    if folds < 2 || folds > n_surfaces {
        return Err(Error::InvalidArgument(format!(
            "cross-validation needs 2 <= folds <= surfaces, got {folds} folds for {n_surfaces} surfaces"
        )));
    }
    Ok(())
}

/// Chooses the smallest score; ties go to the larger bandwidth.
fn choose(candidates: Vec<Bandwidths2>, scores: Vec<Option<f64>>) -> Result<CvTable> {
    let mut best: Option<(usize, f64)> = None;
    for k in (0..candidates.len()).rev() {
        if let Some(s) = scores[k] {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((k, s));
            }
        }
    }
    let (k, _) = best.ok_or(Error::AllCandidatesDegenerate)?;
    Ok(CvTable { chosen: candidates[k], candidates, scores })
}

/// Fold-wise pairwise-free sum in fixed order; `None` if any fold is degenerate.
fn total(parts: &[Option<f64>]) -> Option<f64> {
    parts.iter().try_fold(0.0, |acc, p| p.map(|v| acc + v))
}

fn obs_cloud(obs: &[SparseObservation]) -> Result<ScatterCloud> {
    ScatterCloud::new(obs.iter().map(|o| ScatterPoint { x: o.t, y: o.s, z: o.y, w: 1.0 }).collect())
}

/// Held-out squared error of a surface smoother of raw observations,
/// evaluated on the grid and read off at each held-out observation's cell.
fn cv_observation_smoother(
    groups: &[Vec<SparseObservation>],
    grid: &Grid2,
    candidates: Vec<Bandwidths2>,
    folds: usize,
    seed: u64,
) -> Result<CvTable> {
    check_folds(groups.len(), folds)?;
    let assign = fold_assignment(groups.len(), folds, seed);
    let eval = grid.eval_grid();
    let settings = SmootherSettings::default();
    let split = |f: usize| {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (id, g) in groups.iter().enumerate() {
            if assign[id] == f {
                test.extend_from_slice(g)
            } else {
                train.extend_from_slice(g)
            }
        }
        (train, test)
    };
    let splits: Vec<_> = (0..folds).map(split).collect();
    let clouds: Vec<LocalLinear2> =
        splits.iter().map(|(train, _)| obs_cloud(train).map(|c| LocalLinear2::new(&c))).collect::<Result<_>>()?;
    let nc = candidates.len();
    let cells = par::map_indexed(nc * folds, |idx| {
        let (k, f) = (idx / folds, idx % folds);
        let fit = clouds[f].grid_fallback(candidates[k], &eval, &settings).values;
        let mut sse = 0.0;
        for o in &splits[f].1 {
            let v = fit[grid.cell_of(o.t, o.s)];
            if v.is_nan() {
                return None;
            }
            sse += (o.y - v).powi(2);
        }
        Some(sse)
    });
    let scores = (0..nc).map(|k| total(&cells[k * folds..(k + 1) * folds])).collect();
    choose(candidates, scores)
}

/// Cross-validated bandwidth of the mean smoother.
pub fn cv_mean_bandwidth(ds: &SparseDataset, grid: &Grid2, spec: &CvSpec) -> Result<CvTable> {
    cv_observation_smoother(&ds.by_surface(), grid, spec.pairs(grid)?, spec.folds, spec.seed)
}

/// Cross-validated bandwidth of the variance smoother, run on squared
/// residuals from the mean grid.
pub fn cv_diag_bandwidth(ds: &SparseDataset, grid: &Grid2, mean: &DMatrix<f64>, spec: &CvSpec) -> Result<CvTable> {
    let groups: Vec<Vec<SparseObservation>> = ds
        .by_surface()
        .into_iter()
        .map(|g| g.into_iter().map(|o| SparseObservation { y: (o.y - mean[grid.cell_of(o.t, o.s)]).powi(2), ..o }).collect())
        .collect();
    cv_observation_smoother(&groups, grid, spec.pairs(grid)?, spec.folds, spec.seed)
}

type CloudFn<'a> = dyn Fn(&[MaskedGridSample]) -> Result<ScatterCloud> + Sync + 'a;

/// Weighted held-out error of a kernel smoother on pooled marginalized clouds.
fn cv_kernel(
    centered: &[MaskedGridSample],
    assign: &[usize],
    folds: usize,
    axis: &[f64],
    candidates: Vec<Bandwidths2>,
    cloud_of: &CloudFn<'_>,
) -> Result<CvTable> {
    let eval = EvalGrid2::new(axis.to_vec(), axis.to_vec())?;
    let settings = SmootherSettings::default();
    let mut per_fold = Vec::with_capacity(folds);
    for f in 0..folds {
        let (train, test): (Vec<_>, Vec<_>) = centered.iter().enumerate().partition(|(id, _)| assign[*id] != f);
        let train: Vec<MaskedGridSample> = train.into_iter().map(|(_, s)| s.clone()).collect();
        let test: Vec<MaskedGridSample> = test.into_iter().map(|(_, s)| s.clone()).collect();
        let train_cloud = match cloud_of(&train) {
            Ok(c) => Some(LocalLinear2::new(&c)),
            Err(Error::InsufficientPairs) => None,
            Err(e) => return Err(e),
        };
        let test_cloud = match cloud_of(&test) {
            Ok(c) => c,
            Err(Error::InsufficientPairs) => ScatterCloud::default(),
            Err(e) => return Err(e),
        };
        per_fold.push((train_cloud, test_cloud));
    }
    let d = axis.len();
    let nc = candidates.len();
    let cells = par::map_indexed(nc * folds, |idx| {
        let (k, f) = (idx / folds, idx % folds);
        let (train, test) = &per_fold[f];
        let train = train.as_ref()?;
        let fit = train.grid_fallback(candidates[k], &eval, &settings).values;
        let mut sse = 0.0;
        for p in test.points() {
            let (i, i2) = (nearest(p.x, d), nearest(p.y, d));
            let v = fit[(i, i2)];
            if v.is_nan() {
                return None;
            }
            sse += p.w * (p.z - v).powi(2);
        }
        Some(sse)
    });
    let scores = (0..nc).map(|k| total(&cells[k * folds..(k + 1) * folds])).collect();
    choose(candidates, scores)
}

fn nearest(x: f64, d: usize) -> usize {
    ((x * d as f64).floor() as usize).min(d - 1)
}

/// Cross-validated bandwidths of the temporal smoother (on the initial,
/// unweighted cloud) and of the spatial smoother (on the cloud weighted by the
/// initial temporal estimate). Both use `h1 = h2`.
pub fn cv_covariance_bandwidths(centered: &[MaskedGridSample], grid: &Grid2, spec: &CvSpec) -> Result<(CvTable, CvTable)> {
    check_folds(centered.len(), spec.folds)?;
    let assign = fold_assignment(centered.len(), spec.folds, spec.seed);
    let uniform = |l: Vec<f64>| l.into_iter().map(Bandwidths2::uniform).collect::<Result<Vec<_>>>();
    let ones = DMatrix::from_element(grid.d2, grid.d2, 1.0);
    let a_table =
        cv_kernel(centered, &assign, spec.folds, &grid.t_axis(), uniform(spec.ladder(grid.d1)?)?, &|s| temporal_cloud(s, grid, &ones))?;
    let cloud = temporal_cloud(centered, grid, &ones)?;
    let eval = EvalGrid2::new(grid.t_axis(), grid.t_axis())?;
    let a0 = LocalLinear2::new(&cloud).grid_fallback(a_table.chosen, &eval, &SmootherSettings::default()).into_complete(&eval)?;
    let a0 = crate::linalg::symmetrize(&a0);
    let b_table =
        cv_kernel(centered, &assign, spec.folds, &grid.s_axis(), uniform(spec.ladder(grid.d2)?)?, &|s| spatial_cloud(s, grid, &a0))?;
    Ok((a_table, b_table))
}

/// Cross-validates every smoother of the separable pipeline.
pub fn select_bandwidths(ds: &SparseDataset, grid: &Grid2, spec: &CvSpec) -> Result<(BandwidthSet, CvReport)> {
    let mean_table = cv_mean_bandwidth(ds, grid, spec)?;
    let mean = estimate_mean(ds, grid, mean_table.chosen)?;
    let centered = center(&grid_dataset(ds, grid), &mean)?;
    let (a_table, b_table) = cv_covariance_bandwidths(&centered, grid, spec)?;
    let diag_table = cv_diag_bandwidth(ds, grid, &mean, spec)?;
    let set = BandwidthSet { mean: mean_table.chosen, a: a_table.chosen, b: b_table.chosen, diag: diag_table.chosen };
    let report = CvReport { folds: spec.folds, fold_seed: spec.seed, mean: mean_table, a: a_table, b: b_table, diag: diag_table };
    Ok((set, report))
}

/// Bandwidths for the 4D smoother on `(t, s, t', s')`: each kernel's pair is
/// averaged, temporal axes get the temporal value and spatial axes the
/// spatial one.
pub fn transfer_to_4d(bw_a: Bandwidths2, bw_b: Bandwidths2) -> Bandwidths4 {
    let ht = 0.5 * (bw_a.h1 + bw_a.h2);
    let hs = 0.5 * (bw_b.h1 + bw_b.h2);
    Bandwidths4([ht, hs, ht, hs])
}
