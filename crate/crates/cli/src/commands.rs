use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sepsurf::bandwidth::{select_bandwidths, CvSpec};
use sepsurf::baselines::{fit_4d, FourDModel};
use sepsurf::data::{ingest_options, read_dataset_csv, read_options_csv, write_dataset_csv, Grid2, OptionScaling, SparseDataset};
use sepsurf::prediction::{self, NewObservations, PredictOptions, PredictiveModel};
use sepsurf::separable::{fit_separable_detailed, BandwidthSet, FitOptions, SeparableModel};
use sepsurf::simstudy::{
    holdout_evaluate, runtime_benchmark, sample_surfaces, scenario_covariance, BenchmarkConfig, Covariance, HoldoutConfig, HoldoutKind,
    HoldoutPattern, Method, Scenario, ScenarioKind,
};
use sepsurf::smoothing::Bandwidths2;

use crate::config::{run_record, sidecar_path, write_json};
use crate::{BenchmarkArgs, CliError, EstimateArgs, EvaluateArgs, IngestArgs, PredictArgs, SimulateArgs};

/// Grids at or above this many cells make the 4D smoother slow.
const COSTLY_4D_CELLS: usize = 400;

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

fn grid_of(v: &[usize]) -> Result<Grid2, CliError> {
    match *v {
        [d] => Ok(Grid2::square(d)?),
        [d1, d2] => Ok(Grid2::new(d1, d2)?),
        _ => Err(CliError::Usage("--grid takes `d` or `d1,d2`".into())),
    }
}

fn fraction(p: f64) -> Result<f64, CliError> {
    let f = if p > 1.0 { p / 100.0 } else { p };
    if !(f > 0.0 && f <= 1.0) {
        return Err(CliError::Usage(format!("sampling fraction {p} is not in (0, 1] or (1, 100]")));
    }
    Ok(f)
}

fn bandwidths2(v: &[f64]) -> Result<Bandwidths2, CliError> {
    match *v {
        [h] => Ok(Bandwidths2::uniform(h)?),
        [h1, h2] => Ok(Bandwidths2::new(h1, h2)?),
        _ => Err(CliError::Usage("a 2D bandwidth takes `h` or `h1,h2`".into())),
    }
}

fn bandwidth_set(v: &[f64]) -> Result<BandwidthSet, CliError> {
    match v.len() {
        1 | 2 => {
            let b = bandwidths2(v)?;
            Ok(BandwidthSet { mean: b, a: b, b, diag: b })
        }
        8 => Ok(BandwidthSet {
            mean: Bandwidths2::new(v[0], v[1])?,
            a: Bandwidths2::new(v[2], v[3])?,
            b: Bandwidths2::new(v[4], v[5])?,
            diag: Bandwidths2::new(v[6], v[7])?,
        }),
        _ => Err(CliError::Usage("--bandwidth takes 1, 2 or 8 values".into())),
    }
}

fn flat_bandwidths(b: &BandwidthSet) -> Vec<f64> {
    [b.mean, b.a, b.b, b.diag].iter().flat_map(|x| [x.h1, x.h2]).collect()
}

// Bad values inside an input file are data errors, not usage errors.
fn data_error(e: sepsurf::Error) -> sepsurf::Error {
    match e {
        sepsurf::Error::InvalidArgument(m) => sepsurf::Error::Parse(m),
        e => e,
    }
}

fn read_dataset(path: &Path) -> Result<SparseDataset, CliError> {
    Ok(read_dataset_csv(File::open(path).map_err(sepsurf::Error::from)?).map_err(data_error)?)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(sepsurf::Error::from)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(sepsurf::Error::from)?))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| sepsurf::Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(sepsurf::Error::from)?;
    Ok(())
}

fn with_extension(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn simulate(mut a: SimulateArgs) -> Result<(), CliError> {
    let kind: ScenarioKind = required(&a.scenario, "scenario")?.parse().map_err(|e: sepsurf::Error| CliError::Usage(e.to_string()))?;
    let out = required(&a.out, "out")?;
    let grid = grid_of(a.grid.get_or_insert_with(|| vec![20]))?;
    let n = *a.n.get_or_insert(100);
    let p = fraction(*a.p.get_or_insert(0.1))?;
    let noise = *a.noise.get_or_insert(1.0 / grid.n_cells() as f64);
    let seed = *a.seed.get_or_insert(0);
    let truth_path = a.truth.get_or_insert_with(|| with_extension(&out, ".truth.json")).clone();

    let cov = scenario_covariance(&Scenario { kind, grid });
    let started = Instant::now();
    let data = sample_surfaces(&cov, &grid, n, Some(noise), p, seed)?;
    info!("sampled {} surfaces, {} observations in {:.2?}", n, data.dataset.n_obs(), started.elapsed());

    write_dataset_csv(&data.dataset, create(&out)?)?;
    let record = run_record("simulate", &a);
    write_json(&sidecar_path(&out), &json!({ "run": record }))?;
    write_json(
        &truth_path,
        &json!({
            "scenario": kind.name(),
            "grid": grid,
            "sigma2": noise,
            "covariance": cov.to_json_value(),
            "run": record,
        }),
    )?;
    info!("wrote {} and {}", out.display(), truth_path.display());
    Ok(())
}

pub fn estimate(mut a: EstimateArgs) -> Result<(), CliError> {
    let input = required(&a.input, "input")?;
    let out = required(&a.out, "out")?;
    let grid = grid_of(a.grid.get_or_insert_with(|| vec![20]))?;
    let method = a.method.get_or_insert_with(|| "separable".into()).clone();
    let steps = *a.steps.get_or_insert(2);
    let folds = *a.folds.get_or_insert(10);
    let candidates = *a.candidates.get_or_insert(8);
    let psd = *a.psd_project.get_or_insert(false);
    let seed = *a.seed.get_or_insert(0);
    if method != "separable" && method != "4d" {
        return Err(CliError::Usage(format!("unknown --method '{method}' (expected separable or 4d)")));
    }

    let ds = read_dataset(&input)?;
    info!("read {} observations on {} surfaces", ds.n_obs(), ds.n_surfaces());
    let (bw, cv) = match &a.bandwidth {
        Some(v) => (bandwidth_set(v)?, None),
        None => {
            let t = Instant::now();
            let spec = CvSpec { folds, n_candidates: candidates, seed, ..CvSpec::default() };
            let (bw, report) = select_bandwidths(&ds, &grid, &spec)?;
            info!("bandwidth selection: {:.2?}", t.elapsed());
            (bw, Some(report))
        }
    };
    let record = run_record("estimate", &a);
    let mut doc = if method == "separable" {
        let t = Instant::now();
        let opts = FitOptions { steps, psd_project: psd, seed, ..FitOptions::fixed(bw) };
        let fit = fit_separable_detailed(&ds, &grid, &opts)?;
        info!("separable fit ({steps} step(s)): {:.2?}", t.elapsed());
        if fit.widened > 0 {
            warn!("{} evaluation points needed widened smoothing windows", fit.widened);
        }
        let mut v: Value = serde_json::from_str(&fit.model.to_json()?).map_err(sepsurf::Error::from)?;
        v["kind"] = json!("separable");
        v
    } else {
        if grid.n_cells() >= COSTLY_4D_CELLS {
            warn!(
                "4D smoothing on a {}x{} grid evaluates {} covariance entries; expect a long run",
                grid.d1,
                grid.d2,
                grid.n_cells() * grid.n_cells()
            );
        }
        let t = Instant::now();
        let m = fit_4d(&ds, &grid, bw, psd)?;
        info!("4D fit: {:.2?}", t.elapsed());
        let mut v = m.to_json_value()?;
        v["kind"] = json!("full");
        v
    };
    doc["bandwidths_used"] = json!(flat_bandwidths(&bw));
    if let Some(cv) = cv {
        doc["cv"] = serde_json::to_value(cv).map_err(sepsurf::Error::from)?;
    }
    doc["run"] = record;
    write_json(&out, &doc)?;
    info!("wrote {}", out.display());
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PredictiveModel, CliError> {
    let text = fs::read_to_string(path).map_err(sepsurf::Error::from)?;
    let v: Value = serde_json::from_str(&text).map_err(sepsurf::Error::from)?;
    match v.get("kind").and_then(Value::as_str) {
        Some("full") => Ok(PredictiveModel::from(&FourDModel::from_json_value(strip(v))?)),
        _ => Ok(PredictiveModel::from(&SeparableModel::from_json(&text)?)),
    }
}

fn strip(mut v: Value) -> Value {
    if let Value::Object(m) = &mut v {
        for k in ["kind", "run", "cv", "bandwidths_used"] {
            m.remove(k);
        }
    }
    v
}

#[derive(Deserialize)]
struct ObsRow {
    surface_id: Option<usize>,
    t: f64,
    s: f64,
    y: f64,
}

fn read_new_observations(path: &Path, surface: Option<usize>) -> Result<NewObservations, CliError> {
    let mut rdr = csv::Reader::from_reader(File::open(path).map_err(sepsurf::Error::from)?);
    let rows: Vec<ObsRow> = rdr
        .deserialize()
        .enumerate()
        .map(|(k, r)| r.map_err(|e| sepsurf::Error::Parse(format!("row {}: {e}", k + 2))))
        .collect::<Result<_, _>>()?;
    let mut ids: Vec<usize> = rows.iter().filter_map(|r| r.surface_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let keep: Vec<&ObsRow> = match surface {
        Some(id) => rows.iter().filter(|r| r.surface_id == Some(id)).collect(),
        None if ids.len() > 1 => return Err(CliError::Usage(format!("input holds {} surfaces; choose one with --surface", ids.len()))),
        None => rows.iter().collect(),
    };
    if keep.is_empty() {
        return Err(CliError::Core(sepsurf::Error::EmptySurface));
    }
    Ok(NewObservations::new(keep.iter().map(|r| (r.t, r.s)).collect(), keep.iter().map(|r| r.y).collect()).map_err(data_error)?)
}

pub fn predict(mut a: PredictArgs) -> Result<(), CliError> {
    let model_path = required(&a.model, "model")?;
    let input = required(&a.input, "input")?;
    let out = required(&a.out, "out")?;
    let opts = PredictOptions {
        alpha: *a.alpha.get_or_insert(0.05),
        ridge: *a.ridge.get_or_insert(1e-8),
        n_draws: *a.draws.get_or_insert(10_000),
        seed: *a.seed.get_or_insert(0),
    };
    let model = load_model(&model_path)?;
    let obs = read_new_observations(&input, a.surface)?;
    let t = Instant::now();
    let r = prediction::predict(&model, &obs, &opts)?;
    info!("prediction with bands: {:.2?}", t.elapsed());
    let (z, u) = (r.z_quantile.unwrap_or(f64::NAN), r.u_quantile.unwrap_or(f64::NAN));
    let mut doc = r.to_json_value()?;
    doc["band_ordering"] = json!({
        "z_quantile": z,
        "u_quantile": u,
        "z_below_u": z < u,
        "simultaneous_wider": z >= u,
    });
    doc["run"] = run_record("predict", &a);
    write_json(&out, &doc)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn load_truth(path: &Path, grid: &Grid2) -> Result<PredictiveModel, CliError> {
    let v: Value = serde_json::from_str(&fs::read_to_string(path).map_err(sepsurf::Error::from)?).map_err(sepsurf::Error::from)?;
    let cov = Covariance::from_json_value(v.get("covariance").ok_or_else(|| sepsurf::Error::Parse("truth without 'covariance'".into()))?)?;
    let sigma2 = v.get("sigma2").and_then(Value::as_f64).ok_or_else(|| sepsurf::Error::Parse("truth without 'sigma2'".into()))?;
    if cov.dims() != (grid.d1, grid.d2) {
        return Err(CliError::Usage(format!("truth is on a {:?} grid, --grid is {}x{}", cov.dims(), grid.d1, grid.d2)));
    }
    Ok(cov.predictive(*grid, sigma2)?)
}

pub fn evaluate(mut a: EvaluateArgs) -> Result<(), CliError> {
    let input = required(&a.input, "input")?;
    let out = required(&a.out, "out")?;
    let kind: HoldoutKind = required(&a.pattern, "pattern")?.parse().map_err(|e: sepsurf::Error| CliError::Usage(e.to_string()))?;
    let grid = grid_of(a.grid.get_or_insert_with(|| vec![20]))?;
    let folds = *a.folds.get_or_insert(10);
    let methods: Vec<Method> = a
        .methods
        .get_or_insert_with(|| vec!["presmooth".into(), "separable".into()])
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_, sepsurf::Error>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let ridge = *a.ridge.get_or_insert(1e-8);
    let seed = *a.seed.get_or_insert(0);

    let ds = read_dataset(&input)?;
    let bw = match &a.bandwidth {
        Some(v) => bandwidth_set(v)?,
        None => {
            let t = Instant::now();
            let (bw, _) = select_bandwidths(&ds, &grid, &CvSpec { seed, ..CvSpec::default() })?;
            info!("bandwidth selection on all surfaces: {:.2?}", t.elapsed());
            a.bandwidth = Some(flat_bandwidths(&bw));
            bw
        }
    };
    let presmooth_bw = bandwidths2(a.presmooth_bandwidth.get_or_insert_with(|| vec![bw.mean.h1, bw.mean.h2]))?;
    let oracle = match &a.truth {
        Some(p) => Some(load_truth(p, &grid)?),
        None if methods.contains(&Method::Oracle) => return Err(CliError::Usage("the oracle method needs --truth".into())),
        None => None,
    };
    let cfg = HoldoutConfig { pattern: HoldoutPattern::new(kind), folds, methods, seed, bandwidths: bw, presmooth_bw, ridge, oracle };
    let t = Instant::now();
    let report = holdout_evaluate(&ds, &grid, &cfg)?;
    info!("hold-out evaluation: {:.2?}", t.elapsed());
    for (m, med) in &report.medians {
        info!("median RMSE ratio {m}: {med:.4}");
    }
    if report.skipped_surfaces > 0 {
        info!("{} surface(s) skipped: no nonempty kept/discarded split", report.skipped_surfaces);
    }
    write_csv(&out, &report.rows)?;
    write_json(
        &sidecar_path(&out),
        &json!({
            "run": run_record("evaluate", &a),
            "medians": report.medians,
            "skipped_surfaces": report.skipped_surfaces,
            "failures": report.failures,
        }),
    )?;
    info!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct TimingRow<'a> {
    scenario: &'a str,
    p: f64,
    n: usize,
    method: &'a str,
    replicate: usize,
    seconds: f64,
}

pub fn benchmark(mut a: BenchmarkArgs) -> Result<(), CliError> {
    let out = required(&a.out, "out")?;
    let scenarios: Vec<ScenarioKind> = a
        .scenario
        .get_or_insert_with(|| vec!["fourier".into()])
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_, sepsurf::Error>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let grid = grid_of(a.grid.get_or_insert_with(|| vec![20]))?;
    let n = *a.n.get_or_insert(100);
    let ps = a.p.get_or_insert_with(|| vec![0.1]).iter().map(|&p| fraction(p)).collect::<Result<Vec<_>, _>>()?;
    let replicates = *a.replicates.get_or_insert(5);
    let seed = *a.seed.get_or_insert(0);
    let default_h = (2.0 / grid.d1.min(grid.d2) as f64).max(0.1);
    let bw = bandwidth_set(a.bandwidth.get_or_insert_with(|| vec![default_h]))?;
    let include_4d = *a.include_4d.get_or_insert(false);
    let include_unpooled = *a.include_unpooled.get_or_insert(false);
    let include_bsa = *a.include_bsa.get_or_insert(true);
    if include_4d && grid.n_cells() >= COSTLY_4D_CELLS {
        warn!("4D smoothing on a {}x{} grid is slow; expect a long run", grid.d1, grid.d2);
    }
    let cfg = BenchmarkConfig { scenarios, grid, n, ps, replicates, seed, bandwidths: bw, include_4d, include_unpooled, include_bsa };
    let t = Instant::now();
    let rows = runtime_benchmark(&cfg)?;
    info!("benchmark: {} rows in {:.2?}", rows.len(), t.elapsed());
    write_csv(&out, &rows)?;
    write_json(&sidecar_path(&out), &json!({ "run": run_record("benchmark", &a) }))?;
    if let Some(tp) = &a.timings {
        let timing: Vec<TimingRow> = rows
            .iter()
            .filter(|r| r.seconds.is_finite())
            .map(|r| TimingRow { scenario: &r.scenario, p: r.p, n: r.n, method: &r.method, replicate: r.replicate, seconds: r.seconds })
            .collect();
        write_csv(tp, &timing)?;
    }
    info!("wrote {}", out.display());
    Ok(())
}

pub fn ingest(mut a: IngestArgs) -> Result<(), CliError> {
    let input = required(&a.input, "input")?;
    let out = required(&a.out, "out")?;
    let d = OptionScaling::default();
    let scaling = OptionScaling {
        tau_min_days: *a.tau_min_days.get_or_insert(d.tau_min_days),
        tau_max_days: *a.tau_max_days.get_or_insert(d.tau_max_days),
        log_moneyness_min: *a.log_moneyness_min.get_or_insert(d.log_moneyness_min),
        log_moneyness_max: *a.log_moneyness_max.get_or_insert(d.log_moneyness_max),
        days_per_year: *a.days_per_year.get_or_insert(d.days_per_year),
        log_iv: *a.log_iv.get_or_insert(d.log_iv),
    };
    if !(scaling.tau_max_days > scaling.tau_min_days && scaling.log_moneyness_max > scaling.log_moneyness_min) {
        return Err(CliError::Usage("scaling ranges must be increasing".into()));
    }
    let quotes = read_options_csv(File::open(&input).map_err(sepsurf::Error::from)?).map_err(data_error)?;
    let (ds, report) = ingest_options(&quotes, &scaling)?;
    info!(
        "{} quotes accepted, {} outside the domain, {} outside the arbitrage bracket",
        report.accepted, report.outside_domain, report.outside_bracket
    );
    write_dataset_csv(&ds, create(&out)?)?;
    write_json(&sidecar_path(&out), &json!({ "run": run_record("ingest-options", &a), "report": report }))?;
    Ok(())
}
