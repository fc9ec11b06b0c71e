//! Scenario orchestration: runs one of the modes over the configured
//! `(T, M, seed)` grid, writes per-cell trace CSVs, per-cell-group aggregate
//! CSVs and a JSON run record.

mod config;

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

pub use config::{ExperimentConfig, InitSpec, Mode, ModelSource, SCHEMA_VERSION};

use crate::gradcheck::{check_exact_gradient, random_observable_system, random_stabilizing_gain};
use crate::kalman::{dare_gain, KalmanSolution, DEFAULT_DARE_MAX_ITER, DEFAULT_DARE_TOL};
use crate::objective::{cost, duality_check, DualityReport, GainPolicy};
use crate::optimizer::{
    gd_run, gf_run, initial_gain, sgd_run, CostOracle, OptimizerTrace, SgdSettings, SimulatedSource, StopCriteria,
    TerminalStatus, WindowRule,
};
use crate::rng::{derive_seed, rng_from_seed, RNG_ALGORITHM};
use crate::sysmodel::{burn_in_for_rate, matrix_to_rows, SystemModel};
use crate::{Error, Matrix, Result, Vector};

/// Relative tolerance of the finite-difference gradient check.
pub const GRAD_CHECK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct KalmanReport {
    pub schema_version: u32,
    #[serde(rename = "P_inf")]
    pub p_inf: Vec<Vec<f64>>,
    #[serde(rename = "L_inf")]
    pub l_inf: Vec<Vec<f64>>,
    /// `ρ(A − L∞ H)`.
    pub rho: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl KalmanReport {
    pub fn new(sol: &KalmanSolution) -> Self {
        KalmanReport {
            schema_version: SCHEMA_VERSION,
            p_inf: matrix_to_rows(&sol.p_inf),
            l_inf: matrix_to_rows(&sol.l_inf),
            rho: sol.rho,
            iterations: sol.iterations,
            residual: sol.residual,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckCase {
    pub label: String,
    pub n: usize,
    pub m: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub schema_version: u32,
    pub tolerance: f64,
    pub cases: Vec<GradCheckCase>,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// One optimizer run of the sweep.
#[derive(Debug, Clone, Serialize)]
pub struct CellRecord {
    pub window: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed_index: usize,
    pub seed: u64,
    pub status: TerminalStatus,
    pub iterations: usize,
    pub final_gain: Vec<Vec<f64>>,
    pub initial_j: Option<f64>,
    pub final_j: Option<f64>,
    /// `‖L_K − L∞‖_F`, from the reporting oracle.
    pub gain_error: Option<f64>,
    pub trace_file: Option<String>,
    #[serde(skip)]
    pub trace: OptimizerTrace,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationStats {
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
}

/// Across-seed statistics for one `(T, M)` group. Standard deviations and
/// variances are population (divide by the number of traces).
#[derive(Debug, Clone, Serialize)]
pub struct AggregateSummary {
    pub window: Option<usize>,
    pub batch_size: Option<usize>,
    pub num_traces: usize,
    /// Traces of unequal length were cut to the shortest.
    pub truncated: bool,
    /// Statistics of `J(L_k)/J(L_0)` per iteration.
    pub normalized_error: Vec<IterationStats>,
    /// Statistics of `J(L_k)` per iteration.
    pub cost: Vec<IterationStats>,
    pub final_gain_mean: Vec<Vec<f64>>,
    pub final_gain_std: Vec<Vec<f64>>,
    pub final_j_mean: f64,
    pub final_j_var: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub library_version: &'static str,
    pub rng_algorithm: &'static str,
    /// Grids, seed count and step schedule defaults are artifact choices.
    pub note: &'static str,
    pub config: ExperimentConfig,
    pub burn_in: Option<usize>,
    pub cells: Vec<CellRecord>,
    pub aggregates: Vec<AggregateSummary>,
    pub kalman: Option<KalmanReport>,
    pub grad_check: Option<GradCheckReport>,
    pub duality: Vec<DualityReport>,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

impl RunRecord {
    /// `false` if any optimizer cell failed or any check did not pass.
    pub fn success(&self) -> bool {
        self.cells
            .iter()
            .all(|c| !matches!(c.status, TerminalStatus::Failed(_)))
            && self.grad_check.as_ref().is_none_or(|g| g.pass)
            && self.duality.iter().all(DualityReport::pass)
    }
}

fn stats(k: usize, values: &[f64]) -> IterationStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    IterationStats {
        k,
        mean,
        std: var.sqrt(),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        median,
    }
}

/// Per-iteration across-trace statistics of the true cost and of
/// `J(L_k)/J(L_0)`, plus final-gain statistics.
pub fn aggregate(traces: &[&OptimizerTrace]) -> Result<AggregateSummary> {
    if traces.is_empty() {
        return Err(Error::Parameter("aggregate needs at least one trace".into()));
    }
    let len = traces.iter().map(|t| t.records.len()).min().unwrap_or(0);
    let truncated = traces.iter().any(|t| t.records.len() != len);
    let costs: Vec<Vec<f64>> = traces.iter().map(|t| t.costs()).collect();
    let mut normalized_error = Vec::with_capacity(len);
    let mut cost_stats = Vec::with_capacity(len);
    for k in 0..len {
        let col: Vec<f64> = costs.iter().map(|c| c[k]).collect();
        let norm: Vec<f64> = costs.iter().map(|c| c[k] / c[0]).collect();
        cost_stats.push(stats(k, &col));
        normalized_error.push(stats(k, &norm));
    }

    let finals: Vec<&Matrix> = traces.iter().map(|t| &t.records[len - 1].l).collect();
    let n = traces.len() as f64;
    let mean = finals.iter().fold(Matrix::zeros(finals[0].nrows(), finals[0].ncols()), |acc, l| acc + *l) / n;
    let var = finals
        .iter()
        .fold(Matrix::zeros(mean.nrows(), mean.ncols()), |acc, l| acc + (*l - &mean).map(|d| d * d))
        / n;
    let final_costs: Vec<f64> = costs.iter().map(|c| c[len - 1]).collect();
    let fs = stats(len - 1, &final_costs);
    Ok(AggregateSummary {
        window: None,
        batch_size: None,
        num_traces: traces.len(),
        truncated,
        normalized_error,
        cost: cost_stats,
        final_gain_mean: matrix_to_rows(&mean),
        final_gain_std: matrix_to_rows(&var.map(f64::sqrt)),
        final_j_mean: fs.mean,
        final_j_var: fs.std * fs.std,
    })
}

/// Means of consecutive non-overlapping blocks of `width` values; a trailing
/// partial block is dropped.
pub fn block_means(values: &[f64], width: usize) -> Vec<f64> {
    values
        .chunks_exact(width.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

pub fn is_nonincreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

fn write_aggregate_csv(path: &Path, agg: &AggregateSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "mean", "std", "min", "max", "median", "J_median"])?;
    for (s, c) in agg.normalized_error.iter().zip(&agg.cost) {
        w.write_record([
            s.k.to_string(),
            format!("{:.17e}", s.mean),
            format!("{:.17e}", s.std),
            format!("{:.17e}", s.min),
            format!("{:.17e}", s.max),
            format!("{:.17e}", s.median),
            format!("{:.17e}", c.median),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn starting_gain(config: &ExperimentConfig, model: &SystemModel, seed: u64) -> Result<GainPolicy> {
    let gain = match &config.init {
        InitSpec::Surrogate => initial_gain(&model.public())?,
        InitSpec::Explicit { l } => GainPolicy::for_model(model, ExperimentConfig::explicit_gain(l)?)
            .map_err(|e| Error::config("init.l", e.to_string()))?,
        InitSpec::Random { sigma, max_rho } => {
            let mut rng = rng_from_seed(derive_seed(seed, &[0x1417]));
            random_stabilizing_gain(model, &mut rng, *sigma, *max_rho)?
        }
    };
    if !gain.stabilizing {
        return Err(Error::config("init", format!("initial gain is not stabilizing (rho = {})", gain.rho)));
    }
    Ok(gain)
}

fn cell_record(
    trace: OptimizerTrace,
    oracle: &CostOracle,
    window: Option<usize>,
    batch_size: Option<usize>,
    seed_index: usize,
    seed: u64,
) -> CellRecord {
    let last = trace.final_gain().clone();
    CellRecord {
        window,
        batch_size,
        seed_index,
        seed,
        status: trace.terminal_status.clone(),
        iterations: trace.records.len() - 1,
        final_gain: matrix_to_rows(&last),
        initial_j: trace.records[0].j.or_else(|| oracle.cost(&trace.records[0].l)),
        final_j: oracle.cost(&last),
        gain_error: Some(oracle.report_gain_error(&last)),
        trace_file: None,
        trace,
    }
}

/// Runs the configured mode and, if `out_dir` is set, writes its artifacts.
pub fn run_scenario(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let started = Instant::now();
    let model = config.model.load()?;
    model
        .check_for_objective()
        .map_err(|e| Error::config("model", e.to_string()))?;
    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut record = RunRecord {
        schema_version: SCHEMA_VERSION,
        library_version: crate::VERSION,
        rng_algorithm: RNG_ALGORITHM,
        note: "T_grid, M_grid, K, num_seeds and the SGD schedule defaults are artifact choices",
        config: config.clone(),
        burn_in: None,
        cells: Vec::new(),
        aggregates: Vec::new(),
        kalman: None,
        grad_check: None,
        duality: Vec::new(),
        warnings: Vec::new(),
        wall_time_s: 0.0,
    };

    match config.mode {
        Mode::Kalman => {
            let sol = dare_gain(&model, DEFAULT_DARE_TOL, DEFAULT_DARE_MAX_ITER)?;
            record.kalman = Some(KalmanReport::new(&sol));
        }
        Mode::Gd | Mode::Gf => run_exact(config, &model, &mut record)?,
        Mode::Sgd => run_sgd(config, &model, &mut record)?,
        Mode::GradCheck => record.grad_check = Some(run_grad_check(config, &model)?),
        Mode::CheckDuality => {
            let gain = starting_gain(config, &model, config.seed0)?;
            let a = match &config.duality_direction {
                Some(v) if v.len() == model.n() => Vector::from_column_slice(v),
                Some(_) => return Err(Error::config("duality_direction", format!("must have length {}", model.n()))),
                None => {
                    let mut e1 = Vector::zeros(model.n());
                    e1[0] = 1.0;
                    e1
                }
            };
            for (i, &t) in config.t_grid.iter().enumerate() {
                let seed = derive_seed(config.seed0, &[i as u64, t as u64]);
                record
                    .duality
                    .push(duality_check(&model, &gain, &a, t, config.duality_samples, seed, config.exec)?);
            }
        }
    }

    for agg in &record.aggregates {
        if agg.truncated {
            record.warnings.push(format!(
                "traces for T={:?}, M={:?} had unequal lengths and were aligned to the shortest",
                agg.window, agg.batch_size
            ));
        }
    }
    if let Some(dir) = &config.out_dir {
        write_artifacts(dir, &mut record)?;
    }
    record.wall_time_s = started.elapsed().as_secs_f64();
    if let Some(dir) = &config.out_dir {
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    }
    Ok(record)
}

fn write_artifacts(dir: &Path, record: &mut RunRecord) -> Result<()> {
    let include_gain_err = record.config.oracle;
    for cell in &mut record.cells {
        let name = match (cell.window, cell.batch_size) {
            (Some(t), Some(m)) => format!("trace_T{t}_M{m}_s{}.csv", cell.seed_index),
            _ => format!("trace_s{}.csv", cell.seed_index),
        };
        cell.trace
            .write_csv(fs::File::create(dir.join(&name))?, include_gain_err)?;
        cell.trace_file = Some(name);
    }
    for agg in &record.aggregates {
        let name = match (agg.window, agg.batch_size) {
            (Some(t), Some(m)) => format!("aggregate_T{t}_M{m}.csv"),
            _ => "aggregate.csv".to_string(),
        };
        write_aggregate_csv(&dir.join(name), agg)?;
    }
    if !record.aggregates.is_empty() {
        let body = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "aggregates": record.aggregates,
        });
        fs::write(dir.join("aggregate.json"), serde_json::to_string_pretty(&body)?)?;
    }
    if let Some(k) = &record.kalman {
        fs::write(dir.join("kalman.json"), serde_json::to_string_pretty(k)?)?;
    }
    if let Some(g) = &record.grad_check {
        fs::write(dir.join("grad_check.json"), serde_json::to_string_pretty(g)?)?;
    }
    if !record.duality.is_empty() {
        let body = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "checks": record.duality,
        });
        fs::write(dir.join("duality.json"), serde_json::to_string_pretty(&body)?)?;
    }
    Ok(())
}

fn run_exact(config: &ExperimentConfig, model: &SystemModel, record: &mut RunRecord) -> Result<()> {
    let oracle = CostOracle::new(model, true)?;
    let stop = StopCriteria {
        grad_tol: config.grad_tol,
        max_iter: config.max_iter,
    };
    let seeds = if matches!(config.init, InitSpec::Random { .. }) {
        config.num_seeds
    } else {
        1
    };
    let cells = config.exec.try_map(seeds, |s| -> Result<CellRecord> {
        let seed = derive_seed(config.seed0, &[s as u64]);
        let l0 = starting_gain(config, model, seed)?;
        let trace = if config.mode == Mode::Gf {
            gf_run(model, &l0, config.gf_step, &stop)?
        } else {
            gd_run(model, &l0, &config.step, &stop)?
        };
        Ok(cell_record(trace, &oracle, None, None, s, seed))
    })?;
    let traces: Vec<&OptimizerTrace> = cells.iter().map(|c| &c.trace).collect();
    record.aggregates.push(aggregate(&traces)?);
    record.cells = cells;
    Ok(())
}

fn run_sgd(config: &ExperimentConfig, model: &SystemModel, record: &mut RunRecord) -> Result<()> {
    let public = model.public();
    let oracle = CostOracle::new(model, config.oracle)?;
    let burn_in = match config.burn_in {
        Some(b) => b,
        None => burn_in_for_rate(initial_gain(&public)?.rho),
    };
    record.burn_in = Some(burn_in);

    let grid: Vec<(usize, usize, usize)> = config
        .t_grid
        .iter()
        .flat_map(|&t| {
            config
                .m_grid
                .iter()
                .flat_map(move |&m| (0..config.num_seeds).map(move |s| (t, m, s)))
        })
        .collect();
    let cells = config.exec.try_map(grid.len(), |i| -> Result<CellRecord> {
        let (t, m, s) = grid[i];
        let seed = derive_seed(config.seed0, &[s as u64, t as u64, m as u64]);
        let l0 = starting_gain(config, model, derive_seed(config.seed0, &[s as u64]))?;
        let source = SimulatedSource::new(model, burn_in, seed)?;
        let settings = SgdSettings {
            schedule: config.step,
            batch_size: m,
            iterations: config.iterations,
            window: WindowRule::Fixed(t),
            exec: config.exec,
        };
        let trace = sgd_run(&public, &source, &l0, &settings, Some(&oracle))?;
        Ok(cell_record(trace, &oracle, Some(t), Some(m), s, seed))
    })?;

    for &t in &config.t_grid {
        for &m in &config.m_grid {
            let traces: Vec<&OptimizerTrace> = cells
                .iter()
                .filter(|c| c.window == Some(t) && c.batch_size == Some(m))
                .map(|c| &c.trace)
                .collect();
            let mut agg = aggregate(&traces)?;
            agg.window = Some(t);
            agg.batch_size = Some(m);
            record.aggregates.push(agg);
        }
    }
    record.cells = cells;
    Ok(())
}

fn run_grad_check(config: &ExperimentConfig, model: &SystemModel) -> Result<GradCheckReport> {
    let mut cases = Vec::new();
    let l0 = starting_gain(config, model, config.seed0)?;
    let cmp = check_exact_gradient(model, &l0)?;
    cases.push(GradCheckCase {
        label: "configured model".into(),
        n: model.n(),
        m: model.m(),
        max_rel_err: cmp.max_rel_err,
        pass: cmp.max_rel_err <= GRAD_CHECK_TOL,
    });
    let mut rng = rng_from_seed(derive_seed(config.seed0, &[0x6ad]));
    for i in 0..config.grad_check_systems {
        let n = 1 + i % 4;
        let m = 1 + (i / 4) % 2;
        let sys = random_observable_system(&mut rng, n, m);
        let gain = random_stabilizing_gain(&sys, &mut rng, 0.3, 0.95)?;
        let cmp = check_exact_gradient(&sys, &gain)?;
        cases.push(GradCheckCase {
            label: format!("random system {i}"),
            n,
            m,
            max_rel_err: cmp.max_rel_err,
            pass: cmp.max_rel_err <= GRAD_CHECK_TOL,
        });
    }
    let max_rel_err = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        schema_version: SCHEMA_VERSION,
        tolerance: GRAD_CHECK_TOL,
        pass: cases.iter().all(|c| c.pass),
        cases,
        max_rel_err,
    })
}

/// Cost of the configured model at `l`, for callers holding only a config.
pub fn evaluate_cost(model: &SystemModel, l: &Matrix) -> Result<f64> {
    cost(model, &GainPolicy::for_model(model, l.clone())?).map(|e| e.j)
}
