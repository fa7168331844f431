//! Monte Carlo experiment driver: seeded replicates across measurement-noise
//! levels, the MAPE metric, and report emission.
//!
//! Replicates are independent and run in parallel (rayon) unless a single
//! worker is requested or the `parallel` feature is disabled; results are
//! keyed by (noise level, replicate) so aggregation is order-independent.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

use crate::network::{
    assemble_bus_admittance, invert_branch_impedance, load_network, NetworkModel, ParameterIndex,
    DEFAULT_COND_BOUND,
};
use crate::sim::{
    add_measurement_noise, simulate, solve_equilibrium, LoadDynamics, NoiseSpec, SimOptions,
};
use crate::stage2::{run_pipeline, Aggregation, PipelineOptions};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no comparable entries: every true parameter is zero")]
    EmptyComparableSet,
    #[error("true and estimated parameter sets differ in length ({0} vs {1})")]
    MismatchedSets(usize, usize),
    #[error("output directory {0} already exists and is not empty (pass force to overwrite)")]
    OutputDirExists(PathBuf),
    #[error("feeder error: {0}")]
    Network(#[from] crate::network::NetworkError),
    #[error("simulation error: {0}")]
    Sim(#[from] crate::sim::SimError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// MAPE
// ---------------------------------------------------------------------------

/// Mean absolute percentage error over the entries with nonzero truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    pub percent: f64,
    pub included: usize,
    /// Entries skipped because the true value is zero (the relative error is
    /// undefined there).
    pub excluded_zero: usize,
}

pub fn mape(truth: &[f64], estimated: &[f64]) -> Result<Mape, HarnessError> {
    if truth.len() != estimated.len() {
        return Err(HarnessError::MismatchedSets(truth.len(), estimated.len()));
    }
    let mut total = 0.0;
    let mut included = 0usize;
    let mut excluded = 0usize;
    for (t, e) in truth.iter().zip(estimated) {
        if *t == 0.0 {
            excluded += 1;
        } else {
            total += ((t - e) / t).abs();
            included += 1;
        }
    }
    if included == 0 {
        return Err(HarnessError::EmptyComparableSet);
    }
    Ok(Mape {
        percent: 100.0 * total / included as f64,
        included,
        excluded_zero: excluded,
    })
}

// ---------------------------------------------------------------------------
// Seeding
// ---------------------------------------------------------------------------

/// splitmix64 step; the documented, version-stable seed mixer.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Replicate seed derivation: two chained splitmix64 steps folding in the
/// noise-level index and the replicate index. Stable across versions.
pub fn replicate_seed(master: u64, noise_index: usize, replicate: usize) -> u64 {
    let s = splitmix64(master ^ (noise_index as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15));
    splitmix64(s ^ (replicate as u64 + 1).wrapping_mul(0xD1B54A32D192ED03))
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

fn default_substeps() -> usize {
    10
}

fn default_snapshots() -> usize {
    8
}

fn default_lag() -> usize {
    1
}

/// A fully serializable experiment description; a run is reproducible from
/// this document alone (timing aside).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub feeder: PathBuf,
    pub dynamics: PathBuf,
    pub samples: usize,
    pub dt: f64,
    #[serde(default = "default_lag")]
    pub lag: usize,
    /// Measurement-noise standard deviations (pu on V, rad on angles) swept
    /// by the experiment.
    pub noise_levels: Vec<f64>,
    pub replicates: usize,
    pub master_seed: u64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Snapshots stacked by the stage-2 refinement.
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
    pub output_dir: PathBuf,
    /// Worker threads for replicate execution; None uses all cores, 1 forces
    /// sequential execution.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.replicates == 0 {
            return Err(HarnessError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "replicates must be at least 1",
            )));
        }
        if self.noise_levels.iter().any(|l| *l < 0.0) {
            return Err(HarnessError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "noise levels must be nonnegative",
            )));
        }
        Ok(())
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            lag: self.lag,
            aggregation: Aggregation::Snapshots(self.snapshots),
            ..PipelineOptions::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub noise: f64,
    pub replicate: usize,
    pub seed: u64,
    pub stage1_mape_g: Option<f64>,
    pub stage1_mape_b: Option<f64>,
    pub stage2_mape_g: Option<f64>,
    pub stage2_mape_b: Option<f64>,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Distribution {
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Distribution {
    fn from_values(values: &[f64]) -> Option<Distribution> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let quantile = |q: f64| -> f64 {
            let pos = q * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            if lo == hi {
                sorted[lo]
            } else {
                sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
            }
        };
        Some(Distribution {
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            median: quantile(0.5),
            q1: quantile(0.25),
            q3: quantile(0.75),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelReport {
    pub noise: f64,
    pub failures: usize,
    pub stage1_g: Option<Distribution>,
    pub stage1_b: Option<Distribution>,
    pub stage2_g: Option<Distribution>,
    pub stage2_b: Option<Distribution>,
    pub mean_wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub levels: Vec<LevelReport>,
    pub replicates: Vec<ReplicateOutcome>,
    pub total_wall_seconds: f64,
}

impl EvaluationReport {
    pub fn level(&self, noise: f64) -> Option<&LevelReport> {
        self.levels.iter().find(|l| l.noise == noise)
    }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

#[cfg(feature = "parallel")]
fn map_jobs<T, F>(count: usize, workers: Option<usize>, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if workers == Some(1) {
        return (0..count).map(job).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .expect("thread pool construction");
    pool.install(|| {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(&job).collect()
    })
}

#[cfg(not(feature = "parallel"))]
fn map_jobs<T, F>(count: usize, _workers: Option<usize>, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    (0..count).map(job).collect()
}

/// True parameter vector of a feeder, for scoring.
pub fn true_parameter_vector(
    net: &NetworkModel,
    params: &ParameterIndex,
) -> Result<DVector<f64>, HarnessError> {
    let adms = net
        .branches
        .iter()
        .map(|b| invert_branch_impedance(b, DEFAULT_COND_BOUND))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(params.theta_from_branches(&adms))
}

/// One simulate -> add noise -> estimate replicate. Returns the stage-1 and
/// stage-2 MAPE of G and B against the generating feeder.
fn run_replicate(
    net: &NetworkModel,
    dynamics: &LoadDynamics,
    truth: &DVector<f64>,
    config: &ExperimentConfig,
    noise_index: usize,
    replicate: usize,
) -> ReplicateOutcome {
    let noise = config.noise_levels[noise_index];
    let seed = replicate_seed(config.master_seed, noise_index, replicate);
    let start = Instant::now();
    let result = (|| -> Result<[Mape; 4], String> {
        let adm = assemble_bus_admittance(net, DEFAULT_COND_BOUND).map_err(|e| e.to_string())?;
        let op = solve_equilibrium(&adm, dynamics).map_err(|e| e.to_string())?;
        let series = simulate(
            &adm,
            dynamics,
            &op,
            config.dt,
            config.samples,
            seed,
            &SimOptions {
                substeps: config.substeps,
            },
        )
        .map_err(|e| e.to_string())?;
        let series = if noise > 0.0 {
            let spec = NoiseSpec::from_level(noise).map_err(|e| e.to_string())?;
            add_measurement_noise(&series, &spec, splitmix64(seed))
        } else {
            series
        };
        let output = run_pipeline(net, &adm, dynamics, &series, &config.pipeline_options())
            .map_err(|e| e.to_string())?;
        let npair = output.params.pair_count();
        let truth_g: Vec<f64> = truth.rows(0, npair).iter().copied().collect();
        let truth_b: Vec<f64> = truth.rows(npair, npair).iter().copied().collect();
        let slice = |v: &DVector<f64>, at: usize| -> Vec<f64> {
            v.rows(at, npair).iter().copied().collect()
        };
        let m = |t: &[f64], e: Vec<f64>| mape(t, &e).map_err(|err| err.to_string());
        Ok([
            m(&truth_g, slice(output.initial_theta(), 0))?,
            m(&truth_b, slice(output.initial_theta(), npair))?,
            m(&truth_g, slice(output.refined_theta(), 0))?,
            m(&truth_b, slice(output.refined_theta(), npair))?,
        ])
    })();
    let wall = start.elapsed().as_secs_f64();
    match result {
        Ok([s1g, s1b, s2g, s2b]) => ReplicateOutcome {
            noise,
            replicate,
            seed,
            stage1_mape_g: Some(s1g.percent),
            stage1_mape_b: Some(s1b.percent),
            stage2_mape_g: Some(s2g.percent),
            stage2_mape_b: Some(s2b.percent),
            wall_seconds: wall,
            error: None,
        },
        Err(message) => ReplicateOutcome {
            noise,
            replicate,
            seed,
            stage1_mape_g: None,
            stage1_mape_b: None,
            stage2_mape_g: None,
            stage2_mape_b: None,
            wall_seconds: wall,
            error: Some(message),
        },
    }
}

/// Run the full noise-level x replicate grid. Per-replicate failures are
/// recorded, not fatal; the report carries the failure counts.
pub fn run_experiment(config: &ExperimentConfig) -> Result<EvaluationReport, HarnessError> {
    config.validate()?;
    let net = load_network(&config.feeder)?;
    let dynamics = LoadDynamics::load(&net, &config.dynamics)?;
    let params = ParameterIndex::new(&net);
    let truth = true_parameter_vector(&net, &params)?;

    let total = Instant::now();
    let jobs = config.noise_levels.len() * config.replicates;
    let outcomes: Vec<ReplicateOutcome> = map_jobs(jobs, config.workers, |j| {
        let noise_index = j / config.replicates;
        let replicate = j % config.replicates;
        run_replicate(&net, &dynamics, &truth, config, noise_index, replicate)
    });

    let mut levels = Vec::new();
    for (noise_index, &noise) in config.noise_levels.iter().enumerate() {
        let rows: Vec<&ReplicateOutcome> = outcomes
            .iter()
            .skip(noise_index * config.replicates)
            .take(config.replicates)
            .collect();
        let collect = |f: fn(&ReplicateOutcome) -> Option<f64>| -> Vec<f64> {
            rows.iter().filter_map(|r| f(r)).collect()
        };
        let failures = rows.iter().filter(|r| r.error.is_some()).count();
        levels.push(LevelReport {
            noise,
            failures,
            stage1_g: Distribution::from_values(&collect(|r| r.stage1_mape_g)),
            stage1_b: Distribution::from_values(&collect(|r| r.stage1_mape_b)),
            stage2_g: Distribution::from_values(&collect(|r| r.stage2_mape_g)),
            stage2_b: Distribution::from_values(&collect(|r| r.stage2_mape_b)),
            mean_wall_seconds: rows.iter().map(|r| r.wall_seconds).sum::<f64>()
                / rows.len().max(1) as f64,
        });
    }

    Ok(EvaluationReport {
        levels,
        replicates: outcomes,
        total_wall_seconds: total.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Output emission
// ---------------------------------------------------------------------------

/// Write the result file set: a config snapshot, the long-format results CSV
/// (no timing columns so reruns are byte-identical), per-level distribution
/// files, a timing CSV, and a JSON summary.
pub fn emit_outputs(
    report: &EvaluationReport,
    config: &ExperimentConfig,
    dir: &Path,
    force: bool,
) -> Result<(), HarnessError> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(HarnessError::OutputDirExists(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir)?;

    std::fs::write(
        dir.join("config.snapshot.json"),
        serde_json::to_string_pretty(config)?,
    )?;

    // long-format results: noise,replicate,method,stage,metric,value
    let mut results = csv::Writer::from_path(dir.join("results.csv"))?;
    results.write_record(["noise", "replicate", "method", "stage", "metric", "value"])?;
    for row in &report.replicates {
        let mut emit =
            |stage: &str, metric: &str, value: Option<f64>| -> Result<(), HarnessError> {
                results.write_record(&[
                    format!("{:e}", row.noise),
                    format!("{}", row.replicate),
                    "ou".to_string(),
                    stage.to_string(),
                    metric.to_string(),
                    value.map_or_else(String::new, |v| format!("{v}")),
                ])?;
                Ok(())
            };
        emit("initial", "mape_g", row.stage1_mape_g)?;
        emit("initial", "mape_b", row.stage1_mape_b)?;
        emit("refined", "mape_g", row.stage2_mape_g)?;
        emit("refined", "mape_b", row.stage2_mape_b)?;
    }
    results.flush()?;

    let mut timings = csv::Writer::from_path(dir.join("timings.csv"))?;
    timings.write_record(["noise", "replicate", "wall_seconds"])?;
    for row in &report.replicates {
        timings.write_record(&[
            format!("{:e}", row.noise),
            format!("{}", row.replicate),
            format!("{}", row.wall_seconds),
        ])?;
    }
    timings.flush()?;

    for level in &report.levels {
        let mut w = csv::Writer::from_path(dir.join(format!("level_{:e}.csv", level.noise)))?;
        w.write_record([
            "replicate",
            "stage1_mape_g",
            "stage1_mape_b",
            "stage2_mape_g",
            "stage2_mape_b",
            "error",
        ])?;
        for row in report.replicates.iter().filter(|r| r.noise == level.noise) {
            let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
            w.write_record(&[
                format!("{}", row.replicate),
                fmt(row.stage1_mape_g),
                fmt(row.stage1_mape_b),
                fmt(row.stage2_mape_g),
                fmt(row.stage2_mape_b),
                row.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
    }

    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    Ok(())
}
